#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpi {

/// Axis-aligned rectangle in real-valued pixel coordinates (left, top, width, height).
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double center_x() const { return x + 0.5 * w; }
  double center_y() const { return y + 0.5 * h; }
  bool valid() const { return w > 0.0 && h > 0.0; }
  bool contains_point(double px, double py) const {
    return px >= x && px <= right() && py >= y && py <= bottom();
  }

  friend bool operator==(const Box&, const Box&) = default;
};

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double iou(const Box& a, const Box& b);
double intersection_area(const Box& a, const Box& b);
Box union_box(const Box& a, const Box& b);
/// Intersection of two boxes; w or h is zero when disjoint.
Box intersect(const Box& a, const Box& b);
Box clip_to(const Box& b, double width, double height);
Box dilate(const Box& b, double margin);

enum class CoordSpace : std::uint8_t { canvas, frame };

struct Detection {
  Box box;
  int class_id = 0;
  double confidence = 0.0;
  CoordSpace space = CoordSpace::frame;
  int track_id = -1;
  bool interpolated = false;
};

/// Class-aware greedy non-maximum suppression.
///
/// Candidates are visited in descending confidence; ties go to the smaller
/// box, then to input order. A candidate is suppressed when its IoU with an
/// already kept detection of the same class exceeds `iou_threshold`.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold);

/// Where one ROI landed on a canvas. `pos_x/pos_y` is the top-left of the
/// scaled ROI content (inside its border ring).
struct Placement {
  int roi_id = -1;
  int canvas_id = -1;
  int pos_x = 0;
  int pos_y = 0;
  double scale = 1.0;
  int placed_w = 0;
  int placed_h = 0;

  Box placed_rect() const {
    return {static_cast<double>(pos_x), static_cast<double>(pos_y),
            static_cast<double>(placed_w), static_cast<double>(placed_h)};
  }
};

int scaled_extent(double extent, double scale);

Box frame_to_canvas(const Box& frame_box, const Placement& placement, const Box& roi_box);

/// Inverse of `frame_to_canvas`. Throws GeometryError when `det_box` is not
/// inside the placed rectangle.
Box canvas_to_frame(const Box& det_box, const Placement& placement, const Box& roi_box);

/// Half-up rounding used whenever a real coordinate becomes a pixel index.
inline long round_half_up(double v) { return static_cast<long>(std::floor(v + 0.5)); }

}  // namespace cpi
