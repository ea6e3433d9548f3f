#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cpi/canvas_planning.hpp"
#include "cpi/geometry.hpp"
#include "cpi/image.hpp"

namespace cpi {

inline constexpr std::uint8_t kCanvasFill = 114;

enum class PriorityClass : std::uint8_t { ProbeOrLastFrame = 0, NewOrLowConfidence = 1, Regular = 2 };

struct PackRequest {
  int roi_id = -1;
  int frame_index = 0;
  Box roi_box;
  double scale = 1.0;
  int border = 2;
  PriorityClass priority = PriorityClass::Regular;
  int consecutive_drop_count = 0;

  int content_w() const { return scaled_extent(roi_box.w, scale); }
  int content_h() const { return scaled_extent(roi_box.h, scale); }
  int width() const { return content_w() + 2 * border; }
  int height() const { return content_h() + 2 * border; }
  double packed_area() const { return static_cast<double>(width()) * height(); }
};

/// Integer rectangle used by the packer (x, y, w, h).
struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  long area() const { return static_cast<long>(w) * h; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

/// Guillotine bin: best-area-fit, split along the shorter leftover axis,
/// merge of adjacent free rectangles after every placement.
class GuillotineBin {
 public:
  explicit GuillotineBin(int side);

  int side() const { return side_; }
  const std::vector<Rect>& free_rects() const { return free_; }
  long free_area() const;

  /// Free rectangle a w x h request would take, or -1.
  int choose(int w, int h) const;
  /// Place at the top-left of free rectangle `index`; returns the used rect.
  Rect place(int index, int w, int h);

 private:
  void merge();

  int side_;
  std::vector<Rect> free_;
};

struct PackedCanvas {
  int id = 0;
  int side = 0;
  GuillotineBin bin{1};
  std::vector<Placement> placements;
  std::vector<Rect> occupied;  // placement rectangles including border

  double fillup_ratio() const;
};

enum class DropReason : std::uint8_t { NoSpace, LargerThanTemplate };

struct DroppedRoi {
  int roi_id = -1;
  DropReason reason = DropReason::NoSpace;
};

struct PackResult {
  std::vector<PackedCanvas> canvases;
  std::vector<DroppedRoi> dropped;
};

/// Priority, then descending drop count, then descending packed area, then id.
void order_rois(std::vector<PackRequest>& requests);

/// Canvases are instantiated from the plan largest first. Last-frame and
/// probe requests try canvas 0 first and overflow in order; others go to the
/// canvas with the least free area left after placement.
PackResult pack(const CanvasPlan& plan, const std::vector<CanvasTemplate>& templates,
                std::span<const PackRequest> ordered);

/// Resample `roi` of `frame` into the placed rectangle of `canvas`.
void blit_roi(GrayImage& canvas, const GrayImage& frame, const Box& roi, const Placement& placement);

using FrameLookup = std::function<const GrayImage&(int frame_index)>;

/// Render one canvas: fill everywhere, then each ROI crop at its placement.
GrayImage rasterize(const PackedCanvas& canvas, std::span<const PackRequest> requests, const FrameLookup& frames,
                    std::uint8_t fill = kCanvasFill);

}  // namespace cpi
