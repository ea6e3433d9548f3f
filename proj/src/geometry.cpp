#include "cpi/geometry.hpp"

#include <algorithm>
#include <numeric>

namespace cpi {

Box intersect(const Box& a, const Box& b) {
  const double x0 = std::max(a.x, b.x);
  const double y0 = std::max(a.y, b.y);
  const double x1 = std::min(a.right(), b.right());
  const double y1 = std::min(a.bottom(), b.bottom());
  return {x0, y0, std::max(0.0, x1 - x0), std::max(0.0, y1 - y0)};
}

double intersection_area(const Box& a, const Box& b) { return intersect(a, b).area(); }

double iou(const Box& a, const Box& b) {
  if (a == b) return 1.0;
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

Box union_box(const Box& a, const Box& b) {
  const double x0 = std::min(a.x, b.x);
  const double y0 = std::min(a.y, b.y);
  const double x1 = std::max(a.right(), b.right());
  const double y1 = std::max(a.bottom(), b.bottom());
  return {x0, y0, x1 - x0, y1 - y0};
}

Box clip_to(const Box& b, double width, double height) {
  return intersect(b, Box{0.0, 0.0, width, height});
}

Box dilate(const Box& b, double margin) {
  return {b.x - margin, b.y - margin, b.w + 2.0 * margin, b.h + 2.0 * margin};
}

std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    if (dets[i].confidence != dets[j].confidence) return dets[i].confidence > dets[j].confidence;
    return dets[i].box.area() < dets[j].box.area();
  });

  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& cand = dets[idx];
    bool suppressed = false;
    for (Detection& k : kept) {
      if (k.class_id == cand.class_id && iou(k.box, cand.box) > iou_threshold) {
        // Keep track identity when the survivor came from an untracked ROI.
        if (k.track_id < 0) k.track_id = cand.track_id;
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

int scaled_extent(double extent, double scale) {
  return std::max(1, static_cast<int>(round_half_up(extent * scale)));
}

Box frame_to_canvas(const Box& frame_box, const Placement& p, const Box& roi_box) {
  return {(frame_box.x - roi_box.x) * p.scale + p.pos_x, (frame_box.y - roi_box.y) * p.scale + p.pos_y,
          frame_box.w * p.scale, frame_box.h * p.scale};
}

Box canvas_to_frame(const Box& det_box, const Placement& p, const Box& roi_box) {
  constexpr double kEps = 1e-6;
  const Box placed = p.placed_rect();
  if (det_box.x < placed.x - kEps || det_box.y < placed.y - kEps ||
      det_box.right() > placed.right() + kEps || det_box.bottom() > placed.bottom() + kEps) {
    throw GeometryError("detection box lies outside placement of roi " + std::to_string(p.roi_id));
  }
  if (!(p.scale > 0.0)) throw GeometryError("placement scale must be positive");
  return {(det_box.x - p.pos_x) / p.scale + roi_box.x, (det_box.y - p.pos_y) / p.scale + roi_box.y,
          det_box.w / p.scale, det_box.h / p.scale};
}

}  // namespace cpi
