#include "cpi/roi_packing.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <tuple>

namespace cpi {

GuillotineBin::GuillotineBin(int side) : side_(side) { free_.push_back({0, 0, side, side}); }

long GuillotineBin::free_area() const {
  long a = 0;
  for (const auto& r : free_) a += r.area();
  return a;
}

int GuillotineBin::choose(int w, int h) const {
  int best = -1;
  long best_left = 0;
  for (std::size_t i = 0; i < free_.size(); ++i) {
    const Rect& f = free_[i];
    if (f.w < w || f.h < h) continue;
    const long left = f.area() - static_cast<long>(w) * h;
    if (best < 0 || left < best_left) {
      best = static_cast<int>(i);
      best_left = left;
    }
  }
  return best;
}

Rect GuillotineBin::place(int index, int w, int h) {
  const Rect f = free_.at(static_cast<std::size_t>(index));
  free_.erase(free_.begin() + index);
  const Rect used{f.x, f.y, w, h};

  const int lw = f.w - w;
  const int lh = f.h - h;
  Rect bottom, right;
  if (lw <= lh) {
    // Horizontal cut: the bottom piece spans the full width.
    bottom = {f.x, f.y + h, f.w, lh};
    right = {f.x + w, f.y, lw, h};
  } else {
    bottom = {f.x, f.y + h, w, lh};
    right = {f.x + w, f.y, lw, f.h};
  }
  if (bottom.w > 0 && bottom.h > 0) free_.push_back(bottom);
  if (right.w > 0 && right.h > 0) free_.push_back(right);
  merge();
  return used;
}

void GuillotineBin::merge() {
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < free_.size() && !changed; ++i) {
      for (std::size_t j = i + 1; j < free_.size() && !changed; ++j) {
        Rect& a = free_[i];
        const Rect& b = free_[j];
        if (a.x == b.x && a.w == b.w) {
          if (a.y + a.h == b.y) {
            a.h += b.h;
            changed = true;
          } else if (b.y + b.h == a.y) {
            a.y = b.y;
            a.h += b.h;
            changed = true;
          }
        } else if (a.y == b.y && a.h == b.h) {
          if (a.x + a.w == b.x) {
            a.w += b.w;
            changed = true;
          } else if (b.x + b.w == a.x) {
            a.x = b.x;
            a.w += b.w;
            changed = true;
          }
        }
        if (changed) free_.erase(free_.begin() + static_cast<long>(j));
      }
    }
  }
}

double PackedCanvas::fillup_ratio() const {
  long used = 0;
  for (const auto& r : occupied) used += r.area();
  return static_cast<double>(used) / (static_cast<double>(side) * side);
}

void order_rois(std::vector<PackRequest>& requests) {
  std::stable_sort(requests.begin(), requests.end(), [](const PackRequest& a, const PackRequest& b) {
    return std::make_tuple(static_cast<int>(a.priority), -a.consecutive_drop_count, -a.packed_area(), a.roi_id) <
           std::make_tuple(static_cast<int>(b.priority), -b.consecutive_drop_count, -b.packed_area(), b.roi_id);
  });
}

PackResult pack(const CanvasPlan& plan, const std::vector<CanvasTemplate>& templates,
                std::span<const PackRequest> ordered) {
  PackResult out;
  if (plan.counts.size() != templates.size()) throw PlanningError("plan does not match the template list");

  std::vector<int> sides;
  for (std::size_t i = 0; i < templates.size(); ++i)
    for (int n = 0; n < plan.counts[i]; ++n) sides.push_back(templates[i].side);
  std::stable_sort(sides.begin(), sides.end(), std::greater<>());
  for (int s : sides) {
    PackedCanvas c;
    c.id = static_cast<int>(out.canvases.size());
    c.side = s;
    c.bin = GuillotineBin(s);
    out.canvases.push_back(std::move(c));
  }
  int largest = 0;
  for (const auto& t : templates) largest = std::max(largest, t.side);

  for (const PackRequest& req : ordered) {
    const int w = req.width();
    const int h = req.height();
    if (w > largest || h > largest) {
      out.dropped.push_back({req.roi_id, DropReason::LargerThanTemplate});
      continue;
    }
    int target = -1;
    int slot = -1;
    if (req.priority == PriorityClass::ProbeOrLastFrame) {
      for (std::size_t c = 0; c < out.canvases.size() && target < 0; ++c) {
        const int s = out.canvases[c].bin.choose(w, h);
        if (s >= 0) {
          target = static_cast<int>(c);
          slot = s;
        }
      }
    } else {
      long best_left = 0;
      for (std::size_t c = 0; c < out.canvases.size(); ++c) {
        const int s = out.canvases[c].bin.choose(w, h);
        if (s < 0) continue;
        const long left = out.canvases[c].bin.free_area() - static_cast<long>(w) * h;
        if (target < 0 || left < best_left) {
          target = static_cast<int>(c);
          slot = s;
          best_left = left;
        }
      }
    }
    if (target < 0) {
      out.dropped.push_back({req.roi_id, DropReason::NoSpace});
      continue;
    }
    PackedCanvas& canvas = out.canvases[static_cast<std::size_t>(target)];
    const Rect used = canvas.bin.place(slot, w, h);
    Placement p;
    p.roi_id = req.roi_id;
    p.canvas_id = canvas.id;
    p.pos_x = used.x + req.border;
    p.pos_y = used.y + req.border;
    p.scale = req.scale;
    p.placed_w = req.content_w();
    p.placed_h = req.content_h();
    canvas.placements.push_back(p);
    canvas.occupied.push_back(used);
  }
  return out;
}

void blit_roi(GrayImage& canvas, const GrayImage& frame, const Box& roi, const Placement& placement) {
  const GrayImage crop = resample_region(frame, roi, placement.placed_w, placement.placed_h);
  canvas.block(placement.pos_y, placement.pos_x, placement.placed_h, placement.placed_w) = crop;
}

GrayImage rasterize(const PackedCanvas& canvas, std::span<const PackRequest> requests, const FrameLookup& frames,
                    std::uint8_t fill) {
  GrayImage img = GrayImage::Constant(canvas.side, canvas.side, fill);
  std::map<int, const PackRequest*> by_id;
  for (const auto& r : requests) by_id[r.roi_id] = &r;
  for (const auto& p : canvas.placements) {
    const auto it = by_id.find(p.roi_id);
    if (it == by_id.end()) continue;
    blit_roi(img, frames(it->second->frame_index), it->second->roi_box, p);
  }
  return img;
}

}  // namespace cpi
