#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpi/detector.hpp"
#include "cpi/roi_packing.hpp"

namespace cpi {

struct CanvasInference {
  int canvas_id = -1;
  int side = 0;
  /// Detections in canvas coordinates, parallel to the canvas placements.
  std::vector<std::vector<Detection>> per_placement;
  int discarded = 0;  // centre on fill pixels
  int returned = 0;   // raw detector output count
  bool failed = false;
  std::string error;
};

/// Run the detector once on a packed canvas and assign each detection to the
/// placement whose rectangle contains its centre. `image` may be null for
/// detectors that do not read pixels.
CanvasInference run_packed_inference(const PackedCanvas& canvas, const GrayImage* image,
                                     std::span<const PackRequest> requests, Detector& detector);

/// What the reconstructor needs to know about each packed ROI.
struct RoiRef {
  int frame_index = 0;
  Box box;
  int track_id = -1;
};

struct Reconstruction {
  std::map<int, std::vector<Detection>> by_frame;
  int clipped = 0;
};

/// Map assigned detections back to frame coordinates, clip to the frame, and
/// apply class-aware NMS per frame. Survivors keep their ROI's track id.
Reconstruction reconstruct(std::span<const CanvasInference> results, std::span<const PackedCanvas> canvases,
                           const std::map<int, RoiRef>& rois, int frame_w, int frame_h, double nms_iou = 0.5);

/// Real detections of one track keyed by frame index.
using TrackHistory = std::map<int, Detection>;

/// Linear interpolation between the nearest anchors before and after `frame`
/// within `horizon` frames; zero-order hold of the past anchor otherwise.
std::optional<Detection> interpolate_dropped(const TrackHistory& history, int frame, int horizon,
                                             double confidence_discount = 0.9);

}  // namespace cpi
