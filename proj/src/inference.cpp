#include "cpi/inference.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <sys/wait.h>

#include "cpi/media_io.hpp"

namespace cpi {

CanvasInference run_packed_inference(const PackedCanvas& canvas, const GrayImage* image,
                                     std::span<const PackRequest> requests, Detector& detector) {
  CanvasInference out;
  out.canvas_id = canvas.id;
  out.side = canvas.side;
  out.per_placement.resize(canvas.placements.size());

  std::map<int, const PackRequest*> by_id;
  for (const auto& r : requests) by_id[r.roi_id] = &r;
  std::vector<PlacedRoi> placed;
  placed.reserve(canvas.placements.size());
  for (const auto& p : canvas.placements) {
    PlacedRoi pr;
    pr.placement = p;
    if (const auto it = by_id.find(p.roi_id); it != by_id.end()) {
      pr.frame_index = it->second->frame_index;
      pr.roi_box = it->second->roi_box;
    }
    placed.push_back(pr);
  }
  CanvasView view{canvas.side, image, placed};

  std::vector<Detection> dets;
  try {
    dets = detector.detect(view);
  } catch (const DetectorError& e) {
    out.failed = true;
    out.error = e.what();
    return out;
  }
  out.returned = static_cast<int>(dets.size());
  for (auto& d : dets) {
    d.space = CoordSpace::canvas;
    const double cx = d.box.center_x();
    const double cy = d.box.center_y();
    int owner = -1;
    for (std::size_t i = 0; i < canvas.placements.size(); ++i) {
      if (canvas.placements[i].placed_rect().contains_point(cx, cy)) {
        owner = static_cast<int>(i);
        break;
      }
    }
    if (owner < 0) {
      ++out.discarded;
      continue;
    }
    out.per_placement[static_cast<std::size_t>(owner)].push_back(d);
  }
  return out;
}

Reconstruction reconstruct(std::span<const CanvasInference> results, std::span<const PackedCanvas> canvases,
                           const std::map<int, RoiRef>& rois, int frame_w, int frame_h, double nms_iou) {
  std::map<int, const PackedCanvas*> canvas_by_id;
  for (const auto& c : canvases) canvas_by_id[c.id] = &c;

  Reconstruction out;
  std::map<int, std::vector<Detection>> raw;
  for (const auto& res : results) {
    if (res.failed) continue;
    const auto cit = canvas_by_id.find(res.canvas_id);
    if (cit == canvas_by_id.end()) throw GeometryError("result for unknown canvas " + std::to_string(res.canvas_id));
    const PackedCanvas& canvas = *cit->second;
    for (std::size_t i = 0; i < res.per_placement.size(); ++i) {
      const Placement& p = canvas.placements.at(i);
      const auto rit = rois.find(p.roi_id);
      if (rit == rois.end()) throw GeometryError("placement for unknown ROI " + std::to_string(p.roi_id));
      const RoiRef& ref = rit->second;
      for (Detection d : res.per_placement[i]) {
        const Box inside = intersect(d.box, p.placed_rect());
        if (!inside.valid()) continue;
        Box fb = canvas_to_frame(inside, p, ref.box);
        const Box clipped = clip_to(fb, frame_w, frame_h);
        if (!(clipped == fb)) ++out.clipped;
        if (!clipped.valid()) continue;
        d.box = clipped;
        d.space = CoordSpace::frame;
        d.track_id = ref.track_id;
        raw[ref.frame_index].push_back(d);
      }
    }
  }
  for (auto& [frame, dets] : raw) out.by_frame[frame] = nms(dets, nms_iou);
  return out;
}

std::optional<Detection> interpolate_dropped(const TrackHistory& history, int frame, int horizon,
                                             double confidence_discount) {
  if (history.empty()) return std::nullopt;
  if (const auto exact = history.find(frame); exact != history.end()) return exact->second;

  const auto after = history.upper_bound(frame);
  const Detection* past = after == history.begin() ? nullptr : &std::prev(after)->second;
  const int past_frame = past ? std::prev(after)->first : 0;
  const Detection* next = (after != history.end() && after->first - frame <= horizon) ? &after->second : nullptr;

  Detection d;
  if (past && next && frame - past_frame <= horizon) {
    const double t = static_cast<double>(frame - past_frame) / (after->first - past_frame);
    auto lerp = [t](double a, double b) { return a + t * (b - a); };
    d = *past;
    d.box = {lerp(past->box.x, next->box.x), lerp(past->box.y, next->box.y), lerp(past->box.w, next->box.w),
             lerp(past->box.h, next->box.h)};
    d.confidence = std::min(past->confidence, next->confidence) * confidence_discount;
  } else if (past) {
    d = *past;
    d.confidence = past->confidence * confidence_discount;
  } else if (next) {
    d = *next;
    d.confidence = next->confidence * confidence_discount;
  } else {
    return std::nullopt;
  }
  d.interpolated = true;
  d.space = CoordSpace::frame;
  return d;
}

// ---------------------------------------------------------------------------
// External detector

std::vector<Detection> parse_detection_csv(const std::string& text) {
  std::vector<Detection> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    Detection d;
    double x, y, w, h, conf;
    int cls;
    char tail;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%d,%lf %c", &x, &y, &w, &h, &cls, &conf, &tail) != 6) {
      throw DetectorError("detector output line " + std::to_string(line_no) + ": expected x,y,w,h,class,conf");
    }
    if (!(w > 0 && h > 0) || conf < 0.0 || conf > 1.0) {
      throw DetectorError("detector output line " + std::to_string(line_no) + ": invalid box or confidence");
    }
    d.box = {x, y, w, h};
    d.class_id = cls;
    d.confidence = conf;
    d.space = CoordSpace::canvas;
    out.push_back(d);
  }
  return out;
}

ExternalDetector::ExternalDetector(std::string command, std::filesystem::path scratch_dir)
    : command_(std::move(command)), scratch_dir_(std::move(scratch_dir)) {
  if (command_.empty()) throw DetectorError("external detector command is empty");
  std::filesystem::create_directories(scratch_dir_);
}

DetectorCapabilities ExternalDetector::capabilities() const { return DetectorCapabilities{}; }

std::vector<Detection> ExternalDetector::detect(const CanvasView& canvas) {
  if (!canvas.image) throw DetectorError("external detector needs canvas pixels");
  const auto path = scratch_dir_ / ("canvas_" + std::to_string(calls_++) + ".pgm");
  write_pgm(path, *canvas.image);
  const std::string cmd = command_ + " '" + path.string() + "'";
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  if (!pipe) throw DetectorError("cannot start detector command: " + command_);
  std::string output;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe.get())) > 0) output.append(buf.data(), n);
  const int status = pclose(pipe.release());
  std::filesystem::remove(path);
  if (status != 0) {
    throw DetectorError("detector command exited with status " +
                        std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : status));
  }
  return parse_detection_csv(output);
}

}  // namespace cpi
