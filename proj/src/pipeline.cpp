#include "cpi/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "cpi/rng.hpp"

namespace cpi {

int PipelineConfig::frames_per_window(double fps) const {
  return std::max(1, static_cast<int>(round_half_up(window_ms / 1000.0 * fps)));
}

void PipelineConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("pipeline config: ") + what);
  };
  require(window_ms > 0.0, "window_ms must be positive");
  require(feedback_lag >= 0, "feedback_lag must be >= 0");
  require(fixed_scale > 0.0 && fixed_scale <= 1.0, "fixed_scale must be in (0, 1]");
  require(!template_sides.empty(), "template list is empty");
  require(template_sides.front() > 0 && std::is_sorted(template_sides.begin(), template_sides.end(), std::less_equal<>()),
          "template sides must be positive and strictly ascending");
  require(border >= 0, "border must be >= 0");
  require(tile_side > 2 * border, "tile_side too small for the border");
  require(tiles_per_side >= 1, "tiles_per_side must be >= 1");
  require(nms_iou > 0.0 && nms_iou <= 1.0, "nms_iou must be in (0, 1]");
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct RoiMeta {
  int frame_index = 0;
  Box box;
  Box track_box;
  int track_id = -1;
  bool probe = false;
  double seed_confidence = 1.0;
};

struct ProbeSpec {
  int track_id = -1;
  std::vector<double> scales;
  int pending_class = -1;
  std::map<int, double> scale_of_roi;  // probe roi id -> scale
  int reference_roi = -1;               // the same ROI without rescaling
};

/// Output of the CPU stage for one window.
struct Work {
  int window = 0;
  int first_frame = 0;
  int frames = 0;
  std::vector<PackRequest> requests;
  std::map<int, RoiMeta> meta;
  std::vector<PackedCanvas> canvases;
  std::vector<GrayImage> images;  // parallel to canvases; empty when pixels are not needed
  std::vector<int> dropped_ids;
  std::vector<ProbeSpec> probes;
  WindowReport report;
};

struct ProbeMessage {
  ProbeSpec spec;
  std::vector<ProbeResult> results;
  std::vector<Detection> references;  // everything the unscaled placement found
};

/// What the inference stage hands back to the CPU stage.
struct Commit {
  int last_frame = -1;
  std::vector<TrackSeed> seeds;
  std::vector<ProbeMessage> probes;
  std::vector<CanvasTemplate> templates;
};

struct WindowOutput {
  std::vector<FrameDetections> frames;
  WindowReport report;
};

class Runner {
 public:
  Runner(const PipelineConfig& cfg, Detector& det, const std::optional<ScaleModel>& model, const FrameSource& src,
         int frame_count, double fps, const CanvasSink& sink)
      : cfg_(cfg),
        detector_(det),
        model_(model),
        source_(src),
        frame_count_(frame_count),
        window_frames_(cfg.frames_per_window(fps)),
        needs_pixels_(det.capabilities().needs_pixels),
        sink_(sink),
        latency_(cfg.template_sides, cfg.curve, cfg.ema_alpha, cfg.noise_sigma, hash_combine({cfg.rng_seed, 0x4C41u})) {
    max_side_ = max_template_side(cfg.curve, cfg.template_sides);
    templates_ = latency_.templates();
    window_count_ = frame_count <= 0 ? 0 : (frame_count + window_frames_ - 1) / window_frames_;
    commits_.resize(static_cast<std::size_t>(window_count_));
    if (frame_count > 0) {
      // Stage B clips to the frame size and never touches the frame buffer.
      const Frame& f0 = frame(0);
      frame_w_ = f0.width();
      frame_h_ = f0.height();
    }
  }

  RunResult run() {
    RunResult result;
    const auto t0 = Clock::now();
    std::vector<WindowOutput> outputs(static_cast<std::size_t>(window_count_));
    if (!cfg_.pipelined) {
      for (int w = 0; w < window_count_; ++w) {
        Work work = stage_a(w, wait_commit(w));
        outputs[static_cast<std::size_t>(w)] = stage_b(std::move(work));
      }
    } else {
      std::thread infer([&] {
        try {
          for (int w = 0; w < window_count_; ++w) {
            auto work = pop_work();
            if (!work) return;
            outputs[static_cast<std::size_t>(w)] = stage_b(std::move(*work));
          }
        } catch (...) {
          // stage_b recorded the error for the producer
        }
      });
      try {
        for (int w = 0; w < window_count_; ++w) push_work(stage_a(w, wait_commit(w)));
      } catch (...) {
        {
          std::lock_guard lock(mu_);
          abort_ = true;
        }
        cv_.notify_all();
        infer.join();
        throw;
      }
      infer.join();
      if (b_error_) std::rethrow_exception(b_error_);
    }
    // Fold in feedback that no later window consumed.
    for (int w = std::max(0, window_count_ - 1 - cfg_.feedback_lag); w < window_count_; ++w) {
      if (commits_[static_cast<std::size_t>(w)]) apply_probes(*commits_[static_cast<std::size_t>(w)]);
    }
    result.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    for (auto& o : outputs) {
      for (auto& f : o.frames) result.detections.push_back(std::move(f));
      result.windows.push_back(std::move(o.report));
    }
    result.tuner = tuner_;
    return result;
  }

 private:
  // ---- frame buffer (stage A only) ----

  const Frame& frame(int index) {
    auto it = frames_.find(index);
    if (it == frames_.end()) it = frames_.emplace(index, source_(index)).first;
    return it->second;
  }

  void prune_frames(int keep_from) {
    frames_.erase(frames_.begin(), frames_.lower_bound(keep_from));
  }

  // ---- commits ----

  const Commit* wait_commit(int w) {
    const int c = w - 1 - cfg_.feedback_lag;
    if (c < 0) return nullptr;
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return commits_[static_cast<std::size_t>(c)].has_value() || b_error_; });
    if (b_error_) std::rethrow_exception(b_error_);
    return &*commits_[static_cast<std::size_t>(c)];
  }

  void push_work(Work w) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return queue_.size() < 2 || b_error_; });
    if (b_error_) std::rethrow_exception(b_error_);
    queue_.push_back(std::move(w));
    cv_.notify_all();
  }

  std::optional<Work> pop_work() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !queue_.empty() || abort_; });
    if (queue_.empty()) return std::nullopt;
    Work w = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return w;
  }

  void apply_probes(const Commit& commit) {
    for (const auto& msg : commit.probes) {
      TrackTuneState& st = tuner_[msg.spec.track_id];
      st.track_id = msg.spec.track_id;
      st.pending_probe_scales = msg.spec.scales;
      st.pending_class = msg.spec.pending_class;
      tuner_interpret(st, msg.results, msg.references, cfg_.intact);
    }
  }

  // ---- stage A: extraction, estimation, planning, packing ----

  std::vector<TrackSeed> propagate(std::vector<TrackSeed> seeds, int from, int to) {
    if (seeds.empty() || from >= to) return seeds;
    Pyramid prev = Pyramid::build(frame(from).pixels, cfg_.extraction.lk_levels);
    for (int f = from + 1; f <= to && !seeds.empty(); ++f) {
      Pyramid cur = Pyramid::build(frame(f).pixels, cfg_.extraction.lk_levels);
      const auto out = of_track(prev, cur, frame(f - 1).pixels, seeds, f, cfg_.extraction);
      std::vector<TrackSeed> next;
      for (const auto& r : out.rois) {
        const auto it = std::find_if(seeds.begin(), seeds.end(), [&](const auto& s) { return s.track_id == r.track_id; });
        next.push_back({r.track_id, r.track_box, it->confidence, it->consecutive_drop_count});
      }
      seeds = std::move(next);
      prev = std::move(cur);
    }
    return seeds;
  }

  ScalePrediction predict(const Roi& r) const {
    if (cfg_.scale_mode == ScaleMode::fixed || !model_) return {0, cfg_.fixed_scale};
    return predict_scale(*model_, r.features, r.box.area());
  }

  double assign(const Roi& r, const ScalePrediction& p) const {
    if (cfg_.scale_mode == ScaleMode::fixed) return cfg_.fixed_scale;
    if (r.track_id >= 0) {
      const auto it = tuner_.find(r.track_id);
      if (it != tuner_.end()) return assigned_scale(it->second, p);
    }
    return p.target_scale;
  }

  Work stage_a(int w, const Commit* commit) {
    const auto t0 = Clock::now();
    Work work;
    work.window = w;
    work.first_frame = w * window_frames_;
    work.frames = std::min(window_frames_, frame_count_ - work.first_frame);
    const int last = work.first_frame + work.frames - 1;
    WindowReport& rep = work.report;
    rep.window = w;
    rep.first_frame = work.first_frame;
    rep.frames = work.frames;
    rep.deadline_ms = cfg_.window_ms;

    if (commit) {
      apply_probes(*commit);
      templates_ = commit->templates;
      seeds_ = propagate(commit->seeds, commit->last_frame, work.first_frame - 1);
    }

    int next_id = 0;
    for (int f = work.first_frame; f <= last; ++f) {
      const Frame& cur = frame(f);
      std::vector<Roi> pd;
      if (f > 0) pd = pd_extract(cur, frame(std::max(0, f - cfg_.extraction.gap)), cfg_.extraction);
      std::vector<Roi> of;
      if (f > 0 && !seeds_.empty()) {
        if (!prev_pyramid_ || prev_pyramid_index_ != f - 1) {
          prev_pyramid_ = Pyramid::build(frame(f - 1).pixels, cfg_.extraction.lk_levels);
        }
        Pyramid cur_pyr = Pyramid::build(cur.pixels, cfg_.extraction.lk_levels);
        of = of_track(*prev_pyramid_, cur_pyr, frame(f - 1).pixels, seeds_, f, cfg_.extraction).rois;
        prev_pyramid_ = std::move(cur_pyr);
        prev_pyramid_index_ = f;
      } else {
        prev_pyramid_.reset();
      }
      std::vector<TrackSeed> next;
      for (const auto& r : of) {
        const auto it = std::find_if(seeds_.begin(), seeds_.end(), [&](const auto& s) { return s.track_id == r.track_id; });
        next.push_back({r.track_id, r.track_box, it->confidence, it->consecutive_drop_count});
      }
      seeds_ = std::move(next);
      rep.rois_extracted += static_cast<int>(pd.size() + of.size());

      int local = 0;
      for (auto& r : of) r.id = local++;
      for (auto& r : pd) r.id = local++;
      std::map<int, double> pre_scale;
      for (const auto* list : {&of, &pd})
        for (const auto& r : *list) pre_scale[r.id] = assign(r, predict(r));
      auto merged = merge_rois(std::move(pd), std::move(of), cfg_.extraction,
                               [&](const Roi& r) { return pre_scale.at(r.id); });
      rep.rois_merged += static_cast<int>(merged.size());

      for (auto& r : merged) {
        const ScalePrediction pred = predict(r);
        PackRequest req;
        req.roi_id = next_id++;
        req.frame_index = f;
        req.roi_box = r.box;
        req.scale = std::min(1.0, std::max(r.min_scale, assign(r, pred)));
        req.border = cfg_.border;
        const bool low_conf = r.source == RoiSource::OF && r.last_detection_confidence < cfg_.low_confidence;
        req.priority = f == last ? PriorityClass::ProbeOrLastFrame
                       : (r.source == RoiSource::PD || low_conf) ? PriorityClass::NewOrLowConfidence
                                                                 : PriorityClass::Regular;
        if (r.track_id >= 0) req.consecutive_drop_count = drop_counts_[r.track_id];
        work.requests.push_back(req);
        work.meta[req.roi_id] = {f, r.box, r.track_box, r.track_id, false, r.last_detection_confidence};

        if (f == last && cfg_.probing && cfg_.scale_mode == ScaleMode::predict && model_ && r.track_id >= 0 &&
            r.source == RoiSource::OF) {
          TrackTuneState& st = tuner_[r.track_id];
          st.track_id = r.track_id;
          ProbeSpec spec;
          spec.track_id = r.track_id;
          spec.scales = tuner_plan_probes(st, pred);
          spec.pending_class = st.pending_class;
          PackRequest ref = req;
          ref.roi_id = next_id++;
          ref.scale = 1.0;
          ref.priority = PriorityClass::ProbeOrLastFrame;
          ref.consecutive_drop_count = 0;
          spec.reference_roi = ref.roi_id;
          work.requests.push_back(ref);
          work.meta[ref.roi_id] = {f, r.box, r.track_box, r.track_id, true, r.last_detection_confidence};
          ++rep.probes_requested;
          for (double s : spec.scales) {
            PackRequest probe = req;
            probe.roi_id = next_id++;
            probe.scale = std::min(1.0, s);
            probe.priority = PriorityClass::ProbeOrLastFrame;
            probe.consecutive_drop_count = 0;
            spec.scale_of_roi[probe.roi_id] = s;
            work.requests.push_back(probe);
            work.meta[probe.roi_id] = {f, r.box, r.track_box, r.track_id, true, r.last_detection_confidence};
            ++rep.probes_requested;
          }
          work.probes.push_back(std::move(spec));
        }
      }
    }
    rep.requests = static_cast<int>(work.requests.size()) - rep.probes_requested;

    layout(work);

    std::set<int> dropped(work.dropped_ids.begin(), work.dropped_ids.end());
    for (const auto& req : work.requests) {
      const RoiMeta& m = work.meta.at(req.roi_id);
      if (m.probe) {
        if (!dropped.contains(req.roi_id)) ++rep.probes_packed;
        continue;
      }
      if (dropped.contains(req.roi_id)) {
        ++rep.dropped;
      } else {
        ++rep.packed;
      }
    }
    // Consecutive drops per track, judged on the track's last request this window.
    std::map<int, bool> last_state;
    for (const auto& req : work.requests) {
      const RoiMeta& m = work.meta.at(req.roi_id);
      if (m.probe || m.track_id < 0) continue;
      last_state[m.track_id] = dropped.contains(req.roi_id);
    }
    for (const auto& [track, was_dropped] : last_state) drop_counts_[track] = was_dropped ? drop_counts_[track] + 1 : 0;

    prune_frames(last + 1 - std::max(cfg_.extraction.gap, cfg_.feedback_lag * window_frames_ + 1));
    rep.cpu_ms = ms_since(t0);
    return work;
  }

  void layout(Work& work) {
    WindowReport& rep = work.report;
    const auto frame_px = [&](int i) -> const GrayImage& { return frame(i).pixels; };
    if (cfg_.layout == Layout::packed) {
      std::vector<CanvasTemplate> usable;
      for (const auto& t : templates_)
        if (t.side <= max_side_) usable.push_back(t);
      const CanvasPlan plan = plan_canvases(usable, cfg_.window_ms);
      rep.planned_latency_ms = plan.total_latency;
      order_rois(work.requests);
      PackResult packed = pack(plan, usable, work.requests);
      for (const auto& d : packed.dropped) {
        work.dropped_ids.push_back(d.roi_id);
        if (d.reason == DropReason::LargerThanTemplate) ++rep.dropped_oversize;
      }
      work.canvases = std::move(packed.canvases);
    } else if (cfg_.layout == Layout::per_roi) {
      for (auto& req : work.requests) {
        if (cfg_.tile_fit) {
          req.scale = (cfg_.tile_side - 2.0 * req.border) / std::max(req.roi_box.w, req.roi_box.h);
        }
        PackedCanvas c;
        c.id = static_cast<int>(work.canvases.size());
        c.side = cfg_.tile_fit ? cfg_.tile_side : std::max(req.width(), req.height());
        c.bin = GuillotineBin(c.side);
        const Rect used = c.bin.place(c.bin.choose(req.width(), req.height()), req.width(), req.height());
        c.placements.push_back({req.roi_id, c.id, used.x + req.border, used.y + req.border, req.scale,
                                req.content_w(), req.content_h()});
        c.occupied.push_back(used);
        work.canvases.push_back(std::move(c));
      }
    } else {
      const int per_canvas = cfg_.tiles_per_side * cfg_.tiles_per_side;
      const int inner = cfg_.tile_side - 2 * cfg_.border;
      for (std::size_t i = 0; i < work.requests.size(); ++i) {
        auto& req = work.requests[i];
        req.scale = std::min(1.0, inner / std::max(req.roi_box.w, req.roi_box.h));
        const int slot = static_cast<int>(i) % per_canvas;
        if (slot == 0) {
          PackedCanvas c;
          c.id = static_cast<int>(work.canvases.size());
          c.side = cfg_.tile_side * cfg_.tiles_per_side;
          work.canvases.push_back(std::move(c));
        }
        PackedCanvas& c = work.canvases.back();
        const int tx = (slot % cfg_.tiles_per_side) * cfg_.tile_side;
        const int ty = (slot / cfg_.tiles_per_side) * cfg_.tile_side;
        c.placements.push_back({req.roi_id, c.id, tx + cfg_.border, ty + cfg_.border, req.scale, req.content_w(),
                                req.content_h()});
        c.occupied.push_back({tx, ty, cfg_.tile_side, cfg_.tile_side});
      }
    }
    if (needs_pixels_ || sink_) {
      for (const auto& c : work.canvases) {
        work.images.push_back(c.placements.empty() ? GrayImage()
                                                   : rasterize(c, work.requests, frame_px, cfg_.canvas_fill));
      }
    }
  }

  // ---- stage B: inference, reconstruction, feedback ----

  WindowOutput stage_b(Work work) {
    try {
      return stage_b_impl(std::move(work));
    } catch (...) {
      {
        std::lock_guard lock(mu_);
        b_error_ = std::current_exception();
      }
      cv_.notify_all();
      throw;
    }
  }

  WindowOutput stage_b_impl(Work work) {
    WindowOutput out;
    WindowReport& rep = work.report;
    const int last = work.first_frame + work.frames - 1;

    std::vector<CanvasInference> regular;
    std::map<int, std::vector<Detection>> probe_dets;  // probe roi id -> frame-space detections
    std::set<int> failed_rois;
    for (std::size_t ci = 0; ci < work.canvases.size(); ++ci) {
      const PackedCanvas& canvas = work.canvases[ci];
      if (canvas.placements.empty()) continue;  // nothing to infer
      const GrayImage* img = needs_pixels_ ? &work.images[ci] : nullptr;
      const auto t0 = Clock::now();
      CanvasInference inf = run_packed_inference(canvas, img, work.requests, detector_);
      const double measured = ms_since(t0);
      if (sink_) sink_(work.window, canvas, work.images[ci]);

      double latency = latency_.simulate(static_cast<double>(canvas.side) * canvas.side);
      if (cfg_.clock == ClockMode::wall) {
        if (cfg_.emulate_latency && latency > measured) {
          std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(latency - measured));
        }
        latency = cfg_.emulate_latency ? std::max(latency, measured) : measured;
      }
      if (cfg_.layout == Layout::packed) latency_.update(canvas.side, latency);

      rep.canvases.push_back({canvas.side, static_cast<int>(canvas.placements.size()), canvas.fillup_ratio(), latency});
      rep.inference_ms += latency;
      rep.pixels += static_cast<double>(canvas.side) * canvas.side;
      rep.discarded += inf.discarded;
      if (inf.failed) {
        ++rep.failed_canvases;
        for (const auto& p : canvas.placements) failed_rois.insert(p.roi_id);
        continue;
      }
      for (std::size_t i = 0; i < canvas.placements.size(); ++i) {
        const Placement& p = canvas.placements[i];
        const RoiMeta& m = work.meta.at(p.roi_id);
        if (!m.probe) continue;
        auto& dst = probe_dets[p.roi_id];
        for (Detection d : inf.per_placement[i]) {
          const Box inside = intersect(d.box, p.placed_rect());
          if (!inside.valid()) continue;
          d.box = canvas_to_frame(inside, p, m.box);
          d.space = CoordSpace::frame;
          dst.push_back(d);
        }
        inf.per_placement[i].clear();
      }
      regular.push_back(std::move(inf));
    }

    std::map<int, RoiRef> refs;
    for (const auto& [id, m] : work.meta) refs[id] = {m.frame_index, m.box, m.track_id};
    Reconstruction rec = reconstruct(regular, work.canvases, refs, frame_w_, frame_h_, cfg_.nms_iou);

    // Real detections feed the per-track history used for interpolation.
    for (const auto& [f, dets] : rec.by_frame) {
      for (const auto& d : dets) {
        if (d.track_id < 0) continue;
        auto& h = history_[d.track_id];
        const auto it = h.find(f);
        if (it == h.end() || d.confidence > it->second.confidence) h[f] = d;
      }
    }

    // Dropped or failed ROIs of known tracks are interpolated.
    std::set<int> missing(work.dropped_ids.begin(), work.dropped_ids.end());
    missing.insert(failed_rois.begin(), failed_rois.end());
    for (int id : missing) {
      const RoiMeta& m = work.meta.at(id);
      if (m.probe || m.track_id < 0) continue;
      auto& dets = rec.by_frame[m.frame_index];
      const bool has_real = std::any_of(dets.begin(), dets.end(), [&](const Detection& d) {
        return d.track_id == m.track_id;
      });
      if (has_real) continue;
      const auto h = history_.find(m.track_id);
      if (h == history_.end()) continue;
      auto interp = interpolate_dropped(h->second, m.frame_index, window_frames_, cfg_.interpolation_discount);
      if (!interp) continue;
      interp->track_id = m.track_id;
      dets.push_back(*interp);
      ++rep.interpolated;
    }

    // Last-frame detections become next window's track seeds.
    Commit commit;
    commit.last_frame = last;
    // A track keeps the detection that overlaps its propagated box best; other
    // objects sharing the ROI start new tracks. Going by confidence instead lets
    // the id, and its tuned scale, hop to a neighbour.
    std::map<int, Box> track_box;
    for (const auto& [id, m] : work.meta)
      if (!m.probe && m.track_id >= 0 && m.frame_index == last) track_box[m.track_id] = m.track_box;
    const auto closer = [&](const Detection& a, const Detection& b, const Box& tb) {
      const double ia = iou(a.box, tb), ib = iou(b.box, tb);
      return ia != ib ? ia > ib : a.confidence > b.confidence;
    };
    std::map<int, Detection> reference;
    auto& last_dets = rec.by_frame[last];
    std::stable_sort(last_dets.begin(), last_dets.end(),
                     [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    std::map<int, std::size_t> keeper;
    for (std::size_t i = 0; i < last_dets.size(); ++i) {
      const Detection& d = last_dets[i];
      if (d.interpolated || d.track_id < 0) continue;
      const auto [it, fresh] = keeper.try_emplace(d.track_id, i);
      const auto tb = track_box.find(d.track_id);
      if (!fresh && tb != track_box.end() && closer(d, last_dets[it->second], tb->second)) it->second = i;
    }
    for (std::size_t i = 0; i < last_dets.size(); ++i) {
      Detection& d = last_dets[i];
      if (d.interpolated) continue;
      if (d.track_id < 0 || keeper.at(d.track_id) != i) d.track_id = next_track_id_++;
      reference[d.track_id] = d;
    }
    // Unscaled reference placements anchor the tuner and keep tracks alive
    // when the regular placement missed.
    std::map<int, Detection> unscaled;
    for (const auto& spec : work.probes) {
      const auto it = probe_dets.find(spec.reference_roi);
      if (it == probe_dets.end() || it->second.empty()) continue;
      const Box& tb = work.meta.at(spec.reference_roi).track_box;
      unscaled[spec.track_id] = *std::min_element(it->second.begin(), it->second.end(),
                                                   [&](const Detection& a, const Detection& b) {
                                                     return closer(a, b, tb);
                                                   });
    }
    for (const auto& [track, d] : reference) commit.seeds.push_back({track, d.box, d.confidence, 0});
    for (const auto& [track, d] : unscaled) {
      if (!reference.contains(track)) commit.seeds.push_back({track, d.box, d.confidence, 0});
    }
    for (int id : missing) {
      const RoiMeta& m = work.meta.at(id);
      if (m.probe || m.track_id < 0 || m.frame_index != last || reference.contains(m.track_id)) continue;
      if (std::any_of(commit.seeds.begin(), commit.seeds.end(), [&](const auto& s) { return s.track_id == m.track_id; }))
        continue;
      commit.seeds.push_back({m.track_id, m.track_box, m.seed_confidence, 0});
    }
    std::sort(commit.seeds.begin(), commit.seeds.end(),
              [](const TrackSeed& a, const TrackSeed& b) { return a.track_id < b.track_id; });

    for (const auto& spec : work.probes) {
      const auto ref = unscaled.find(spec.track_id);
      if (ref == unscaled.end()) continue;
      ProbeMessage msg{spec, {}, probe_dets.at(spec.reference_roi)};
      for (const auto& [roi_id, s] : spec.scale_of_roi) {
        const auto it = probe_dets.find(roi_id);
        if (it == probe_dets.end()) continue;  // dropped by the packer or failed
        msg.results.push_back({s, it->second});
      }
      commit.probes.push_back(std::move(msg));
    }
    commit.templates = latency_.templates();

    for (int f = work.first_frame; f <= last; ++f) {
      FrameDetections fd;
      fd.frame = f;
      if (const auto it = rec.by_frame.find(f); it != rec.by_frame.end()) fd.detections = std::move(it->second);
      out.frames.push_back(std::move(fd));
    }
    for (auto& [track, h] : history_) h.erase(h.begin(), h.lower_bound(work.first_frame - 2 * window_frames_));

    {
      std::lock_guard lock(mu_);
      commits_[static_cast<std::size_t>(work.window)] = std::move(commit);
    }
    cv_.notify_all();
    out.report = std::move(work.report);
    return out;
  }

  const PipelineConfig& cfg_;
  Detector& detector_;
  const std::optional<ScaleModel>& model_;
  const FrameSource& source_;
  int frame_count_;
  int window_frames_;
  int window_count_ = 0;
  bool needs_pixels_;
  CanvasSink sink_;

  // stage A state
  std::map<int, Frame> frames_;
  std::optional<Pyramid> prev_pyramid_;
  int prev_pyramid_index_ = -1;
  std::vector<TrackSeed> seeds_;
  std::map<int, int> drop_counts_;
  std::map<int, TrackTuneState> tuner_;
  std::vector<CanvasTemplate> templates_;
  int max_side_ = 0;

  // stage B state
  LatencyModel latency_;
  std::map<int, TrackHistory> history_;
  int next_track_id_ = 1;
  int frame_w_ = 0;
  int frame_h_ = 0;

  // hand-off
  std::vector<std::optional<Commit>> commits_;
  std::deque<Work> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::exception_ptr b_error_;
  bool abort_ = false;
};

}  // namespace

Pipeline::Pipeline(PipelineConfig config, Detector& detector, std::optional<ScaleModel> model)
    : config_(std::move(config)), detector_(detector), model_(std::move(model)) {
  config_.validate();
  if (config_.scale_mode == ScaleMode::predict && !model_) {
    throw std::invalid_argument("scale mode 'predict' needs a trained model");
  }
}

RunResult Pipeline::run(const FrameSource& frames, int frame_count, double fps) {
  if (!(fps > 0.0)) throw std::invalid_argument("fps must be positive");
  Runner runner(config_, detector_, model_, frames, frame_count, fps, sink_);
  return runner.run();
}

// ---------------------------------------------------------------------------
// Metrics

double compute_ap(std::span<const FrameDetections> detections, std::span<const GroundTruthRecord> truth,
                  double iou_threshold, int class_id) {
  std::map<int, std::vector<Box>> gt;
  std::size_t n_truth = 0;
  for (const auto& g : truth) {
    if (g.class_id != class_id) continue;
    gt[g.frame_index].push_back(g.box);
    ++n_truth;
  }
  struct Cand {
    int frame;
    const Detection* det;
  };
  std::vector<Cand> cands;
  for (const auto& fd : detections)
    for (const auto& d : fd.detections)
      if (d.class_id == class_id) cands.push_back({fd.frame, &d});
  if (n_truth == 0) return cands.empty() ? 1.0 : 0.0;
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand& a, const Cand& b) { return a.det->confidence > b.det->confidence; });

  std::map<int, std::vector<bool>> used;
  for (const auto& [f, boxes] : gt) used[f].assign(boxes.size(), false);
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const auto& c : cands) {
    int best = -1;
    double best_iou = iou_threshold;
    if (const auto it = gt.find(c.frame); it != gt.end()) {
      for (std::size_t i = 0; i < it->second.size(); ++i) {
        if (used[c.frame][i]) continue;
        const double v = iou(c.det->box, it->second[i]);
        if (v >= best_iou && (best < 0 || v > best_iou)) {
          best = static_cast<int>(i);
          best_iou = v;
        }
      }
    }
    if (best >= 0) {
      used[c.frame][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_truth));
  }
  // Precision envelope, integrated over recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

double compute_throughput(std::span<const WindowReport> windows, ClockMode mode, double wall_seconds) {
  double frames = 0.0;
  double ms = 0.0;
  for (const auto& w : windows) {
    frames += w.frames;
    ms += w.inference_ms;
  }
  const double seconds = mode == ClockMode::wall ? wall_seconds : ms / 1000.0;
  if (!(seconds > 0.0)) throw std::invalid_argument("throughput undefined: zero elapsed time");
  return frames / seconds;
}

double total_pixels(std::span<const WindowReport> windows) {
  double p = 0.0;
  for (const auto& w : windows) p += w.pixels;
  return p;
}

// ---------------------------------------------------------------------------
// Baselines

const char* baseline_name(BaselineMode mode) {
  switch (mode) {
    case BaselineMode::frame_wise: return "frame_wise";
    case BaselineMode::roi_wise: return "roi_wise";
    case BaselineMode::emulated_batch: return "emulated_batch";
  }
  return "?";
}

namespace {

RunResult run_frame_wise(const PipelineConfig& cfg, Detector& detector, const FrameSource& frames, int frame_count,
                         double fps, int side) {
  RunResult result;
  LatencyModel latency(cfg.template_sides, cfg.curve, cfg.ema_alpha, cfg.noise_sigma,
                       hash_combine({cfg.rng_seed, 0x4C41u}));
  const bool pixels = detector.capabilities().needs_pixels;
  const int per_window = cfg.frames_per_window(fps);
  const auto t0 = Clock::now();
  for (int f = 0; f < frame_count; ++f) {
    if (f % per_window == 0) {
      WindowReport rep;
      rep.window = f / per_window;
      rep.first_frame = f;
      rep.deadline_ms = cfg.window_ms;
      result.windows.push_back(rep);
    }
    WindowReport& rep = result.windows.back();
    const Frame frame = frames(f);
    const Box roi{0.0, 0.0, static_cast<double>(frame.width()), static_cast<double>(frame.height())};
    PlacedRoi pr;
    pr.frame_index = f;
    pr.roi_box = roi;
    Placement& p = pr.placement;
    p.roi_id = 0;
    p.canvas_id = 0;
    p.scale = static_cast<double>(side) / std::max(frame.width(), frame.height());
    p.placed_w = std::min(side, scaled_extent(roi.w, p.scale));
    p.placed_h = std::min(side, scaled_extent(roi.h, p.scale));
    p.pos_x = (side - p.placed_w) / 2;
    p.pos_y = (side - p.placed_h) / 2;
    GrayImage canvas;
    CanvasView view{side, nullptr, std::span<const PlacedRoi>(&pr, 1)};
    if (pixels) {
      canvas = GrayImage::Constant(side, side, cfg.canvas_fill);
      blit_roi(canvas, frame.pixels, roi, p);
      view.image = &canvas;
    }
    std::vector<Detection> mapped;
    for (Detection d : detector.detect(view)) {
      if (!p.placed_rect().contains_point(d.box.center_x(), d.box.center_y())) continue;
      const Box inside = intersect(d.box, p.placed_rect());
      if (!inside.valid()) continue;
      d.box = clip_to(canvas_to_frame(inside, p, roi), frame.width(), frame.height());
      if (!d.box.valid()) continue;
      d.space = CoordSpace::frame;
      mapped.push_back(d);
    }
    result.detections.push_back({f, nms(mapped, cfg.nms_iou)});
    const double ms = latency.simulate(static_cast<double>(side) * side);
    ++rep.frames;
    rep.inference_ms += ms;
    rep.pixels += static_cast<double>(side) * side;
    rep.canvases.push_back({side, 1, static_cast<double>(p.placed_w) * p.placed_h / (side * side), ms});
  }
  result.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return result;
}

}  // namespace

BaselineResult run_baseline(BaselineMode mode, const PipelineConfig& config, Detector& detector,
                            const FrameSource& frames, int frame_count, double fps,
                            std::span<const GroundTruthRecord> truth, const BaselineOptions& opts) {
  BaselineResult out;
  out.mode = mode;
  if (mode == BaselineMode::frame_wise) {
    out.run = run_frame_wise(config, detector, frames, frame_count, fps, opts.frame_side);
  } else {
    PipelineConfig cfg = config;
    cfg.scale_mode = ScaleMode::fixed;
    cfg.fixed_scale = 1.0;
    cfg.probing = false;
    if (mode == BaselineMode::roi_wise) {
      cfg.layout = Layout::per_roi;
      cfg.tile_fit = !opts.roi_full_scale;
      if (opts.roi_full_scale) cfg.border = 0;
    } else {
      cfg.layout = Layout::tiles;
    }
    out.run = Pipeline(cfg, detector).run(frames, frame_count, fps);
  }
  out.ap = compute_ap(out.run.detections, truth);
  out.fps = compute_throughput(out.run.windows, config.clock, out.run.wall_seconds);
  out.pixels = total_pixels(out.run.windows);
  return out;
}

// ---------------------------------------------------------------------------
// Training ROIs

std::vector<Roi> collect_training_rois(const FrameSource& frames, int frame_count, Detector& detector,
                                       const ExtractionParams& params, const CollectOptions& opts) {
  if (opts.reseed_interval <= 0 || opts.sample_interval <= 0) throw std::invalid_argument("intervals must be positive");
  std::vector<Roi> out;
  std::vector<TrackSeed> seeds;
  std::deque<Frame> recent;  // last `gap` + 1 frames
  int next_track = 1;
  for (int f = 0; f < frame_count; ++f) {
    recent.push_back(frames(f));
    if (static_cast<int>(recent.size()) > params.gap + 1) recent.pop_front();
    const Frame& cur = recent.back();

    std::vector<Roi> of;
    if (f > 0 && !seeds.empty()) {
      const Frame& prev = recent[recent.size() - 2];
      of = of_track(prev, cur, seeds, params).rois;
      std::vector<TrackSeed> next;
      for (const auto& r : of) next.push_back({r.track_id, r.track_box, r.last_detection_confidence, 0});
      seeds = std::move(next);
    }
    if (f > 0 && f % opts.sample_interval == 0) {
      auto pd = pd_extract(cur, recent.front(), params);
      int local = 0;
      for (auto& r : of) r.id = local++;
      for (auto& r : pd) r.id = local++;
      for (auto& r : merge_rois(std::move(pd), std::move(of), params)) {
        r.id = static_cast<int>(out.size());
        out.push_back(r);
      }
    }
    if (f % opts.reseed_interval == 0) {
      const Box roi{0.0, 0.0, static_cast<double>(cur.width()), static_cast<double>(cur.height())};
      PlacedRoi pr;
      pr.frame_index = f;
      pr.roi_box = roi;
      pr.placement = {0, 0, 0, 0, 1.0, cur.width(), cur.height()};
      const int side = std::max(cur.width(), cur.height());
      GrayImage canvas;
      CanvasView view{side, nullptr, std::span<const PlacedRoi>(&pr, 1)};
      if (detector.capabilities().needs_pixels) {
        canvas = GrayImage::Constant(side, side, kCanvasFill);
        blit_roi(canvas, cur.pixels, roi, pr.placement);
        view.image = &canvas;
      }
      seeds.clear();
      for (const auto& d : nms(detector.detect(view), 0.5)) {
        const Box b = clip_to(d.box, cur.width(), cur.height());
        if (b.valid()) seeds.push_back({next_track++, b, d.confidence, 0});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

std::string report_json(const RunResult& result, ClockMode mode, std::optional<double> ap) {
  nlohmann::json windows = nlohmann::json::array();
  int frames = 0, packed = 0, dropped = 0, probes = 0, interpolated = 0, canvases = 0;
  std::vector<double> fill;
  nlohmann::json cpu_ms = nlohmann::json::array();
  for (const auto& w : result.windows) {
    nlohmann::json cs = nlohmann::json::array();
    std::map<int, int> by_side;
    for (const auto& c : w.canvases) {
      cs.push_back({{"side", c.side}, {"placements", c.placements}, {"fillup", c.fillup}, {"latency_ms", c.latency_ms}});
      ++by_side[c.side];
      fill.push_back(c.fillup);
    }
    nlohmann::json sides = nlohmann::json::object();
    for (const auto& [s, n] : by_side) sides[std::to_string(s)] = n;
    windows.push_back({{"window", w.window},
                       {"first_frame", w.first_frame},
                       {"frames", w.frames},
                       {"rois_extracted", w.rois_extracted},
                       {"rois_merged", w.rois_merged},
                       {"requests", w.requests},
                       {"packed", w.packed},
                       {"dropped", w.dropped},
                       {"dropped_oversize", w.dropped_oversize},
                       {"probes_requested", w.probes_requested},
                       {"probes_packed", w.probes_packed},
                       {"interpolated", w.interpolated},
                       {"discarded", w.discarded},
                       {"failed_canvases", w.failed_canvases},
                       {"planned_latency_ms", w.planned_latency_ms},
                       {"deadline_ms", w.deadline_ms},
                       {"inference_ms", w.inference_ms},
                       {"pixels", w.pixels},
                       {"canvases_by_side", sides},
                       {"canvases", cs}});
    frames += w.frames;
    packed += w.packed;
    dropped += w.dropped;
    probes += w.probes_requested;
    interpolated += w.interpolated;
    canvases += static_cast<int>(w.canvases.size());
    cpu_ms.push_back(w.cpu_ms);
  }
  std::sort(fill.begin(), fill.end());
  nlohmann::json agg = {{"frames", frames},
                        {"packed", packed},
                        {"dropped", dropped},
                        {"probes", probes},
                        {"interpolated", interpolated},
                        {"canvases", canvases},
                        {"pixels", total_pixels(result.windows)},
                        {"clock", mode == ClockMode::wall ? "wall" : "simulated"}};
  if (!fill.empty()) agg["median_fillup"] = fill[fill.size() / 2];
  if (!result.windows.empty() && frames > 0) {
    double ms = 0.0;
    for (const auto& w : result.windows) ms += w.inference_ms;
    if (ms > 0.0 && mode == ClockMode::simulated)
      agg["simulated_fps"] = compute_throughput(result.windows, ClockMode::simulated);
  }
  if (ap) agg["ap50"] = *ap;
  // Everything measured on the host clock lives here and nowhere else.
  nlohmann::json timing = {{"wall_seconds", result.wall_seconds}, {"cpu_ms", cpu_ms}};
  if (mode == ClockMode::wall && result.wall_seconds > 0.0) timing["wall_fps"] = frames / result.wall_seconds;
  return nlohmann::json{{"aggregate", agg}, {"windows", windows}, {"timing", timing}}.dump(2);
}

std::string report_csv(const RunResult& result) {
  std::ostringstream out;
  out << "window,first_frame,frames,rois_extracted,rois_merged,requests,packed,dropped,probes_requested,"
         "probes_packed,interpolated,canvases,planned_latency_ms,inference_ms,pixels\n";
  for (const auto& w : result.windows) {
    out << w.window << ',' << w.first_frame << ',' << w.frames << ',' << w.rois_extracted << ',' << w.rois_merged
        << ',' << w.requests << ',' << w.packed << ',' << w.dropped << ',' << w.probes_requested << ','
        << w.probes_packed << ',' << w.interpolated << ',' << w.canvases.size() << ',' << w.planned_latency_ms << ','
        << w.inference_ms << ',' << w.pixels << '\n';
  }
  return out.str();
}

}  // namespace cpi
