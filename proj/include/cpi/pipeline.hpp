#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cpi/canvas_planning.hpp"
#include "cpi/detector.hpp"
#include "cpi/inference.hpp"
#include "cpi/media_io.hpp"
#include "cpi/roi_extraction.hpp"
#include "cpi/roi_packing.hpp"
#include "cpi/scale_estimation.hpp"

namespace cpi {

enum class ClockMode { simulated, wall };
enum class ScaleMode { predict, fixed };

/// How ROIs reach the detector.
enum class Layout {
  packed,   // planned canvases, Guillotine packing
  per_roi,  // one inference per ROI
  tiles     // fixed square tiles, a fixed number per canvas
};

struct PipelineConfig {
  double window_ms = 2000.0;
  ClockMode clock = ClockMode::simulated;
  bool emulate_latency = false;  // wall clock: sleep for the simulated inference time
  bool pipelined = false;
  int feedback_lag = 1;

  ExtractionParams extraction;
  IntactCriterion intact;

  ScaleMode scale_mode = ScaleMode::predict;
  double fixed_scale = 1.0;
  bool probing = true;

  std::vector<int> template_sides = kDefaultTemplateSides;
  PowerLawCurve curve = default_latency_curve();
  double ema_alpha = 0.3;
  double noise_sigma = 0.05;

  int border = 2;
  std::uint8_t canvas_fill = kCanvasFill;
  double low_confidence = 0.5;
  double nms_iou = 0.5;
  double interpolation_discount = 0.9;

  Layout layout = Layout::packed;
  int tile_side = 128;          // per_roi with tile_fit, and tiles
  bool tile_fit = false;        // per_roi: rescale each ROI to fit tile_side
  int tiles_per_side = 10;      // tiles layout: tiles_per_side^2 tiles per canvas

  std::uint64_t rng_seed = 1;

  int frames_per_window(double fps) const;
  void validate() const;
};

struct CanvasRecord {
  int side = 0;
  int placements = 0;
  double fillup = 0.0;
  double latency_ms = 0.0;
};

struct WindowReport {
  int window = 0;
  int first_frame = 0;
  int frames = 0;
  int rois_extracted = 0;
  int rois_merged = 0;
  int requests = 0;
  int packed = 0;
  int dropped = 0;
  int dropped_oversize = 0;
  int probes_requested = 0;
  int probes_packed = 0;
  int interpolated = 0;
  int discarded = 0;
  int failed_canvases = 0;
  double planned_latency_ms = 0.0;
  double deadline_ms = 0.0;
  std::vector<CanvasRecord> canvases;
  double inference_ms = 0.0;
  double pixels = 0.0;
  double cpu_ms = 0.0;
};

struct RunResult {
  std::vector<FrameDetections> detections;  // one entry per frame, ascending
  std::vector<WindowReport> windows;
  double wall_seconds = 0.0;
  std::map<int, TrackTuneState> tuner;
};

using FrameSource = std::function<Frame(int index)>;

/// Receives every non-empty canvas after inference, on the inference stage's
/// thread. Setting one forces rasterization even for detectors that skip pixels.
using CanvasSink = std::function<void(int window, const PackedCanvas& canvas, const GrayImage& image)>;

/// Runs scheduling windows over `frame_count` frames.
class Pipeline {
 public:
  Pipeline(PipelineConfig config, Detector& detector, std::optional<ScaleModel> model = std::nullopt);

  RunResult run(const FrameSource& frames, int frame_count, double fps);

  const PipelineConfig& config() const { return config_; }
  void set_canvas_sink(CanvasSink sink) { sink_ = std::move(sink); }

 private:
  PipelineConfig config_;
  Detector& detector_;
  std::optional<ScaleModel> model_;
  CanvasSink sink_;
};

// ---- metrics ----

/// AP@iou over all frames for one class; all-point interpolated.
double compute_ap(std::span<const FrameDetections> detections, std::span<const GroundTruthRecord> truth,
                  double iou_threshold = 0.5, int class_id = 0);

double compute_throughput(std::span<const WindowReport> windows, ClockMode mode, double wall_seconds = 0.0);

double total_pixels(std::span<const WindowReport> windows);

enum class BaselineMode { frame_wise, roi_wise, emulated_batch };

struct BaselineResult {
  BaselineMode mode = BaselineMode::frame_wise;
  double ap = 0.0;
  double fps = 0.0;
  double pixels = 0.0;
  RunResult run;
};

struct BaselineOptions {
  int frame_side = 640;
  bool roi_full_scale = false;  // roi_wise at native size instead of tile_side fit
};

BaselineResult run_baseline(BaselineMode mode, const PipelineConfig& config, Detector& detector,
                            const FrameSource& frames, int frame_count, double fps,
                            std::span<const GroundTruthRecord> truth, const BaselineOptions& opts = {});

const char* baseline_name(BaselineMode mode);

// ---- training data ----

struct CollectOptions {
  int reseed_interval = 60;
  int sample_interval = 30;
};

/// Extract PD and OF ROIs over a sequence for labeling. OF tracks are seeded
/// from full-frame detections every `reseed_interval` frames; merged ROIs are
/// kept every `sample_interval` frames.
std::vector<Roi> collect_training_rois(const FrameSource& frames, int frame_count, Detector& detector,
                                       const ExtractionParams& params, const CollectOptions& opts = {});

// ---- reports ----

std::string report_json(const RunResult& result, ClockMode mode, std::optional<double> ap);
std::string report_csv(const RunResult& result);

}  // namespace cpi
