#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpi/detector.hpp"
#include "cpi/roi_extraction.hpp"

namespace cpi {

class ScaleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Acceptance rule shared by labeling and the reactive tuner.
struct IntactCriterion {
  double min_confidence = 0.3;
  double min_iou = 0.75;
};

/// True iff the detection best matching `reference` passes the criterion.
bool is_intact(std::span<const Detection> dets, const Detection& reference, const IntactCriterion& crit);

/// Every reference detection survives. An empty reference set is never intact.
bool is_intact(std::span<const Detection> dets, std::span<const Detection> references, const IntactCriterion& crit);

// ---- offline labeling ----

struct LabelParams {
  int sweep_steps = 20;  // scales k / sweep_steps for k = sweep_steps down to min_step
  int min_step = 2;      // 0.10 with the default 20 steps
  double margin = 0.1;
  int border = 2;
  IntactCriterion intact;
};

struct SafeAreaLabel {
  int roi_id = -1;
  int frame_index = 0;
  RoiSource source = RoiSource::PD;
  Box roi_box;
  ExtractionFeatures features;
  double true_safe_scale = 1.0;
  double labeled_scale = 1.0;
  double labeled_area = 0.0;
  int class_index = -1;
};

struct LabelingResult {
  std::vector<SafeAreaLabel> labels;
  int excluded_no_reference = 0;
};

/// Supplies frame pixels for detectors that read them.
using FrameProvider = std::function<const GrayImage&(int frame_index)>;

/// Run the detector on one ROI alone at `scale`; detections come back in
/// frame coordinates.
std::vector<Detection> detect_roi(Detector& detector, const Roi& roi, double scale, int border = 2,
                                  const FrameProvider& frames = {});

/// Sweep each ROI from scale 1.0 down in steps of 1/sweep_steps; the true safe
/// scale is the smallest scale at which it and every larger swept scale are
/// intact against the scale-1.0 reference detection.
LabelingResult label_safe_areas(std::span<const Roi> rois, Detector& detector, const LabelParams& params = {},
                                const FrameProvider& frames = {});

/// Nearest-rank quantile boundaries splitting `areas` into `classes` levels.
std::vector<double> compute_class_boundaries(std::span<const double> areas, int classes);

int class_of_area(double area, std::span<const double> boundaries);

/// Nearest-rank percentile, p in (0, 1].
double nearest_rank(std::vector<double> values, double p);

// ---- decision tree ----

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int leaf_class = 0;

  bool is_leaf() const { return feature < 0; }
};

struct TreeParams {
  int max_depth = 8;
  int min_samples_leaf = 5;
  int min_samples = 10;
  /// 0 labels leaves by majority. Otherwise a leaf takes the smallest class
  /// that covers at least this fraction of its samples (a conservative bias
  /// towards larger safe areas).
  double leaf_coverage = 0.9;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  FeatureVector importances = FeatureVector::Zero();

  int predict(const FeatureVector& x) const;
  int depth() const;
};

/// CART with Gini impurity and exhaustive midpoint thresholds.
DecisionTree train_decision_tree(std::span<const FeatureVector> features, std::span<const int> labels, int classes,
                                 const TreeParams& params = {});

struct ScaleModel {
  DecisionTree tree;
  std::vector<double> class_boundaries;
  std::vector<double> class_target_areas;
  double margin = 0.1;

  int classes() const { return static_cast<int>(class_target_areas.size()); }
  void validate() const;
};

struct ScalePrediction {
  int class_index = 0;
  double target_scale = 1.0;
};

/// Label classes from labeled areas, fit the tree and attach class targets
/// (upper class boundary; 95th percentile of labeled areas for the top class).
ScaleModel train_tree(std::span<const SafeAreaLabel> labels, int classes = 5, const TreeParams& params = {},
                      double margin = 0.1);

ScalePrediction predict_scale(const ScaleModel& model, const ExtractionFeatures& feats, double roi_area);

std::string model_to_json(const ScaleModel& model);
ScaleModel model_from_json(const std::string& text);
void save_model(const std::filesystem::path& path, const ScaleModel& model);
ScaleModel load_model(const std::filesystem::path& path);

void write_labels_csv(const std::filesystem::path& path, std::span<const SafeAreaLabel> labels);
std::vector<SafeAreaLabel> read_labels_csv(const std::filesystem::path& path);

// ---- reactive tuner ----

enum class TuneMode { Unprobed, Tuned, Invalidated };

struct TrackTuneState {
  int track_id = -1;
  TuneMode mode = TuneMode::Unprobed;
  int predicted_class_at_tune = -1;
  double tuned_scale = 1.0;
  std::vector<double> pending_probe_scales;
  int pending_class = -1;
};

inline constexpr double kProbeFactors[5] = {1.0, 0.9, 0.8, 0.7, 0.6};

std::vector<double> tuner_plan_probes(TrackTuneState& state, const ScalePrediction& predicted);

struct ProbeResult {
  double scale = 1.0;
  std::vector<Detection> detections;
};

/// A probe succeeds when every reference detection survives it.
void tuner_interpret(TrackTuneState& state, std::span<const ProbeResult> results,
                     std::span<const Detection> references, const IntactCriterion& crit = {});
void tuner_interpret(TrackTuneState& state, std::span<const ProbeResult> results, const Detection& reference,
                     const IntactCriterion& crit = {});

/// Scale to use for a tracked ROI: the tuned scale while the predicted class
/// is unchanged since tuning, the proactive prediction otherwise.
double assigned_scale(const TrackTuneState& state, const ScalePrediction& predicted);

}  // namespace cpi
