#include "cpi/scale_estimation.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "cpi/roi_packing.hpp"

namespace cpi {

bool is_intact(std::span<const Detection> dets, const Detection& reference, const IntactCriterion& crit) {
  const Detection* best = nullptr;
  double best_iou = -1.0;
  for (const auto& d : dets) {
    const double v = iou(d.box, reference.box);
    if (v > best_iou || (v == best_iou && best && d.confidence > best->confidence)) {
      best = &d;
      best_iou = v;
    }
  }
  return best && best->confidence >= crit.min_confidence && best_iou >= crit.min_iou;
}

bool is_intact(std::span<const Detection> dets, std::span<const Detection> references, const IntactCriterion& crit) {
  return !references.empty() &&
         std::all_of(references.begin(), references.end(), [&](const Detection& r) { return is_intact(dets, r, crit); });
}

// ---------------------------------------------------------------------------
// Labeling

std::vector<Detection> detect_roi(Detector& detector, const Roi& roi, double scale, int border,
                                     const FrameProvider& frames) {
  PlacedRoi pr;
  pr.frame_index = roi.frame_index;
  pr.roi_box = roi.box;
  pr.placement.roi_id = roi.id;
  pr.placement.canvas_id = 0;
  pr.placement.scale = scale;
  pr.placement.placed_w = scaled_extent(roi.box.w, scale);
  pr.placement.placed_h = scaled_extent(roi.box.h, scale);
  pr.placement.pos_x = border;
  pr.placement.pos_y = border;
  const int side = std::max(pr.placement.placed_w, pr.placement.placed_h) + 2 * border;

  GrayImage canvas;
  CanvasView view;
  view.side = side;
  view.placements = std::span<const PlacedRoi>(&pr, 1);
  if (detector.capabilities().needs_pixels) {
    if (!frames) throw ScaleError("detector reads pixels but no frame provider was given");
    canvas = GrayImage::Constant(side, side, kCanvasFill);
    blit_roi(canvas, frames(roi.frame_index), roi.box, pr.placement);
    view.image = &canvas;
  }
  auto dets = detector.detect(view);
  // Map back to frame coordinates so every scale is compared in one space.
  std::vector<Detection> mapped;
  const Box placed = pr.placement.placed_rect();
  for (auto& d : dets) {
    if (!placed.contains_point(d.box.center_x(), d.box.center_y())) continue;
    const Box clipped = intersect(d.box, placed);
    if (!clipped.valid()) continue;
    d.box = canvas_to_frame(clipped, pr.placement, roi.box);
    d.space = CoordSpace::frame;
    mapped.push_back(d);
  }
  return mapped;
}

LabelingResult label_safe_areas(std::span<const Roi> rois, Detector& detector, const LabelParams& params,
                                const FrameProvider& frames) {
  LabelingResult result;
  for (const Roi& roi : rois) {
    const auto ref_dets = detect_roi(detector, roi, 1.0, params.border, frames);
    if (ref_dets.empty()) {
      ++result.excluded_no_reference;
      continue;
    }
    double safe = 1.0;
    for (int k = params.sweep_steps - 1; k >= params.min_step; --k) {
      const double s = static_cast<double>(k) / params.sweep_steps;
      const auto dets = detect_roi(detector, roi, s, params.border, frames);
      if (!is_intact(dets, ref_dets, params.intact)) break;
      safe = s;
    }

    SafeAreaLabel label;
    label.roi_id = roi.id;
    label.frame_index = roi.frame_index;
    label.source = roi.source;
    label.roi_box = roi.box;
    label.features = roi.features;
    label.true_safe_scale = safe;
    label.labeled_scale = std::min(1.0, safe + params.margin);
    label.labeled_area = label.labeled_scale * label.labeled_scale * roi.box.area();
    result.labels.push_back(label);
  }
  return result;
}

double nearest_rank(std::vector<double> values, double p) {
  if (values.empty()) throw ScaleError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  const auto rank = static_cast<std::size_t>(std::max(1.0, std::ceil(p * n - 1e-9)));
  return values[std::min(rank, values.size()) - 1];
}

std::vector<double> compute_class_boundaries(std::span<const double> areas, int classes) {
  if (classes < 1) throw ScaleError("class count must be >= 1");
  std::vector<double> sorted(areas.begin(), areas.end());
  std::sort(sorted.begin(), sorted.end());
  const std::set<double> distinct(sorted.begin(), sorted.end());
  if (static_cast<int>(distinct.size()) < classes) {
    throw ScaleError("need at least " + std::to_string(classes) + " distinct labeled areas, got " +
                     std::to_string(distinct.size()) + "; label more data");
  }
  std::vector<double> bounds;
  for (int i = 1; i < classes; ++i) {
    double b = nearest_rank(sorted, static_cast<double>(i) / classes);
    if (!bounds.empty() && b <= bounds.back()) {
      // Quantiles collided on a repeated value: take the next distinct value.
      auto it = distinct.upper_bound(bounds.back());
      if (it == distinct.end() || *it == *distinct.rbegin()) {
        throw ScaleError("labeled areas too concentrated for " + std::to_string(classes) + " classes");
      }
      b = *it;
    }
    bounds.push_back(b);
  }
  return bounds;
}

int class_of_area(double area, std::span<const double> boundaries) {
  int c = 0;
  for (double b : boundaries)
    if (area > b) ++c;
  return c;
}

// ---------------------------------------------------------------------------
// Decision tree

namespace {

double gini(std::span<const int> counts, int total) {
  if (total == 0) return 0.0;
  double s = 1.0;
  for (int c : counts) {
    const double p = static_cast<double>(c) / total;
    s -= p * p;
  }
  return s;
}

struct TreeBuilder {
  std::span<const FeatureVector> x;
  std::span<const int> y;
  int classes;
  TreeParams params;
  DecisionTree tree;
  std::size_t total;

  int majority(const std::vector<int>& counts) const {
    if (params.leaf_coverage > 0.0) {
      const int n = std::accumulate(counts.begin(), counts.end(), 0);
      int seen = 0;
      for (int c = 0; c < classes; ++c) {
        seen += counts[c];
        if (seen >= params.leaf_coverage * n - 1e-9) return c;
      }
      return classes - 1;
    }
    // Ties go to the larger (more conservative) class.
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (counts[c] >= counts[best]) best = c;
    return best;
  }

  int build(std::vector<int>& idx, int depth) {
    std::vector<int> counts(static_cast<std::size_t>(classes), 0);
    for (int i : idx) ++counts[static_cast<std::size_t>(y[i])];
    const int n = static_cast<int>(idx.size());
    const double node_gini = gini(counts, n);

    const int node_id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(TreeNode{});
    tree.nodes[node_id].leaf_class = majority(counts);
    if (node_gini <= 0.0 || depth >= params.max_depth || n < 2 * params.min_samples_leaf) return node_id;

    int best_feature = -1;
    double best_threshold = 0.0;
    double best_gain = 1e-12;
    std::vector<int> order(idx);
    for (int f = 0; f < kFeatureCount; ++f) {
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return x[a](f) < x[b](f); });
      std::vector<int> left(static_cast<std::size_t>(classes), 0);
      std::vector<int> right = counts;
      for (int k = 0; k + 1 < n; ++k) {
        const int c = y[order[k]];
        ++left[c];
        --right[c];
        const double v0 = x[order[k]](f);
        const double v1 = x[order[k + 1]](f);
        if (v0 == v1) continue;
        const int nl = k + 1;
        const int nr = n - nl;
        if (nl < params.min_samples_leaf || nr < params.min_samples_leaf) continue;
        const double weighted = (nl * gini(left, nl) + nr * gini(right, nr)) / n;
        const double gain = node_gini - weighted;
        // Strictly better only: earlier features and lower thresholds win ties.
        if (gain > best_gain + 1e-12) {
          best_gain = gain;
          best_feature = f;
          best_threshold = 0.5 * (v0 + v1);
        }
      }
    }
    if (best_feature < 0) return node_id;

    tree.importances(best_feature) += (static_cast<double>(n) / total) * best_gain;
    std::vector<int> li, ri;
    for (int i : idx) (x[i](best_feature) <= best_threshold ? li : ri).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    const int l = build(li, depth + 1);
    const int r = build(ri, depth + 1);
    TreeNode& node = tree.nodes[node_id];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = r;
    return node_id;
  }
};

}  // namespace

int DecisionTree::predict(const FeatureVector& x) const {
  if (nodes.empty()) throw ScaleError("empty decision tree");
  int i = 0;
  while (!nodes[i].is_leaf()) i = x(nodes[i].feature) <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
  return nodes[i].leaf_class;
}

int DecisionTree::depth() const {
  std::function<int(int)> rec = [&](int i) -> int {
    if (nodes[i].is_leaf()) return 0;
    return 1 + std::max(rec(nodes[i].left), rec(nodes[i].right));
  };
  return nodes.empty() ? 0 : rec(0);
}

DecisionTree train_decision_tree(std::span<const FeatureVector> features, std::span<const int> labels, int classes,
                                 const TreeParams& params) {
  if (features.size() != labels.size()) throw ScaleError("feature/label count mismatch");
  if (static_cast<int>(features.size()) < params.min_samples) {
    throw ScaleError("need at least " + std::to_string(params.min_samples) + " training samples");
  }
  for (int l : labels)
    if (l < 0 || l >= classes) throw ScaleError("label out of class range");
  TreeBuilder b{features, labels, classes, params, {}, features.size()};
  std::vector<int> idx(features.size());
  std::iota(idx.begin(), idx.end(), 0);
  b.build(idx, 0);
  const double sum = b.tree.importances.sum();
  if (sum > 0.0) b.tree.importances /= sum;
  return std::move(b.tree);
}

void ScaleModel::validate() const {
  if (class_target_areas.empty()) throw ScaleError("model has no classes");
  if (class_boundaries.size() + 1 != class_target_areas.size()) throw ScaleError("boundary/target count mismatch");
  for (std::size_t i = 1; i < class_boundaries.size(); ++i)
    if (!(class_boundaries[i] > class_boundaries[i - 1])) throw ScaleError("class boundaries not ascending");
  if (tree.nodes.empty()) throw ScaleError("model has no tree");
  for (const auto& n : tree.nodes) {
    if (n.is_leaf()) {
      if (n.leaf_class < 0 || n.leaf_class >= classes()) throw ScaleError("leaf class out of range");
    } else if (n.feature >= kFeatureCount || n.left < 0 || n.right < 0 ||
               n.left >= static_cast<int>(tree.nodes.size()) || n.right >= static_cast<int>(tree.nodes.size())) {
      throw ScaleError("malformed tree node");
    }
  }
}

ScaleModel train_tree(std::span<const SafeAreaLabel> labels, int classes, const TreeParams& params, double margin) {
  std::vector<double> areas;
  for (const auto& l : labels) areas.push_back(l.labeled_area);
  ScaleModel model;
  model.margin = margin;
  model.class_boundaries = compute_class_boundaries(areas, classes);
  model.class_target_areas = model.class_boundaries;
  double top = nearest_rank(areas, 0.95);
  if (!model.class_boundaries.empty() && top <= model.class_boundaries.back()) {
    top = *std::max_element(areas.begin(), areas.end());
  }
  model.class_target_areas.push_back(top);

  std::vector<FeatureVector> x;
  std::vector<int> y;
  for (const auto& l : labels) {
    x.push_back(l.features.as_vector());
    y.push_back(class_of_area(l.labeled_area, model.class_boundaries));
  }
  model.tree = train_decision_tree(x, y, classes, params);
  model.validate();
  return model;
}

ScalePrediction predict_scale(const ScaleModel& model, const ExtractionFeatures& feats, double roi_area) {
  ScalePrediction p;
  p.class_index = model.tree.predict(feats.as_vector());
  const double target = model.class_target_areas[static_cast<std::size_t>(p.class_index)];
  p.target_scale = roi_area > 0.0 ? std::min(1.0, std::sqrt(target / roi_area)) : 1.0;
  return p;
}

// ---------------------------------------------------------------------------
// Serialization

std::string model_to_json(const ScaleModel& model) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : model.tree.nodes) {
    if (n.is_leaf()) {
      nodes.push_back({{"leaf", n.leaf_class}});
    } else {
      nodes.push_back({{"feature", n.feature},
                       {"feature_name", kFeatureNames[n.feature]},
                       {"threshold", n.threshold},
                       {"left", n.left},
                       {"right", n.right},
                       {"majority", n.leaf_class}});
    }
  }
  std::vector<double> imp(model.tree.importances.data(), model.tree.importances.data() + kFeatureCount);
  nlohmann::json j = {{"nodes", nodes},
                      {"boundaries", model.class_boundaries},
                      {"targets", model.class_target_areas},
                      {"margin", model.margin},
                      {"feature_names", std::vector<std::string>(std::begin(kFeatureNames), std::end(kFeatureNames))},
                      {"importances", imp}};
  return j.dump(2);
}

ScaleModel model_from_json(const std::string& text) {
  ScaleModel m;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& n : j.at("nodes")) {
      TreeNode node;
      if (n.contains("leaf")) {
        node.leaf_class = n.at("leaf").get<int>();
      } else {
        node.feature = n.at("feature").get<int>();
        node.threshold = n.at("threshold").get<double>();
        node.left = n.at("left").get<int>();
        node.right = n.at("right").get<int>();
        node.leaf_class = n.value("majority", 0);
      }
      m.tree.nodes.push_back(node);
    }
    m.class_boundaries = j.at("boundaries").get<std::vector<double>>();
    m.class_target_areas = j.at("targets").get<std::vector<double>>();
    m.margin = j.value("margin", 0.1);
    if (j.contains("importances")) {
      const auto imp = j.at("importances").get<std::vector<double>>();
      for (std::size_t i = 0; i < imp.size() && i < kFeatureCount; ++i) m.tree.importances(static_cast<int>(i)) = imp[i];
    }
  } catch (const nlohmann::json::exception& e) {
    throw ScaleError(std::string("malformed model file: ") + e.what());
  }
  m.validate();
  return m;
}

void save_model(const std::filesystem::path& path, const ScaleModel& model) {
  std::ofstream out(path);
  if (!out) throw ScaleError("cannot write " + path.string());
  out << model_to_json(model) << '\n';
}

ScaleModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScaleError("cannot open model file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return model_from_json(ss.str());
}

namespace {
constexpr const char* kLabelHeader =
    "frame,roi,source,x,y,w,h,area,max_edge,aspect,mean_shift,shift_std,tracking_error,shift_ncc,"
    "true_safe_scale,labeled_scale,labeled_area";

const char* source_name(RoiSource s) {
  switch (s) {
    case RoiSource::PD: return "PD";
    case RoiSource::OF: return "OF";
    case RoiSource::Probe: return "probe";
  }
  return "PD";
}
}  // namespace

void write_labels_csv(const std::filesystem::path& path, std::span<const SafeAreaLabel> labels) {
  std::ofstream out(path);
  if (!out) throw ScaleError("cannot write " + path.string());
  out << kLabelHeader << '\n';
  char buf[512];
  for (const auto& l : labels) {
    const auto& f = l.features;
    std::snprintf(buf, sizeof buf,
                  "%d,%d,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.9f,%.9f,%.9f,%.9f,%.9f,%.6f,%.6f,%.6f\n",
                  l.frame_index, l.roi_id, source_name(l.source), l.roi_box.x, l.roi_box.y, l.roi_box.w,
                  l.roi_box.h, f.area, f.max_edge, f.aspect, f.mean_shift, f.shift_std, f.tracking_error,
                  f.shift_ncc, l.true_safe_scale, l.labeled_scale, l.labeled_area);
    out << buf;
  }
}

std::vector<SafeAreaLabel> read_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScaleError("cannot open labels file " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kLabelHeader) throw ScaleError(path.string() + ": line 1: unexpected labels header");
  std::vector<SafeAreaLabel> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 17) throw ScaleError(path.string() + ": line " + std::to_string(line_no) + ": expected 17 fields");
    try {
      SafeAreaLabel l;
      l.frame_index = std::stoi(f[0]);
      l.roi_id = std::stoi(f[1]);
      l.source = f[2] == "OF" ? RoiSource::OF : f[2] == "probe" ? RoiSource::Probe : RoiSource::PD;
      l.roi_box = {std::stod(f[3]), std::stod(f[4]), std::stod(f[5]), std::stod(f[6])};
      l.features = {std::stod(f[7]), std::stod(f[8]), std::stod(f[9]), std::stod(f[10]),
                    std::stod(f[11]), std::stod(f[12]), std::stod(f[13])};
      l.true_safe_scale = std::stod(f[14]);
      l.labeled_scale = std::stod(f[15]);
      l.labeled_area = std::stod(f[16]);
      out.push_back(l);
    } catch (const std::exception&) {
      throw ScaleError(path.string() + ": line " + std::to_string(line_no) + ": non-numeric field");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reactive tuner

std::vector<double> tuner_plan_probes(TrackTuneState& state, const ScalePrediction& predicted) {
  double start = predicted.target_scale;
  if (state.mode == TuneMode::Tuned) {
    if (predicted.class_index == state.predicted_class_at_tune) {
      start = state.tuned_scale;
    } else {
      state.mode = TuneMode::Invalidated;
    }
  }
  state.pending_probe_scales.clear();
  for (double f : kProbeFactors) state.pending_probe_scales.push_back(start * f);
  state.pending_class = predicted.class_index;
  return state.pending_probe_scales;
}

void tuner_interpret(TrackTuneState& state, std::span<const ProbeResult> results, const Detection& reference,
                     const IntactCriterion& crit) {
  tuner_interpret(state, results, std::span<const Detection>(&reference, 1), crit);
}

void tuner_interpret(TrackTuneState& state, std::span<const ProbeResult> results,
                     std::span<const Detection> references, const IntactCriterion& crit) {
  if (state.pending_probe_scales.empty()) return;
  const double start = state.pending_probe_scales.front();
  std::optional<double> smallest_success;
  int present = 0;
  for (double s : state.pending_probe_scales) {
    const auto it = std::find_if(results.begin(), results.end(),
                                 [&](const ProbeResult& r) { return std::abs(r.scale - s) < 1e-9; });
    if (it == results.end()) continue;
    ++present;
    if (is_intact(it->detections, references, crit) && (!smallest_success || s < *smallest_success)) {
      smallest_success = s;
    }
  }
  if (smallest_success) {
    state.tuned_scale = *smallest_success;
  } else if (present == static_cast<int>(state.pending_probe_scales.size())) {
    state.tuned_scale = std::min(1.0, start / 0.9);
  } else {
    return;  // probes missing and none succeeded: keep the previous state
  }
  state.mode = TuneMode::Tuned;
  state.predicted_class_at_tune = state.pending_class;
  state.pending_probe_scales.clear();
}

double assigned_scale(const TrackTuneState& state, const ScalePrediction& predicted) {
  if (state.mode == TuneMode::Tuned && state.predicted_class_at_tune == predicted.class_index) {
    return state.tuned_scale;
  }
  return predicted.target_scale;
}

}  // namespace cpi
