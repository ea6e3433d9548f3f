#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "cpi/pipeline.hpp"
#include "cpi/synth.hpp"

using namespace cpi;

namespace {

Detection det(Box b, double conf) {
  Detection d;
  d.box = b;
  d.confidence = conf;
  return d;
}

SceneConfig small_scene(std::uint64_t seed, int frames = 150, int objects = 6) {
  SceneConfig c;
  c.width = 480;
  c.height = 320;
  c.n_objects = objects;
  c.duration_frames = frames;
  c.size_mean = 2500;
  c.size_std = 1500;
  c.size_min = 600;
  c.size_max = 8000;
  c.rng_seed = seed;
  return c;
}

/// Every leaf maps to class 0 with the given target area.
ScaleModel constant_model(double target) {
  ScaleModel m;
  m.class_target_areas = {target};
  m.tree.nodes.push_back(TreeNode{});
  return m;
}

struct SceneRun {
  Scene scene;
  OracleDetector oracle;
  FrameSource source;

  explicit SceneRun(const SceneConfig& c)
      : scene(generate_scene(c)), oracle(scene.truth(), 11), source([this](int i) { return scene.render(i); }) {}

  RunResult run(const PipelineConfig& pc, std::optional<ScaleModel> model = std::nullopt) {
    Pipeline p(pc, oracle, std::move(model));
    return p.run(source, scene.frame_count(), 30.0);
  }
};

PipelineConfig fixed_config(double scale = 0.8) {
  PipelineConfig pc;
  pc.scale_mode = ScaleMode::fixed;
  pc.fixed_scale = scale;
  pc.noise_sigma = 0.0;
  return pc;
}

void expect_same(const RunResult& a, const RunResult& b) {
  ASSERT_EQ(a.detections.size(), b.detections.size());
  for (std::size_t f = 0; f < a.detections.size(); ++f) {
    ASSERT_EQ(a.detections[f].detections.size(), b.detections[f].detections.size()) << f;
    for (std::size_t k = 0; k < a.detections[f].detections.size(); ++k) {
      const auto& x = a.detections[f].detections[k];
      const auto& y = b.detections[f].detections[k];
      EXPECT_EQ(x.box, y.box);
      EXPECT_EQ(x.confidence, y.confidence);
      EXPECT_EQ(x.interpolated, y.interpolated);
    }
  }
  ASSERT_EQ(a.windows.size(), b.windows.size());
  for (std::size_t w = 0; w < a.windows.size(); ++w) {
    EXPECT_EQ(a.windows[w].packed, b.windows[w].packed);
    EXPECT_EQ(a.windows[w].inference_ms, b.windows[w].inference_ms);
    EXPECT_EQ(a.windows[w].pixels, b.windows[w].pixels);
  }
}

}  // namespace

TEST(Ap, EnvelopeExample) {
  const std::vector<GroundTruthRecord> truth{{0, 1, {0, 0, 10, 10}, 0, {}}, {0, 2, {50, 50, 10, 10}, 0, {}}};
  const std::vector<FrameDetections> dets{
      {0, {det({0, 0, 10, 10}, 0.9), det({100, 100, 10, 10}, 0.8), det({50, 50, 10, 10}, 0.7)}}};
  EXPECT_NEAR(compute_ap(dets, truth), 0.5 + (2.0 / 3.0) * 0.5, 1e-12);
}

TEST(Ap, ExactDisjointAndEmpty) {
  const std::vector<GroundTruthRecord> truth{{0, 1, {0, 0, 10, 10}, 0, {}}};
  EXPECT_DOUBLE_EQ(compute_ap(std::vector<FrameDetections>{{0, {det({0, 0, 10, 10}, 0.5)}}}, truth), 1.0);
  EXPECT_DOUBLE_EQ(compute_ap(std::vector<FrameDetections>{{0, {det({30, 30, 10, 10}, 0.5)}}}, truth), 0.0);
  // a matching box on another frame does not count
  EXPECT_DOUBLE_EQ(compute_ap(std::vector<FrameDetections>{{1, {det({0, 0, 10, 10}, 0.5)}}}, truth), 0.0);
  EXPECT_DOUBLE_EQ(compute_ap({}, {}), 1.0);
  EXPECT_DOUBLE_EQ(compute_ap(std::vector<FrameDetections>{{0, {det({0, 0, 1, 1}, 0.5)}}}, {}), 0.0);
}

TEST(Ap, EachTruthMatchedOnce) {
  const std::vector<GroundTruthRecord> truth{{0, 1, {0, 0, 10, 10}, 0, {}}};
  const std::vector<FrameDetections> dets{{0, {det({0, 0, 10, 10}, 0.9), det({0, 0, 10, 10}, 0.8)}}};
  EXPECT_DOUBLE_EQ(compute_ap(dets, truth), 1.0);  // duplicate is a false positive after full recall
}

TEST(Throughput, Arithmetic) {
  WindowReport w;
  w.frames = 60;
  w.inference_ms = 2000.0;
  EXPECT_DOUBLE_EQ(compute_throughput(std::vector<WindowReport>{w}, ClockMode::simulated), 30.0);
  w.inference_ms = 4000.0;
  EXPECT_DOUBLE_EQ(compute_throughput(std::vector<WindowReport>{w}, ClockMode::simulated), 15.0);
  // one 640x640 frame per inference at the phone's measured 72.3 ms
  WindowReport f;
  f.frames = 1;
  f.inference_ms = 72.3;
  EXPECT_NEAR(compute_throughput(std::vector<WindowReport>{f}, ClockMode::simulated), 13.83, 0.01);
  EXPECT_DOUBLE_EQ(compute_throughput(std::vector<WindowReport>{w}, ClockMode::wall, 3.0), 20.0);
  w.inference_ms = 0.0;
  EXPECT_THROW(compute_throughput(std::vector<WindowReport>{w}, ClockMode::simulated), std::invalid_argument);
}

TEST(Config, Validation) {
  PipelineConfig pc;
  EXPECT_EQ(pc.frames_per_window(30.0), 60);
  pc.window_ms = 0.0;
  EXPECT_THROW(pc.validate(), std::invalid_argument);
}

TEST(PipelineRun, EmptySceneFrameWiseFps) {
  SceneConfig c = small_scene(1, 60, 0);
  SceneRun s(c);
  PipelineConfig pc = fixed_config();
  const auto fw = run_baseline(BaselineMode::frame_wise, pc, s.oracle, s.source, 60, 30.0, s.scene.truth());
  EXPECT_NEAR(fw.fps, 1000.0 / default_latency_curve()(640.0 * 640.0), 1e-9);
  const auto r = s.run(pc);
  EXPECT_EQ(r.detections.size(), 60u);
  for (const auto& w : r.windows) EXPECT_EQ(w.requests, 0);
}

TEST(PipelineRun, ConservationAndDeadline) {
  SceneRun s(small_scene(3));
  const auto r = s.run(fixed_config());
  ASSERT_EQ(r.detections.size(), 150u);
  for (std::size_t f = 0; f < r.detections.size(); ++f) EXPECT_EQ(r.detections[f].frame, static_cast<int>(f));
  int packed = 0;
  for (const auto& w : r.windows) {
    EXPECT_EQ(w.packed + w.dropped, w.requests) << w.window;
    EXPECT_LE(w.planned_latency_ms, w.deadline_ms + 1e-9);
    packed += w.packed;
  }
  EXPECT_GT(packed, 0);
  EXPECT_GT(compute_ap(r.detections, s.scene.truth()), 0.5);
}

TEST(PipelineRun, PipelinedMatchesSingleThreaded) {
  for (std::uint64_t seed : {5u, 6u}) {
    SceneRun s(small_scene(seed, 130));
    PipelineConfig pc = fixed_config(0.5);
    pc.noise_sigma = 0.05;
    pc.rng_seed = seed;
    const auto a = s.run(pc);
    pc.pipelined = true;
    const auto b = s.run(pc);
    expect_same(a, b);
  }
}

TEST(PipelineRun, InfeasibleDeadlineDropsEverything) {
  SceneRun s(small_scene(4, 90));
  PipelineConfig pc = fixed_config();
  pc.window_ms = 20.0;  // below the 320 template's 30.9 ms
  const auto r = s.run(pc);
  int requests = 0;
  for (const auto& w : r.windows) {
    EXPECT_EQ(w.packed, 0);
    EXPECT_EQ(w.dropped, w.requests);
    EXPECT_TRUE(w.canvases.empty());
    requests += w.requests;
  }
  EXPECT_GT(requests, 0);
  for (const auto& f : r.detections)
    for (const auto& d : f.detections) EXPECT_TRUE(d.interpolated);
}

TEST(PipelineRun, TunerLowersScaleOnEasyObject) {
  // one slow object, easy to detect; the proactive target keeps it near 0.6
  SceneConfig c = small_scene(8, 300, 1);
  c.size_min = c.size_max = c.size_mean = 6400;
  c.speed_min = 1.0;
  c.speed_max = 1.2;
  c.velocity_jitter = 0.0;
  c.detectability_px_mean = 300;
  c.detectability_cv = 0.0;
  c.occlusion_per_100_frames = 0.0;
  SceneRun s(c);
  PipelineConfig pc;
  pc.noise_sigma = 0.0;
  const double target = 3000.0;
  const auto r = s.run(pc, constant_model(target));
  bool tuned = false;
  for (const auto& [id, st] : r.tuner) {
    if (st.mode != TuneMode::Tuned) continue;
    tuned = true;
    // ROIs are at least as large as the object, so the prediction is at most sqrt(target / 6400)
    EXPECT_LE(st.tuned_scale, std::sqrt(target / 6400.0) + 1e-9);
  }
  EXPECT_TRUE(tuned);
  EXPECT_GT(compute_ap(r.detections, s.scene.truth()), 0.8);
}

TEST(PipelineRun, CanvasSinkSeesEveryCanvas) {
  SceneRun s(small_scene(9, 60));
  Pipeline p(fixed_config(), s.oracle);
  int seen = 0;
  p.set_canvas_sink([&](int, const PackedCanvas& c, const GrayImage& img) {
    EXPECT_EQ(img.rows(), c.side);
    ++seen;
  });
  const auto r = p.run(s.source, 60, 30.0);
  std::size_t canvases = 0;
  for (const auto& w : r.windows) canvases += w.canvases.size();
  EXPECT_EQ(static_cast<std::size_t>(seen), canvases);
}

TEST(Baselines, RoiWisePaysSmallInputPenalty) {
  SceneRun s(small_scene(12, 90));
  PipelineConfig pc = fixed_config(1.0);
  BaselineOptions full;
  full.roi_full_scale = true;
  const auto rw = run_baseline(BaselineMode::roi_wise, pc, s.oracle, s.source, 90, 30.0, s.scene.truth(), full);
  const auto packed = s.run(pc);
  ASSERT_GT(rw.pixels, 0.0);
  double rw_ms = 0.0, pk_ms = 0.0;
  for (const auto& w : rw.run.windows) rw_ms += w.inference_ms;
  for (const auto& w : packed.windows) pk_ms += w.inference_ms;
  // pixel throughput: packed canvases push more pixels per millisecond
  double pk_px = 0.0;
  for (const auto& w : packed.windows)
    for (const auto& cv : w.canvases) pk_px += static_cast<double>(cv.side) * cv.side;
  EXPECT_GT(pk_px / pk_ms, rw.pixels / rw_ms);
  EXPECT_GT(rw.ap, 0.9);

  const auto eb = run_baseline(BaselineMode::emulated_batch, pc, s.oracle, s.source, 90, 30.0, s.scene.truth());
  for (const auto& w : eb.run.windows)
    for (const auto& cv : w.canvases) EXPECT_EQ(cv.side, 1280);
}

TEST(Reports, JsonAndCsv) {
  SceneRun s(small_scene(2, 60));
  const auto r = s.run(fixed_config());
  const auto j = nlohmann::json::parse(report_json(r, ClockMode::simulated, 0.5));
  EXPECT_EQ(j.at("windows").size(), r.windows.size());
  EXPECT_DOUBLE_EQ(j.at("aggregate").at("ap50").get<double>(), 0.5);
  EXPECT_TRUE(j.at("aggregate").contains("simulated_fps"));
  EXPECT_TRUE(j.contains("timing"));
  const auto csv = report_csv(r);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), r.windows.size() + 1);
}

TEST(Collect, TrainingRoisCarryFeatures) {
  SceneRun s(small_scene(21, 120));
  const auto rois = collect_training_rois(s.source, 120, s.oracle, {});
  ASSERT_FALSE(rois.empty());
  bool saw_of = false;
  for (const auto& r : rois) {
    EXPECT_DOUBLE_EQ(r.features.area, r.box.area());
    saw_of = saw_of || r.source == RoiSource::OF;
  }
  EXPECT_TRUE(saw_of);
}
