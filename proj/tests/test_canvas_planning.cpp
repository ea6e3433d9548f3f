#include <gtest/gtest.h>

#include <cmath>

#include "cpi/canvas_planning.hpp"
#include "cpi/rng.hpp"

using namespace cpi;

namespace {

std::vector<CanvasTemplate> random_templates(Rng& rng, int k) {
  std::vector<CanvasTemplate> t;
  int side = 0;
  for (int i = 0; i < k; ++i) {
    side += static_cast<int>(rng.uniform_int(16, 400));
    t.push_back({side, rng.uniform(1.0, 100.0)});
  }
  return t;
}

}  // namespace

TEST(Knapsack, PhoneTableExample) {
  const std::vector<CanvasTemplate> t{{320, 30.9}, {640, 72.3}};
  const auto plan = plan_canvases(t, 200.0);
  EXPECT_EQ(plan.counts, (std::vector<int>{1, 2}));
  EXPECT_DOUBLE_EQ(plan.total_area, 921600.0);
  EXPECT_NEAR(plan.total_latency, 175.5, 1e-9);
  EXPECT_EQ(plan.canvas_count(), 3);
}

TEST(Knapsack, ZeroDeadlineIsEmpty) {
  const std::vector<CanvasTemplate> t{{320, 30.9}, {640, 72.3}};
  const auto plan = plan_canvases(t, 0.0);
  EXPECT_EQ(plan.counts, (std::vector<int>{0, 0}));
  EXPECT_DOUBLE_EQ(plan.total_area, 0.0);
  EXPECT_EQ(plan.canvas_count(), 0);
}

TEST(Knapsack, MatchesBruteForce) {
  Rng rng(101);
  for (int trial = 0; trial < 300; ++trial) {
    const auto t = random_templates(rng, static_cast<int>(rng.uniform_int(1, 5)));
    const double deadline = rng.uniform(0.0, 500.0);
    const auto fast = plan_canvases(t, deadline);
    const auto slow = plan_canvases_brute_force(t, deadline);
    EXPECT_DOUBLE_EQ(fast.total_area, slow.total_area) << trial;
    EXPECT_LE(fast.total_latency, deadline + 1e-9);
    double area = 0.0, lat = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      area += fast.counts[i] * t[i].area();
      lat += fast.counts[i] * t[i].latency_ms;
    }
    EXPECT_DOUBLE_EQ(area, fast.total_area);
    EXPECT_NEAR(lat, fast.total_latency, 1e-9);
  }
}

TEST(Knapsack, MonotoneInDeadline) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto t = random_templates(rng, 4);
    double prev = 0.0;
    for (double d = 0.0; d <= 400.0; d += 13.0) {
      const double a = plan_canvases(t, d).total_area;
      EXPECT_GE(a, prev);
      prev = a;
    }
  }
}

TEST(Knapsack, TieBreaksPreferFewerCanvases) {
  // four 100-side canvases or one 200-side canvas carry the same area
  const std::vector<CanvasTemplate> t{{100, 10.0}, {200, 40.0}};
  const auto plan = plan_canvases(t, 40.0);
  EXPECT_EQ(plan.counts, (std::vector<int>{0, 1}));
}

TEST(Knapsack, RejectsBadTemplates) {
  EXPECT_THROW(plan_canvases({{320, 0.0}}, 100.0), PlanningError);
  EXPECT_THROW(LatencyModel({640, 320}, default_latency_curve()), PlanningError);
  EXPECT_THROW(LatencyModel({320}, default_latency_curve(), 0.0), PlanningError);
}

TEST(LatencyCurve, TwoPointFit) {
  const auto curve = default_latency_curve();
  EXPECT_NEAR(curve.b, std::log(694.0 / 30.9) / std::log(36.0), 1e-12);
  EXPECT_NEAR(curve.b, 0.8683408208646799, 1e-12);
  EXPECT_NEAR(curve(320.0 * 320.0), 30.9, 1e-9);
  EXPECT_NEAR(curve(1920.0 * 1920.0), 694.0, 1e-9);
  EXPECT_THROW(PowerLawCurve::fit({100, 5}, {100, 6}), PlanningError);
}

TEST(LatencyCurve, ThroughputIncreasesWithArea) {
  const auto curve = default_latency_curve();
  double prev = 0.0;
  for (int s = 64; s <= 2048; s += 64) {
    const double a = static_cast<double>(s) * s;
    const double tp = a / curve(a);
    EXPECT_GT(tp, prev);
    prev = tp;
  }
}

TEST(LatencyCurve, MaxTemplateSide) {
  EXPECT_EQ(max_template_side(default_latency_curve(), kDefaultTemplateSides), 1280);
  // linear latency: every side has the same throughput, so the smallest wins
  EXPECT_EQ(max_template_side(PowerLawCurve{0.001, 1.0}, kDefaultTemplateSides), 320);
}

TEST(LatencyModelTest, EmaWithDriftRescaling) {
  // curve through 100^2 -> 30 ms and 200^2 -> 70 ms
  const auto curve = PowerLawCurve::fit({100.0 * 100.0, 30.0}, {200.0 * 200.0, 70.0});
  LatencyModel m({100, 200}, curve, 0.3, 0.0);
  EXPECT_NEAR(m.templates()[1].latency_ms, 70.0, 1e-9);
  m.update(200, 80.0);
  EXPECT_NEAR(m.templates()[1].latency_ms, 73.0, 1e-9);
  EXPECT_NEAR(m.templates()[0].latency_ms, 30.0 * 73.0 / 70.0, 1e-9);
  EXPECT_NEAR(m.templates()[0].latency_ms, 31.285714, 1e-6);
}

TEST(LatencyModelTest, FixpointAndConvergence) {
  const auto curve = PowerLawCurve::fit({100.0 * 100.0, 30.0}, {200.0 * 200.0, 70.0});
  LatencyModel m({100, 200}, curve, 0.3, 0.0);
  m.update(200, 70.0);
  EXPECT_NEAR(m.templates()[1].latency_ms, 70.0, 1e-12);
  double prev = 70.0;
  for (int i = 0; i < 10; ++i) {
    m.update(200, 90.0);
    const double now = m.templates()[1].latency_ms;
    EXPECT_GT(now, prev);
    EXPECT_LT(now, 90.0);
    prev = now;
  }
}

TEST(LatencyModelTest, UnobservedKeepRatios) {
  LatencyModel m(kDefaultTemplateSides, default_latency_curve(), 0.3, 0.0);
  const double r0 = m.templates()[0].latency_ms / m.templates()[2].latency_ms;
  Rng rng(1);
  for (int i = 0; i < 50; ++i) m.update(kDefaultTemplateSides[rng.uniform_int(0, 1) == 0 ? 1 : 3], rng.uniform(20, 400));
  EXPECT_NEAR(m.templates()[0].latency_ms / m.templates()[2].latency_ms, r0, 1e-9);
}

TEST(LatencyModelTest, RejectsNonPositiveObservation) {
  LatencyModel m(kDefaultTemplateSides, default_latency_curve());
  const double before = m.templates()[1].latency_ms;
  m.update(640, 0.0);
  m.update(640, -3.0);
  EXPECT_EQ(m.rejected_observations(), 2);
  EXPECT_DOUBLE_EQ(m.templates()[1].latency_ms, before);
}

TEST(LatencyModelTest, SimulationDeterministic) {
  LatencyModel exact(kDefaultTemplateSides, default_latency_curve(), 0.3, 0.0);
  EXPECT_DOUBLE_EQ(exact.simulate(640), default_latency_curve()(640.0 * 640.0));
  LatencyModel a(kDefaultTemplateSides, default_latency_curve(), 0.3, 0.05, 4);
  LatencyModel b(kDefaultTemplateSides, default_latency_curve(), 0.3, 0.05, 4);
  bool varied = false;
  const double base = a.curve()(640.0 * 640.0);
  for (int i = 0; i < 20; ++i) {
    const double x = a.simulate(640);
    EXPECT_DOUBLE_EQ(x, b.simulate(640));
    varied = varied || std::abs(x - base) > 1e-9;
  }
  EXPECT_TRUE(varied);
}
