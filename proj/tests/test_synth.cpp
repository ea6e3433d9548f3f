#include <gtest/gtest.h>

#include "cpi/synth.hpp"

using namespace cpi;

namespace {

/// One oracle truth object and one placement of an ROI equal to its box.
struct OracleCase {
  std::vector<GroundTruthRecord> truth;
  PlacedRoi placed;

  OracleCase(Box obj, double detectability, double scale) {
    truth.push_back({0, 1, obj, 0, detectability});
    placed.frame_index = 0;
    placed.roi_box = obj;
    placed.placement.scale = scale;
    placed.placement.pos_x = 2;
    placed.placement.pos_y = 2;
    placed.placement.placed_w = scaled_extent(obj.w, scale);
    placed.placement.placed_h = scaled_extent(obj.h, scale);
  }

  std::vector<Detection> run() {
    OracleDetector det(truth, 1);
    const int side = std::max(placed.placement.placed_w, placed.placement.placed_h) + 4;
    return det.detect(CanvasView{side, nullptr, std::span<const PlacedRoi>(&placed, 1)});
  }
};

}  // namespace

TEST(Scene, NoObjectsMeansBackgroundOnly) {
  SceneConfig c;
  c.n_objects = 0;
  c.duration_frames = 3;
  const Scene s = generate_scene(c);
  EXPECT_TRUE(s.truth().empty());
  EXPECT_TRUE((s.render(0).pixels == s.render(2).pixels).all());
}

TEST(Scene, ZeroFramesAllowed) {
  SceneConfig c;
  c.duration_frames = 0;
  EXPECT_EQ(generate_scene(c).frame_count(), 0);
}

TEST(Scene, SameSeedSameFrames) {
  SceneConfig c;
  c.duration_frames = 20;
  c.rng_seed = 42;
  const Scene a = generate_scene(c);
  const Scene b = generate_scene(c);
  for (int f : {0, 7, 19}) EXPECT_TRUE((a.render(f).pixels == b.render(f).pixels).all());
  ASSERT_EQ(a.truth().size(), b.truth().size());
  c.rng_seed = 43;
  EXPECT_FALSE((generate_scene(c).render(5).pixels == a.render(5).pixels).all());
}

TEST(Scene, ObjectAreaMeanNearWorkloadTarget) {
  SceneConfig c;
  Rng rng(2024);
  double sum = 0.0;
  const int n = 2000;
  for (int i = 0; i < n; ++i) sum += sample_object_area(c, rng);
  EXPECT_NEAR(sum / n, 9355.0, 935.5);
}

TEST(Scene, TruthBoxesInsideFrameAndOcclusionDoubles) {
  SceneConfig c;
  c.duration_frames = 200;
  c.occlusion_per_100_frames = 2.0;
  const Scene s = generate_scene(c);
  bool saw_occlusion = false;
  for (const auto& r : s.truth()) {
    EXPECT_GE(r.box.x, 0.0);
    EXPECT_GE(r.box.y, 0.0);
    EXPECT_LE(r.box.right(), c.width);
    EXPECT_LE(r.box.bottom(), c.height);
    const auto& o = s.objects().at(static_cast<std::size_t>(r.track_id - 1));
    ASSERT_TRUE(r.detectability_area);
    if (o.occluded_frames.contains(r.frame_index)) {
      saw_occlusion = true;
      EXPECT_DOUBLE_EQ(*r.detectability_area, 2.0 * o.detectability_area);
    } else {
      EXPECT_DOUBLE_EQ(*r.detectability_area, o.detectability_area);
    }
  }
  EXPECT_TRUE(saw_occlusion);
}

TEST(Scene, DetectabilityWithinConfiguredRatios) {
  SceneConfig c;
  c.n_objects = 300;
  c.duration_frames = 1;
  const Scene s = generate_scene(c);
  for (const auto& o : s.objects()) {
    const Box& b = o.box_at(0);
    const double ratio = o.detectability_area / b.area();
    EXPECT_LE(ratio, 1.0);
    EXPECT_GE(ratio, c.detectability_ratio_min - 1e-12);
  }
}

TEST(Scene, InvalidConfigRejected) {
  SceneConfig c;
  c.size_min = 10;
  c.size_max = 5;
  EXPECT_THROW(generate_scene(c), std::invalid_argument);
  SceneConfig d;
  d.detectability_ratio_max = 1.5;
  EXPECT_THROW(generate_scene(d), std::invalid_argument);
}

TEST(Oracle, BoundaryFiresAtConfidencePointThree) {
  OracleCase k({10, 10, 40, 40}, 400.0, 0.5);
  const auto dets = k.run();
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_DOUBLE_EQ(dets[0].confidence, 0.3);
  EXPECT_DOUBLE_EQ(OracleDetector::confidence_for(400, 400), 0.3);
}

TEST(Oracle, JustBelowBoundaryIsMissed) {
  // 0.99 of the detectability area on canvas
  OracleCase k({10, 10, 40, 40}, 400.0 / 0.99, 0.5);
  EXPECT_TRUE(k.run().empty());
}

TEST(Oracle, ConfidenceCurve) {
  EXPECT_DOUBLE_EQ(OracleDetector::confidence_for(800, 400), 0.9);
  EXPECT_DOUBLE_EQ(OracleDetector::confidence_for(4000, 400), 0.99);
  EXPECT_DOUBLE_EQ(OracleDetector::confidence_for(100, 400), 0.3);
}

TEST(Oracle, JitterBoundedAndDeterministic) {
  OracleCase k({10, 10, 40, 40}, 100.0, 1.0);
  const auto a = k.run();
  const auto b = k.run();
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].box, b[0].box);
  // object occupies (2, 2, 40, 40) on the canvas
  EXPECT_NEAR(a[0].box.x, 2.0, 1.0);
  EXPECT_NEAR(a[0].box.right(), 42.0, 1.0);
  EXPECT_NEAR(a[0].box.y, 2.0, 1.0);
  EXPECT_NEAR(a[0].box.bottom(), 42.0, 1.0);
}

TEST(Oracle, MonotoneInScale) {
  Rng rng(8);
  for (int i = 0; i < 300; ++i) {
    const Box obj{0, 0, rng.uniform(10, 120), rng.uniform(10, 120)};
    const double det = obj.area() * rng.uniform(0.02, 1.0);
    bool seen = false;
    for (int k = 1; k <= 20; ++k) {
      OracleCase c(obj, det, k / 20.0);
      const bool hit = !c.run().empty();
      if (seen) {
        EXPECT_TRUE(hit);
      }
      seen = seen || hit;
    }
    EXPECT_TRUE(seen);
  }
}

TEST(Oracle, NeedsMostOfTheObjectVisible) {
  OracleCase k({10, 10, 40, 40}, 100.0, 1.0);
  k.placed.roi_box = {10, 10, 40, 20};  // half of the object
  k.placed.placement.placed_h = 20;
  EXPECT_TRUE(k.run().empty());
  k.placed.roi_box = {10, 10, 40, 28};  // 70%
  k.placed.placement.placed_h = 28;
  EXPECT_EQ(k.run().size(), 1u);
}
