#include <gtest/gtest.h>

#include <algorithm>

#include "cpi/rng.hpp"
#include "cpi/roi_packing.hpp"

using namespace cpi;

namespace {

PackRequest request(int id, double w, double h, double scale = 1.0,
                    PriorityClass pri = PriorityClass::Regular, int drops = 0) {
  PackRequest r;
  r.roi_id = id;
  r.roi_box = {0, 0, w, h};
  r.scale = scale;
  r.priority = pri;
  r.consecutive_drop_count = drops;
  return r;
}

CanvasPlan single(int count = 1) {
  CanvasPlan p;
  p.counts = {count};
  return p;
}

bool overlaps(const Rect& a, const Rect& b) {
  return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

void expect_valid(const PackResult& res) {
  for (const auto& c : res.canvases) {
    for (std::size_t i = 0; i < c.occupied.size(); ++i) {
      const Rect& r = c.occupied[i];
      EXPECT_GE(r.x, 0);
      EXPECT_GE(r.y, 0);
      EXPECT_LE(r.x + r.w, c.side);
      EXPECT_LE(r.y + r.h, c.side);
      for (std::size_t j = i + 1; j < c.occupied.size(); ++j) EXPECT_FALSE(overlaps(r, c.occupied[j]));
    }
  }
}

}  // namespace

TEST(Order, PriorityThenDropsThenAreaThenId) {
  std::vector<PackRequest> r{request(5, 10, 10), request(4, 50, 50), request(3, 10, 10, 1.0, PriorityClass::Regular, 2),
                             request(2, 5, 5, 1.0, PriorityClass::NewOrLowConfidence),
                             request(1, 5, 5, 1.0, PriorityClass::ProbeOrLastFrame), request(0, 10, 10)};
  order_rois(r);
  std::vector<int> ids;
  for (const auto& q : r) ids.push_back(q.roi_id);
  EXPECT_EQ(ids, (std::vector<int>{1, 2, 3, 4, 0, 5}));
}

TEST(Pack, TwoHalvesFillCanvas) {
  // 60x124 content + 2 px border = 64x128 each
  const std::vector<CanvasTemplate> t{{128, 10.0}};
  const std::vector<PackRequest> r{request(0, 60, 124), request(1, 60, 124)};
  const auto res = pack(single(), t, r);
  ASSERT_EQ(res.canvases.size(), 1u);
  EXPECT_TRUE(res.dropped.empty());
  EXPECT_DOUBLE_EQ(res.canvases[0].fillup_ratio(), 1.0);
  expect_valid(res);
}

TEST(Pack, HundredTilesOnLargeCanvas) {
  const std::vector<CanvasTemplate> t{{1280, 100.0}};
  std::vector<PackRequest> r;
  for (int i = 0; i < 101; ++i) r.push_back(request(i, 124, 124));
  const auto res = pack(single(), t, r);
  EXPECT_EQ(res.canvases[0].placements.size(), 100u);
  EXPECT_DOUBLE_EQ(res.canvases[0].fillup_ratio(), 1.0);
  ASSERT_EQ(res.dropped.size(), 1u);
  EXPECT_EQ(res.dropped[0].roi_id, 100);
  EXPECT_EQ(res.dropped[0].reason, DropReason::NoSpace);
  expect_valid(res);
}

TEST(Pack, TooLargeForAnyTemplate) {
  const std::vector<CanvasTemplate> t{{320, 10.0}, {640, 30.0}};
  CanvasPlan p;
  p.counts = {1, 1};
  const std::vector<PackRequest> r{request(0, 700, 100), request(1, 100, 100)};
  const auto res = pack(p, t, r);
  ASSERT_EQ(res.dropped.size(), 1u);
  EXPECT_EQ(res.dropped[0].reason, DropReason::LargerThanTemplate);
  EXPECT_EQ(res.canvases[0].side, 640);  // largest first
}

TEST(Pack, EmptyPlanDropsEverything) {
  const std::vector<CanvasTemplate> t{{320, 10.0}};
  const std::vector<PackRequest> r{request(0, 10, 10), request(1, 20, 20)};
  const auto res = pack(single(0), t, r);
  EXPECT_TRUE(res.canvases.empty());
  EXPECT_EQ(res.dropped.size(), 2u);
  EXPECT_THROW(pack(CanvasPlan{}, t, r), PlanningError);
}

TEST(Pack, ProbesGoToFirstCanvas) {
  const std::vector<CanvasTemplate> t{{320, 10.0}};
  std::vector<PackRequest> r{request(0, 100, 100, 1.0, PriorityClass::ProbeOrLastFrame),
                             request(1, 100, 100, 1.0, PriorityClass::ProbeOrLastFrame)};
  const auto res = pack(single(3), t, r);
  EXPECT_EQ(res.canvases[0].placements.size(), 2u);
  EXPECT_TRUE(res.canvases[1].placements.empty());
}

TEST(Pack, RandomWindowsValidAndConserving) {
  Rng rng(77);
  const std::vector<CanvasTemplate> t{{320, 10.0}, {640, 30.0}, {960, 50.0}, {1280, 80.0}};
  for (int trial = 0; trial < 60; ++trial) {
    CanvasPlan p;
    for (int i = 0; i < 4; ++i) p.counts.push_back(static_cast<int>(rng.uniform_int(0, 2)));
    std::vector<PackRequest> r;
    const int n = static_cast<int>(rng.uniform_int(0, 120));
    for (int i = 0; i < n; ++i) {
      const auto pri = static_cast<PriorityClass>(rng.uniform_int(0, 2));
      r.push_back(request(i, rng.uniform(8, 400), rng.uniform(8, 400), rng.uniform(0.1, 1.0), pri));
    }
    order_rois(r);
    const auto res = pack(p, t, r);
    expect_valid(res);
    std::size_t placed = 0;
    for (const auto& c : res.canvases) {
      placed += c.placements.size();
      for (std::size_t k = 0; k < c.placements.size(); ++k) {
        const auto& pl = c.placements[k];
        const Rect& o = c.occupied[k];
        // content sits inside its bordered rectangle
        EXPECT_GE(pl.pos_x, o.x);
        EXPECT_LE(pl.pos_x + pl.placed_w, o.x + o.w);
        EXPECT_GE(pl.pos_y, o.y);
        EXPECT_LE(pl.pos_y + pl.placed_h, o.y + o.h);
      }
    }
    EXPECT_EQ(placed + res.dropped.size(), r.size());
  }
}

TEST(Bin, SplitAndMergeRestoreFullArea) {
  GuillotineBin bin(100);
  EXPECT_EQ(bin.free_area(), 10000);
  const int s = bin.choose(100, 40);
  ASSERT_GE(s, 0);
  const Rect used = bin.place(s, 100, 40);
  EXPECT_EQ(used, (Rect{0, 0, 100, 40}));
  EXPECT_EQ(bin.free_area(), 6000);
  EXPECT_EQ(bin.choose(101, 10), -1);
  ASSERT_EQ(bin.free_rects().size(), 1u);
  EXPECT_EQ(bin.free_rects()[0], (Rect{0, 40, 100, 60}));
}

TEST(Raster, EmptyCanvasIsFill) {
  PackedCanvas c;
  c.side = 16;
  const auto img = rasterize(c, {}, [](int) -> const GrayImage& { throw std::logic_error("no frames"); });
  EXPECT_TRUE((img == kCanvasFill).all());
  EXPECT_TRUE((rasterize(c, {}, {}, 0) == 0).all());
}

TEST(Raster, UnitScaleCropIsExact) {
  GrayImage frame(40, 50);
  for (Eigen::Index i = 0; i < frame.size(); ++i) frame.data()[i] = static_cast<std::uint8_t>(i * 7);
  const std::vector<CanvasTemplate> t{{64, 1.0}};
  PackRequest r = request(0, 20, 10);
  r.roi_box = {5, 6, 20, 10};
  const std::vector<PackRequest> reqs{r};
  const auto res = pack(single(), t, reqs);
  const auto img = rasterize(res.canvases[0], reqs, [&](int) -> const GrayImage& { return frame; });
  const auto& p = res.canvases[0].placements[0];
  EXPECT_TRUE((img.block(p.pos_y, p.pos_x, 10, 20) == frame.block(6, 5, 10, 20)).all());
  EXPECT_EQ(img(0, 0), kCanvasFill);  // border stays fill
}

TEST(Raster, CheckerboardHalvesToMidGrey) {
  GrayImage frame(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) frame(y, x) = (x + y) % 2 ? 255 : 0;
  Placement p;
  p.scale = 0.5;
  p.placed_w = 16;
  p.placed_h = 16;
  GrayImage canvas = GrayImage::Constant(16, 16, kCanvasFill);
  blit_roi(canvas, frame, {0, 0, 32, 32}, p);
  // every sample lands midway between a 2x2 block: 127.5 rounds half up
  EXPECT_TRUE((canvas == 128).all());
}
