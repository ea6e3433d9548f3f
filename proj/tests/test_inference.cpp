#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cpi/inference.hpp"
#include "test_util.hpp"

using namespace cpi;

namespace {

Detection det(Box b, double conf = 0.9, int cls = 0) {
  Detection d;
  d.box = b;
  d.confidence = conf;
  d.class_id = cls;
  return d;
}

/// Returns a fixed list of canvas detections.
class ScriptedDetector final : public Detector {
 public:
  explicit ScriptedDetector(std::vector<Detection> out, bool fail = false) : out_(std::move(out)), fail_(fail) {}
  DetectorCapabilities capabilities() const override {
    DetectorCapabilities c;
    c.needs_pixels = false;
    return c;
  }
  std::vector<Detection> detect(const CanvasView&) override {
    if (fail_) throw DetectorError("scripted failure");
    return out_;
  }

 private:
  std::vector<Detection> out_;
  bool fail_;
};

Placement placement(int roi_id, int x, int y, int w, int h, double scale) {
  Placement p;
  p.roi_id = roi_id;
  p.pos_x = x;
  p.pos_y = y;
  p.placed_w = w;
  p.placed_h = h;
  p.scale = scale;
  return p;
}

/// Canvas 0 holds ROI 1 at (10,10) 50x50 scale 0.5 and ROI 2 at (70,10) 40x40 scale 1.
PackedCanvas two_roi_canvas() {
  PackedCanvas c;
  c.id = 0;
  c.side = 128;
  c.placements = {placement(1, 10, 10, 50, 50, 0.5), placement(2, 70, 10, 40, 40, 1.0)};
  return c;
}

}  // namespace

TEST(Assignment, CentreDecidesOwnerAndFillIsDiscarded) {
  const PackedCanvas c = two_roi_canvas();
  ScriptedDetector d({det({20, 20, 10, 10}), det({80, 20, 10, 10}), det({100, 100, 10, 10}),
                      det({55, 20, 20, 10})});  // last: centre at 65, between the two
  const auto res = run_packed_inference(c, nullptr, {}, d);
  EXPECT_EQ(res.returned, 4);
  EXPECT_EQ(res.discarded, 2);
  EXPECT_EQ(res.per_placement[0].size(), 1u);
  EXPECT_EQ(res.per_placement[1].size(), 1u);
}

TEST(Assignment, DetectorFailureIsRecorded) {
  ScriptedDetector d({}, true);
  const auto res = run_packed_inference(two_roi_canvas(), nullptr, {}, d);
  EXPECT_TRUE(res.failed);
  EXPECT_NE(res.error.find("scripted"), std::string::npos);
}

TEST(Reconstruct, MapsBackAndClips) {
  const PackedCanvas c = two_roi_canvas();
  ScriptedDetector d({det({20, 20, 10, 10}), det({100, 10, 10, 10})});
  const auto res = run_packed_inference(c, nullptr, {}, d);
  const std::map<int, RoiRef> rois{{1, {0, {100, 100, 100, 100}, 7}}, {2, {1, {590, 0, 40, 40}, 8}}};
  const std::vector<CanvasInference> all{res};
  const std::vector<PackedCanvas> canvases{c};
  const auto rec = reconstruct(all, canvases, rois, 600, 400);
  ASSERT_EQ(rec.by_frame.at(0).size(), 1u);
  // (20-10)/0.5 + 100 = 120, size 10/0.5 = 20
  EXPECT_EQ(rec.by_frame.at(0)[0].box, (Box{120, 120, 20, 20}));
  EXPECT_EQ(rec.by_frame.at(0)[0].track_id, 7);
  EXPECT_EQ(rec.by_frame.at(0)[0].space, CoordSpace::frame);
  // ROI 2 detection maps to x 620..630, outside a 600-wide frame
  EXPECT_EQ(rec.clipped, 1);
  EXPECT_FALSE(rec.by_frame.contains(1));
}

TEST(Reconstruct, NmsAcrossCanvasesButNotAcrossFrames) {
  PackedCanvas a;
  a.id = 0;
  a.side = 64;
  a.placements = {placement(1, 0, 0, 50, 50, 1.0)};
  PackedCanvas b = a;
  b.id = 1;
  b.placements = {placement(2, 0, 0, 50, 50, 1.0), placement(3, 0, 0, 50, 50, 1.0)};
  std::vector<CanvasInference> res(2);
  res[0].canvas_id = 0;
  res[0].per_placement = {{det({5, 5, 20, 20}, 0.8)}};
  res[1].canvas_id = 1;
  res[1].per_placement = {{det({5, 5, 20, 19}, 0.9)}, {det({5, 5, 20, 20}, 0.7)}};
  // ROIs 1 and 2 show frame 0; ROI 3 shows frame 1 at the same place
  const std::map<int, RoiRef> rois{{1, {0, {0, 0, 50, 50}, 1}}, {2, {0, {0, 0, 50, 50}, 2}}, {3, {1, {0, 0, 50, 50}, 3}}};
  const std::vector<PackedCanvas> canvases{a, b};
  const auto rec = reconstruct(res, canvases, rois, 100, 100);
  ASSERT_EQ(rec.by_frame.at(0).size(), 1u);
  EXPECT_DOUBLE_EQ(rec.by_frame.at(0)[0].confidence, 0.9);
  ASSERT_EQ(rec.by_frame.at(1).size(), 1u);
}

TEST(Reconstruct, UnknownIdsThrow) {
  std::vector<CanvasInference> res(1);
  res[0].canvas_id = 5;
  EXPECT_THROW(reconstruct(res, {}, {}, 10, 10), GeometryError);
}

TEST(Interpolation, LinearBetweenAnchors) {
  TrackHistory h;
  h[10] = det({100, 50, 20, 20}, 0.8);
  h[20] = det({110, 50, 30, 20}, 0.6);
  const auto d = interpolate_dropped(h, 14, 15);
  ASSERT_TRUE(d);
  EXPECT_DOUBLE_EQ(d->box.x, 104.0);
  EXPECT_DOUBLE_EQ(d->box.w, 24.0);
  EXPECT_TRUE(d->interpolated);
  EXPECT_NEAR(d->confidence, 0.6 * 0.9, 1e-12);
}

TEST(Interpolation, HoldAndLimits) {
  TrackHistory h;
  h[10] = det({100, 50, 20, 20}, 0.8);
  const auto hold = interpolate_dropped(h, 13, 15);
  ASSERT_TRUE(hold);
  EXPECT_EQ(hold->box, h[10].box);
  EXPECT_NEAR(hold->confidence, 0.72, 1e-12);
  // next anchor beyond the horizon: hold rather than interpolate
  h[40] = det({200, 50, 20, 20}, 0.8);
  EXPECT_EQ(interpolate_dropped(h, 13, 15)->box, h[10].box);
  // a real detection is returned untouched
  EXPECT_FALSE(interpolate_dropped(h, 10, 15)->interpolated);
  EXPECT_FALSE(interpolate_dropped(TrackHistory{}, 3, 15));
}

TEST(DetectionCsv, ParsesAndRejects) {
  const auto d = parse_detection_csv("# comment\n1,2,3,4,0,0.5\n\n5.5,6,7,8,2,0.25\r\n");
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[1].class_id, 2);
  EXPECT_DOUBLE_EQ(d[1].box.x, 5.5);
  EXPECT_THROW(parse_detection_csv("1,2,3,4,0\n"), DetectorError);
  EXPECT_THROW(parse_detection_csv("1,2,3,4,0,0.5,9\n"), DetectorError);
  EXPECT_THROW(parse_detection_csv("1,2,-3,4,0,0.5\n"), DetectorError);
  EXPECT_THROW(parse_detection_csv("1,2,3,4,0,1.5\n"), DetectorError);
  try {
    parse_detection_csv("1,2,3,4,0,0.5\nbad\n");
  } catch (const DetectorError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(External, RunsShellCommand) {
  TempDir dir;
  const auto script = dir.path() / "det.sh";
  {
    std::ofstream out(script);
    out << "#!/bin/sh\n"
        << "test -s \"$1\" || exit 3\n"
        << "head -c 2 \"$1\" | grep -q P5 || exit 4\n"
        << "echo 1,2,3,4,0,0.75\n";
  }
  std::filesystem::permissions(script, std::filesystem::perms::owner_all);
  ExternalDetector d("sh " + script.string(), dir.path() / "scratch");
  const GrayImage img = GrayImage::Constant(8, 8, 3);
  const auto out = d.detect(CanvasView{8, &img, {}});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_DOUBLE_EQ(out[0].confidence, 0.75);
  EXPECT_TRUE(std::filesystem::is_empty(dir.path() / "scratch"));

  ExternalDetector failing("false", dir.path() / "scratch");
  EXPECT_THROW(failing.detect(CanvasView{8, &img, {}}), DetectorError);
  EXPECT_THROW(d.detect(CanvasView{8, nullptr, {}}), DetectorError);
}
