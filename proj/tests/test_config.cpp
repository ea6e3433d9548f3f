#include <gtest/gtest.h>

#include <fstream>

#include "cpi/config.hpp"
#include "test_util.hpp"

using namespace cpi;

namespace {

ConfigError error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e;
  }
  return ConfigError("no error");
}

}  // namespace

TEST(ConfigParse, EmptyTextGivesDefaults) {
  const RunConfig c = parse_config("");
  EXPECT_EQ(c.rng_seed, 1u);
  EXPECT_DOUBLE_EQ(c.pipeline.window_ms, 2000.0);
  EXPECT_EQ(c.pipeline.template_sides, kDefaultTemplateSides);
  EXPECT_EQ(c.training.classes, 5);
}

TEST(ConfigParse, SectionsCommentsAndEnums) {
  const RunConfig c = parse_config(
      "# experiment\n"
      "rng_seed = 9\n"
      "[pipeline]\n"
      "window_ms = 4000   ; longer windows\n"
      "clock = wall\n"
      "pipelined = true\n"
      "layout = tiles\n"
      "[scale]\n"
      "mode = fixed\n"
      "fixed_scale = 0.5\n"
      "intact_iou = 0.7\n"
      "[scene]\n"
      "n_objects = 3\n");
  EXPECT_EQ(c.rng_seed, 9u);
  EXPECT_EQ(c.scene.rng_seed, 9u);
  EXPECT_EQ(c.pipeline.rng_seed, 9u);
  EXPECT_DOUBLE_EQ(c.pipeline.window_ms, 4000.0);
  EXPECT_EQ(c.pipeline.clock, ClockMode::wall);
  EXPECT_TRUE(c.pipeline.pipelined);
  EXPECT_EQ(c.pipeline.layout, Layout::tiles);
  EXPECT_EQ(c.pipeline.scale_mode, ScaleMode::fixed);
  EXPECT_DOUBLE_EQ(c.pipeline.fixed_scale, 0.5);
  // one key drives both the runtime check and labeling
  EXPECT_DOUBLE_EQ(c.pipeline.intact.min_iou, 0.7);
  EXPECT_DOUBLE_EQ(c.training.label.intact.min_iou, 0.7);
  EXPECT_EQ(c.scene.n_objects, 3);
}

TEST(ConfigParse, ListsAndLatencyPoints) {
  const RunConfig c = parse_config(
      "[planning]\n"
      "template_sides = 256, 512\n"
      "latency_points = 256:20, 1024:200\n"
      "[packing]\n"
      "fill = 0\n");
  EXPECT_EQ(c.pipeline.template_sides, (std::vector<int>{256, 512}));
  EXPECT_NEAR(c.pipeline.curve(256.0 * 256.0), 20.0, 1e-9);
  EXPECT_NEAR(c.pipeline.curve(1024.0 * 1024.0), 200.0, 1e-9);
  EXPECT_EQ(c.pipeline.canvas_fill, 0);
}

TEST(ConfigParse, UnknownKeyNamesLine) {
  const auto e = error_of("[pipeline]\nwindow_ms = 100\nwindow_sz = 3\n");
  EXPECT_EQ(e.line(), 3);
  EXPECT_EQ(e.key(), "pipeline.window_sz");
  EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
}

TEST(ConfigParse, BadValuesRejected) {
  EXPECT_EQ(error_of("[pipeline]\nclock = sundial\n").line(), 2);
  EXPECT_EQ(error_of("[pipeline]\nwindow_ms = fast\n").line(), 2);
  EXPECT_EQ(error_of("[packing]\nfill = 300\n").line(), 2);
  EXPECT_EQ(error_of("[planning]\nlatency_points = 320:30\n").line(), 2);
  EXPECT_NE(std::string(error_of("[nowhere]\nx = 1\n").what()).find("unknown section"), std::string::npos);
  EXPECT_EQ(error_of("[pipeline]\njust words\n").line(), 2);
}

TEST(ConfigParse, ValidationAfterParse) {
  EXPECT_THROW(parse_config("[pipeline]\nwindow_ms = -5\n"), std::exception);
  EXPECT_THROW(parse_config("[planning]\ntemplate_sides = 640, 320\n"), std::exception);
}

TEST(ConfigParse, ReferenceRoundTrips) {
  const std::string ref = config_reference();
  EXPECT_NE(ref.find("[scale]"), std::string::npos);
  EXPECT_NE(ref.find("leaf_coverage = 0.9"), std::string::npos);
  const RunConfig c = parse_config(ref);
  const RunConfig d;
  EXPECT_EQ(c.pipeline.template_sides, d.pipeline.template_sides);
  EXPECT_DOUBLE_EQ(c.pipeline.curve.b, d.pipeline.curve.b);
  EXPECT_DOUBLE_EQ(c.scene.size_mean, d.scene.size_mean);
  EXPECT_EQ(config_reference(), ref);
}

TEST(ConfigParse, LoadFromFile) {
  TempDir dir;
  {
    std::ofstream out(dir.path() / "run.ini");
    out << "[paths]\nmodel = m.json\n";
  }
  EXPECT_EQ(load_config(dir.path() / "run.ini").paths.model, "m.json");
  EXPECT_THROW(load_config(dir.path() / "missing.ini"), ConfigError);
}
