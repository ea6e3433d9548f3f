// cpi: generate scenes, label safe areas, train the scale model, run the
// packed pipeline and its baselines, and summarise reports.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "cpi/config.hpp"
#include "cpi/media_io.hpp"
#include "cpi/pipeline.hpp"
#include "cpi/scale_estimation.hpp"
#include "cpi/synth.hpp"

namespace fs = std::filesystem;
using namespace cpi;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string frames, annotations, model, out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "Config file (see `cpi config` for every key and default)");
  cmd->add_option("--seed", c.seed, "Global seed; overrides rng_seed from the config");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.apply_seed(*c.seed);
  if (!c.frames.empty()) cfg.paths.frames = c.frames;
  if (!c.annotations.empty()) cfg.paths.annotations = c.annotations;
  if (!c.model.empty()) cfg.paths.model = c.model;
  if (!c.out.empty()) cfg.paths.output = c.out;
  return cfg;
}

/// Frames either from a directory or from the [scene] section, rendered lazily.
struct Input {
  std::optional<Scene> scene;
  std::optional<FrameSequence> sequence;
  std::vector<GroundTruthRecord> truth;
  int count = 0;
  double fps = 30.0;

  FrameSource source() const {
    if (scene) return [this](int i) { return scene->render(i); };
    return [this](int i) {
      Frame f = sequence->load(static_cast<std::size_t>(i));
      if (f.index != i) throw MediaError("frame directory must be numbered from frame_000000");
      return f;
    };
  }
};

Input open_input(const RunConfig& cfg) {
  Input in;
  if (cfg.paths.frames.empty()) {
    in.scene.emplace(generate_scene(cfg.scene));
    in.truth = in.scene->truth();
    in.count = in.scene->frame_count();
    in.fps = cfg.scene.fps;
    return in;
  }
  in.sequence.emplace(cfg.paths.frames, cfg.source_fps);
  in.count = static_cast<int>(in.sequence->size());
  in.fps = cfg.source_fps;
  if (!cfg.paths.annotations.empty()) {
    const Frame f0 = in.sequence->load(0);
    in.truth = read_annotations(cfg.paths.annotations, f0.width(), f0.height());
  }
  return in;
}

std::unique_ptr<Detector> make_detector(const RunConfig& cfg, const Input& in) {
  if (cfg.detector.kind == DetectorKind::external)
    return std::make_unique<ExternalDetector>(cfg.detector.command, cfg.detector.scratch_dir);
  if (in.truth.empty())
    throw ConfigError("[detector] kind = oracle needs annotations with detectability (--annotations)", 0,
                      "annotations");
  return std::make_unique<OracleDetector>(in.truth, hash_combine({cfg.rng_seed, 0x4F52u}),
                                          cfg.detector.min_visible_fraction);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw MediaError("cannot write " + path.string());
  out << text;
}

fs::path require_out(const RunConfig& cfg) {
  if (cfg.paths.output.empty()) throw ConfigError("no output path (--out or [paths] output)", 0, "output");
  return cfg.paths.output;
}

// ---- subcommands ----

int cmd_synth(const Common& c) {
  const RunConfig cfg = resolve(c);
  const fs::path out = require_out(cfg);
  const Scene scene = generate_scene(cfg.scene);
  scene.write(out);
  std::printf("wrote %d frames, %zu objects, %zu truth records to %s\n", scene.frame_count(), scene.objects().size(),
              scene.truth().size(), out.c_str());
  return 0;
}

int cmd_label(const Common& c) {
  const RunConfig cfg = resolve(c);
  const fs::path out = require_out(cfg);
  const Input in = open_input(cfg);
  auto detector = make_detector(cfg, in);
  const FrameSource src = in.source();

  const auto rois = collect_training_rois(src, in.count, *detector, cfg.pipeline.extraction, cfg.training.collect);
  std::map<int, GrayImage> cache;
  const FrameProvider provider = [&](int f) -> const GrayImage& {
    auto it = cache.find(f);
    if (it == cache.end()) it = cache.emplace(f, src(f).pixels).first;
    return it->second;
  };
  const auto result = label_safe_areas(rois, *detector, cfg.training.label, provider);
  write_labels_csv(out, result.labels);
  std::printf("%zu ROIs collected, %zu labeled, %d without a reference detection\n", rois.size(),
              result.labels.size(), result.excluded_no_reference);
  return 0;
}

int cmd_train(const Common& c, const std::string& labels_path) {
  const RunConfig cfg = resolve(c);
  const fs::path out = require_out(cfg);
  const auto labels = read_labels_csv(labels_path);
  const ScaleModel model = train_tree(labels, cfg.training.classes, cfg.training.tree, cfg.training.label.margin);
  save_model(out, model);
  std::printf("trained on %zu labels, depth %d\nboundaries:", labels.size(), model.tree.depth());
  for (double b : model.class_boundaries) std::printf(" %.0f", b);
  std::printf("\ntargets:");
  for (double t : model.class_target_areas) std::printf(" %.0f", t);
  std::printf("\n");
  return 0;
}

std::optional<ScaleModel> model_for(const RunConfig& cfg) {
  if (cfg.pipeline.scale_mode != ScaleMode::predict) return std::nullopt;
  if (cfg.paths.model.empty())
    throw ConfigError("[scale] mode = predict needs a model file (--model or [paths] model)", 0, "model");
  if (!fs::exists(cfg.paths.model))
    throw ConfigError("model file not found: " + cfg.paths.model, 0, cfg.paths.model);
  return load_model(cfg.paths.model);
}

void write_outputs(const fs::path& out, const RunResult& run, ClockMode clock, std::optional<double> ap, bool csv) {
  fs::create_directories(out);
  write_results(out / "detections.jsonl", run.detections);
  write_text(out / "report.json", report_json(run, clock, ap));
  if (csv) write_text(out / "report.csv", report_csv(run));
}

int cmd_run(const Common& c, bool csv, const std::string& dump_dir) {
  const RunConfig cfg = resolve(c);
  const fs::path out = require_out(cfg);
  auto model = model_for(cfg);
  const Input in = open_input(cfg);
  auto detector = make_detector(cfg, in);

  Pipeline pipeline(cfg.pipeline, *detector, std::move(model));
  if (!dump_dir.empty()) {
    fs::create_directories(dump_dir);
    pipeline.set_canvas_sink([&](int window, const PackedCanvas& canvas, const GrayImage& image) {
      char name[64];
      std::snprintf(name, sizeof name, "w%04d_c%03d_%d.pgm", window, canvas.id, canvas.side);
      write_canvas_dump(fs::path(dump_dir) / name, image, canvas.placements);
    });
  }
  const RunResult run = pipeline.run(in.source(), in.count, in.fps);
  std::optional<double> ap;
  if (!in.truth.empty()) ap = compute_ap(run.detections, in.truth);
  write_outputs(out, run, cfg.pipeline.clock, ap, csv);

  std::printf("%d frames in %zu windows", in.count, run.windows.size());
  if (ap) std::printf(", AP50 %.4f", *ap);
  if (cfg.pipeline.clock == ClockMode::simulated && !run.windows.empty())
    std::printf(", simulated %.2f FPS", compute_throughput(run.windows, ClockMode::simulated));
  std::printf(", %.3g pixels\n", total_pixels(run.windows));
  return 0;
}

int cmd_baseline(const Common& c, const std::string& mode_name, bool csv) {
  static const std::map<std::string, BaselineMode> modes = {{"frame_wise", BaselineMode::frame_wise},
                                                            {"roi_wise", BaselineMode::roi_wise},
                                                            {"emulated_batch", BaselineMode::emulated_batch}};
  const RunConfig cfg = resolve(c);
  const fs::path out = require_out(cfg);
  const Input in = open_input(cfg);
  if (in.truth.empty()) throw ConfigError("baselines need annotations (--annotations)", 0, "annotations");
  auto detector = make_detector(cfg, in);
  const BaselineMode mode = modes.at(mode_name);
  const BaselineResult r =
      run_baseline(mode, cfg.pipeline, *detector, in.source(), in.count, in.fps, in.truth, cfg.baseline);
  write_outputs(out, r.run, cfg.pipeline.clock, r.ap, csv);
  std::printf("%s: AP50 %.4f, %.2f FPS, %.3g pixels\n", baseline_name(mode), r.ap, r.fps, r.pixels);
  return 0;
}

std::string number(const nlohmann::json& v) {
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v.get<double>());
    return buf;
  }
  return v.is_string() ? v.get<std::string>() : v.dump();
}

int cmd_report(const std::vector<std::string>& inputs) {
  for (const auto& path : inputs) {
    std::ifstream f(path);
    if (!f) throw MediaError("cannot open " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw MediaError(path + ": " + e.what());
    }
    std::printf("== %s\n", path.c_str());
    for (const auto& [k, v] : j.at("aggregate").items()) std::printf("  %-16s %s\n", k.c_str(), number(v).c_str());
    if (j.contains("timing")) std::printf("  %-16s %s\n", "wall_seconds", number(j["timing"]["wall_seconds"]).c_str());
    std::printf("\n  %6s %7s %7s %7s %7s %7s %8s %10s %10s\n", "window", "frames", "merged", "packed", "dropped",
                "probes", "canvases", "planned", "inference");
    for (const auto& w : j.at("windows")) {
      std::printf("  %6d %7d %7d %7d %7d %7d %8zu %10.1f %10.1f\n", w.at("window").get<int>(),
                  w.at("frames").get<int>(), w.at("rois_merged").get<int>(), w.at("packed").get<int>(),
                  w.at("dropped").get<int>(), w.at("probes_requested").get<int>(), w.at("canvases").size(),
                  w.at("planned_latency_ms").get<double>(), w.at("inference_ms").get<double>());
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compressive packed inference: ROI extraction, safe-area scaling and canvas packing"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene (frames + annotations.csv)");
  add_common(synth, common);
  synth->add_option("-o,--out", common.out, "Output directory");

  auto* label = app.add_subcommand("label", "Collect ROIs and write safe-area labels as CSV");
  add_common(label, common);
  label->add_option("--frames", common.frames, "Frame directory (default: the [scene] section, in memory)");
  label->add_option("--annotations", common.annotations, "Annotations CSV (oracle detector)");
  label->add_option("-o,--out", common.out, "Labels CSV to write");

  std::string labels_path;
  auto* train = app.add_subcommand("train", "Train the scale model from a labels CSV");
  add_common(train, common);
  train->add_option("--labels", labels_path, "Labels CSV")->required()->check(CLI::ExistingFile);
  train->add_option("-o,--out", common.out, "Model JSON to write");

  bool csv = false;
  std::string dump_dir;
  auto* run = app.add_subcommand("run", "Run the packed pipeline");
  add_common(run, common);
  run->add_option("--frames", common.frames, "Frame directory (default: the [scene] section, in memory)");
  run->add_option("--annotations", common.annotations, "Annotations CSV (oracle detector, AP)");
  run->add_option("--model", common.model, "Scale model JSON");
  run->add_option("-o,--out", common.out, "Output directory");
  run->add_flag("--csv", csv, "Also write report.csv");
  run->add_option("--dump-canvases", dump_dir, "Write every canvas as PGM with placements outlined");

  std::string mode = "frame_wise";
  auto* baseline = app.add_subcommand("baseline", "Run a baseline");
  add_common(baseline, common);
  baseline->add_option("--mode", mode, "frame_wise | roi_wise | emulated_batch")
      ->check(CLI::IsMember({"frame_wise", "roi_wise", "emulated_batch"}))
      ->capture_default_str();
  baseline->add_option("--frames", common.frames, "Frame directory (default: the [scene] section, in memory)");
  baseline->add_option("--annotations", common.annotations, "Annotations CSV");
  baseline->add_option("-o,--out", common.out, "Output directory");
  baseline->add_flag("--csv", csv, "Also write report.csv");

  std::vector<std::string> reports;
  auto* report = app.add_subcommand("report", "Print report JSON files as tables");
  report->add_option("inputs", reports, "report.json files")->required()->check(CLI::ExistingFile);

  auto* config = app.add_subcommand("config", "Print every config key with its default value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    if (app.got_subcommand(run) || app.got_subcommand(label) || app.got_subcommand(baseline) ||
        app.got_subcommand(synth) || app.got_subcommand(train))
      std::cout << "\nConfig keys and defaults:\n" << config_reference();
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (app.got_subcommand(synth)) return cmd_synth(common);
    if (app.got_subcommand(label)) return cmd_label(common);
    if (app.got_subcommand(train)) return cmd_train(common, labels_path);
    if (app.got_subcommand(run)) return cmd_run(common, csv, dump_dir);
    if (app.got_subcommand(baseline)) return cmd_baseline(common, mode, csv);
    if (app.got_subcommand(report)) return cmd_report(reports);
    if (app.got_subcommand(config)) {
      std::cout << config_reference();
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}
