#include "cpi/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace cpi {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

struct BadValue : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename T>
T parse_number(const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw BadValue("not a number: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw BadValue("not a boolean: '" + v + "'");
}

std::vector<std::string> split(const std::string& v, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
std::string fmt_int(T v) {
  return std::to_string(v);
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

template <typename E, std::size_t N>
E parse_enum(const std::string& v, const EnumName<E> (&names)[N]) {
  std::string allowed;
  for (const auto& n : names) {
    if (v == n.name) return n.value;
    allowed += (allowed.empty() ? "" : "|") + std::string(n.name);
  }
  throw BadValue("'" + v + "' is not one of " + allowed);
}

template <typename E, std::size_t N>
std::string enum_name(E v, const EnumName<E> (&names)[N]) {
  for (const auto& n : names)
    if (n.value == v) return n.name;
  return "?";
}

constexpr EnumName<ClockMode> kClocks[] = {{ClockMode::simulated, "simulated"}, {ClockMode::wall, "wall"}};
constexpr EnumName<ScaleMode> kScaleModes[] = {{ScaleMode::predict, "predict"}, {ScaleMode::fixed, "fixed"}};
constexpr EnumName<Layout> kLayouts[] = {
    {Layout::packed, "packed"}, {Layout::per_roi, "per_roi"}, {Layout::tiles, "tiles"}};
constexpr EnumName<DetectorKind> kDetectors[] = {{DetectorKind::oracle, "oracle"},
                                                 {DetectorKind::external, "external"}};

struct Key {
  std::string section;
  std::string name;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

class Registry {
 public:
  explicit Registry(RunConfig& c) : c_(c) { build(); }

  const std::vector<Key>& keys() const { return keys_; }
  const Key* find(const std::string& section, const std::string& name) const {
    for (const auto& k : keys_)
      if (k.section == section && k.name == name) return &k;
    return nullptr;
  }
  bool has_section(const std::string& section) const {
    for (const auto& k : keys_)
      if (k.section == section) return true;
    return false;
  }

 private:
  template <typename T>
  void num(const char* sec, const char* name, T& ref) {
    keys_.push_back({sec, name, [&ref](const std::string& v) { ref = parse_number<T>(v); },
                     [&ref] {
                       if constexpr (std::is_floating_point_v<T>) return fmt(ref);
                       else return fmt_int(ref);
                     }});
  }
  void flag(const char* sec, const char* name, bool& ref) {
    keys_.push_back({sec, name, [&ref](const std::string& v) { ref = parse_bool(v); },
                     [&ref] { return fmt_bool(ref); }});
  }
  void text(const char* sec, const char* name, std::string& ref) {
    keys_.push_back({sec, name, [&ref](const std::string& v) { ref = v; }, [&ref] { return ref; }});
  }
  template <typename E, std::size_t N>
  void choice(const char* sec, const char* name, E& ref, const EnumName<E> (&names)[N]) {
    keys_.push_back({sec, name, [&ref, &names](const std::string& v) { ref = parse_enum(v, names); },
                     [&ref, &names] { return enum_name(ref, names); }});
  }

  void build() {
    keys_.push_back({"", "rng_seed", [this](const std::string& v) { c_.apply_seed(parse_number<std::uint64_t>(v)); },
                     [this] { return fmt_int(c_.rng_seed); }});
    num("", "source_fps", c_.source_fps);

    auto& x = c_.pipeline.extraction;
    num("extraction", "gap", x.gap);
    num("extraction", "noise_threshold", x.noise_threshold);
    num("extraction", "min_blob_area", x.min_blob_area);
    num("extraction", "dilate", x.dilate);
    num("extraction", "features_per_roi", x.features_per_roi);
    num("extraction", "nms_radius", x.nms_radius);
    num("extraction", "score_floor", x.score_floor);
    num("extraction", "lk_window", x.lk_window);
    num("extraction", "lk_levels", x.lk_levels);
    num("extraction", "lk_max_iterations", x.lk_max_iterations);
    num("extraction", "lk_epsilon", x.lk_epsilon);
    num("extraction", "lost_residual", x.lost_residual);
    num("extraction", "min_track_points", x.min_track_points);
    num("extraction", "dedup_iou", x.dedup_iou);
    num("extraction", "merge_iou", x.merge_iou);

    auto& p = c_.pipeline;
    auto& t = c_.training;
    choice("scale", "mode", p.scale_mode, kScaleModes);
    num("scale", "fixed_scale", p.fixed_scale);
    flag("scale", "probing", p.probing);
    num("scale", "classes", t.classes);
    num("scale", "margin", t.label.margin);
    num("scale", "sweep_steps", t.label.sweep_steps);
    num("scale", "min_step", t.label.min_step);
    num("scale", "max_depth", t.tree.max_depth);
    num("scale", "min_samples_leaf", t.tree.min_samples_leaf);
    num("scale", "min_samples", t.tree.min_samples);
    num("scale", "leaf_coverage", t.tree.leaf_coverage);
    // One intact rule for labeling and tuning.
    keys_.push_back({"scale", "intact_confidence",
                     [this](const std::string& v) {
                       c_.pipeline.intact.min_confidence = parse_number<double>(v);
                       c_.training.label.intact.min_confidence = c_.pipeline.intact.min_confidence;
                     },
                     [this] { return fmt(c_.pipeline.intact.min_confidence); }});
    keys_.push_back({"scale", "intact_iou",
                     [this](const std::string& v) {
                       c_.pipeline.intact.min_iou = parse_number<double>(v);
                       c_.training.label.intact.min_iou = c_.pipeline.intact.min_iou;
                     },
                     [this] { return fmt(c_.pipeline.intact.min_iou); }});
    num("scale", "collect_reseed_interval", t.collect.reseed_interval);
    num("scale", "collect_sample_interval", t.collect.sample_interval);

    keys_.push_back({"planning", "template_sides",
                     [this](const std::string& v) {
                       std::vector<int> sides;
                       for (const auto& s : split(v, ',')) sides.push_back(parse_number<int>(s));
                       c_.pipeline.template_sides = sides;
                     },
                     [this] {
                       std::string out;
                       for (int s : c_.pipeline.template_sides) out += (out.empty() ? "" : ", ") + std::to_string(s);
                       return out;
                     }});
    keys_.push_back({"planning", "latency_points",
                     [this](const std::string& v) {
                       const auto pts = split(v, ',');
                       if (pts.size() != 2) throw BadValue("expected two side:ms pairs");
                       std::pair<double, double> seed[2];
                       for (int i = 0; i < 2; ++i) {
                         const auto kv = split(pts[static_cast<std::size_t>(i)], ':');
                         if (kv.size() != 2) throw BadValue("expected side:ms, got '" + pts[i] + "'");
                         const double side = parse_number<double>(kv[0]);
                         seed[i] = {side * side, parse_number<double>(kv[1])};
                       }
                       try {
                         c_.pipeline.curve = PowerLawCurve::fit(seed[0], seed[1]);
                       } catch (const PlanningError& e) {
                         throw BadValue(e.what());
                       }
                       latency_points_ = v;
                     },
                     [this] { return latency_points_; }});
    num("planning", "ema_alpha", p.ema_alpha);
    num("planning", "noise_sigma", p.noise_sigma);

    num("packing", "border", p.border);
    num("packing", "low_confidence", p.low_confidence);
    keys_.push_back({"packing", "fill",
                     [this](const std::string& v) {
                       const int f = parse_number<int>(v);
                       if (f < 0 || f > 255) throw BadValue("fill must be in 0..255");
                       c_.pipeline.canvas_fill = static_cast<std::uint8_t>(f);
                     },
                     [this] { return std::to_string(c_.pipeline.canvas_fill); }});

    auto& d = c_.detector;
    choice("detector", "kind", d.kind, kDetectors);
    text("detector", "command", d.command);
    text("detector", "scratch_dir", d.scratch_dir);
    num("detector", "min_visible_fraction", d.min_visible_fraction);

    num("pipeline", "window_ms", p.window_ms);
    choice("pipeline", "clock", p.clock, kClocks);
    flag("pipeline", "emulate_latency", p.emulate_latency);
    flag("pipeline", "pipelined", p.pipelined);
    num("pipeline", "feedback_lag", p.feedback_lag);
    choice("pipeline", "layout", p.layout, kLayouts);
    num("pipeline", "tile_side", p.tile_side);
    flag("pipeline", "tile_fit", p.tile_fit);
    num("pipeline", "tiles_per_side", p.tiles_per_side);
    num("pipeline", "nms_iou", p.nms_iou);
    num("pipeline", "interpolation_discount", p.interpolation_discount);
    num("pipeline", "baseline_frame_side", c_.baseline.frame_side);
    flag("pipeline", "baseline_roi_full_scale", c_.baseline.roi_full_scale);

    auto& s = c_.scene;
    num("scene", "width", s.width);
    num("scene", "height", s.height);
    num("scene", "n_objects", s.n_objects);
    num("scene", "duration_frames", s.duration_frames);
    num("scene", "fps", s.fps);
    num("scene", "size_mean", s.size_mean);
    num("scene", "size_std", s.size_std);
    num("scene", "size_min", s.size_min);
    num("scene", "size_max", s.size_max);
    num("scene", "aspect_min", s.aspect_min);
    num("scene", "aspect_max", s.aspect_max);
    num("scene", "speed_min", s.speed_min);
    num("scene", "speed_max", s.speed_max);
    num("scene", "velocity_jitter", s.velocity_jitter);
    num("scene", "detectability_px_mean", s.detectability_px_mean);
    num("scene", "detectability_size_exponent", s.detectability_size_exponent);
    num("scene", "detectability_cv", s.detectability_cv);
    num("scene", "detectability_ratio_min", s.detectability_ratio_min);
    num("scene", "detectability_ratio_max", s.detectability_ratio_max);
    num("scene", "min_safe_edge", s.min_safe_edge);
    num("scene", "occlusion_per_100_frames", s.occlusion_per_100_frames);
    num("scene", "occlusion_length", s.occlusion_length);
    num("scene", "spawn_per_100_frames", s.spawn_per_100_frames);
    num("scene", "despawn_per_100_frames", s.despawn_per_100_frames);

    text("paths", "frames", c_.paths.frames);
    text("paths", "annotations", c_.paths.annotations);
    text("paths", "model", c_.paths.model);
    text("paths", "output", c_.paths.output);
  }

  RunConfig& c_;
  std::vector<Key> keys_;
  std::string latency_points_ = "320:30.9, 1920:694";
};

}  // namespace

void RunConfig::apply_seed(std::uint64_t seed) {
  rng_seed = seed;
  scene.rng_seed = seed;
  pipeline.rng_seed = seed;
}

void RunConfig::validate() const {
  if (!(source_fps > 0.0)) throw ConfigError("source_fps must be positive", 0, "source_fps");
  auto wrap = [](const char* section, const auto& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("[") + section + "] " + e.what());
    }
  };
  wrap("scene", [&] { scene.validate(); });
  wrap("pipeline", [&] { pipeline.validate(); });
  if (training.classes < 1) throw ConfigError("[scale] classes must be >= 1", 0, "classes");
  if (!(training.label.margin >= 0.0)) throw ConfigError("[scale] margin must be >= 0", 0, "margin");
  if (training.label.sweep_steps < 1 || training.label.min_step < 1 ||
      training.label.min_step > training.label.sweep_steps)
    throw ConfigError("[scale] need 1 <= min_step <= sweep_steps", 0, "min_step");
  if (!(training.tree.leaf_coverage >= 0.0 && training.tree.leaf_coverage <= 1.0))
    throw ConfigError("[scale] leaf_coverage must be in [0, 1]", 0, "leaf_coverage");
  if (training.collect.reseed_interval <= 0 || training.collect.sample_interval <= 0)
    throw ConfigError("[scale] collect intervals must be positive", 0, "collect_sample_interval");
  if (detector.kind == DetectorKind::external && detector.command.empty())
    throw ConfigError("[detector] kind = external needs a command", 0, "command");
  if (!(detector.min_visible_fraction > 0.0 && detector.min_visible_fraction <= 1.0))
    throw ConfigError("[detector] min_visible_fraction must be in (0, 1]", 0, "min_visible_fraction");
  if (baseline.frame_side <= 0) throw ConfigError("[pipeline] baseline_frame_side must be positive", 0,
                                                  "baseline_frame_side");
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  Registry reg(cfg);
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find_first_of("#;"); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto at = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(at + "malformed section header", line_no);
      section = trim(line.substr(1, line.size() - 2));
      if (!reg.has_section(section)) throw ConfigError(at + "unknown section [" + section + "]", line_no, section);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(at + "expected key = value", line_no);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string where = section.empty() ? key : section + "." + key;
    const Key* k = reg.find(section, key);
    if (!k) throw ConfigError(at + "unknown key '" + where + "'", line_no, where);
    try {
      k->set(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(at + where + ": " + e.what(), line_no, where);
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string(), 0, path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_reference() {
  RunConfig defaults;
  Registry reg(defaults);
  std::string out;
  std::string section = "\x01";
  for (const auto& k : reg.keys()) {
    if (k.section != section) {
      section = k.section;
      if (!section.empty()) out += (out.empty() ? "" : "\n") + std::string("[") + section + "]\n";
    }
    out += k.name + " = " + k.get() + "\n";
  }
  return out;
}

}  // namespace cpi
