#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "cpi/pipeline.hpp"
#include "cpi/scale_estimation.hpp"
#include "cpi/synth.hpp"

namespace cpi {

/// Bad config text. `line` is 0 when the problem is not tied to one line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, int line = 0, std::string key = {})
      : std::runtime_error(what), line_(line), key_(std::move(key)) {}
  int line() const { return line_; }
  const std::string& key() const { return key_; }

 private:
  int line_;
  std::string key_;
};

enum class DetectorKind { oracle, external };

struct DetectorConfig {
  DetectorKind kind = DetectorKind::oracle;
  std::string command;                 // external only
  std::string scratch_dir = "canvases.tmp";
  double min_visible_fraction = 0.6;  // oracle only
};

struct TrainingConfig {
  int classes = 5;
  LabelParams label;
  TreeParams tree;
  CollectOptions collect;
};

struct PathsConfig {
  std::string frames;
  std::string annotations;
  std::string model;
  std::string output;
};

/// Everything one experiment needs. Line-oriented `key = value` under
/// `[section]` headers; `#` and `;` start comments. Keys before the first
/// header belong to the global section (`rng_seed`).
struct RunConfig {
  std::uint64_t rng_seed = 1;
  double source_fps = 30.0;  // for frame directories; synthetic scenes carry their own
  SceneConfig scene;
  PipelineConfig pipeline;
  TrainingConfig training;
  DetectorConfig detector;
  BaselineOptions baseline;
  PathsConfig paths;

  /// Push the global seed into every seeded component.
  void apply_seed(std::uint64_t seed);
  void validate() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Every section and key with its default value, in config syntax.
std::string config_reference();

}  // namespace cpi
