#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <vector>

#include "cpi/detector.hpp"
#include "cpi/media_io.hpp"
#include "cpi/rng.hpp"

namespace cpi {

/// Parameters of a synthetic scene. Object areas are log-normal with the
/// given mean/std and clamped to [size_min, size_max]. Each object's
/// detectability area starts from a pixel target that grows with object size,
///   detectability_px_mean * (area / size_mean)^detectability_size_exponent,
/// times log-normal noise with unit mean and coefficient of variation
/// `detectability_cv`. It is then converted to a ratio of the object area, clamped to [detectability_ratio_min, detectability_ratio_max]
/// and floored so that the short edge at the safe scale is at least
/// `min_safe_edge` pixels.
struct SceneConfig {
  int width = 1280;
  int height = 720;
  int n_objects = 20;
  int duration_frames = 300;
  double fps = 30.0;

  double size_mean = 9355.0;
  double size_std = 9390.0;
  double size_min = 600.0;
  double size_max = 60000.0;
  double aspect_min = 0.5;  // w / h
  double aspect_max = 1.5;

  double speed_min = 1.0;  // pixels per frame
  double speed_max = 3.0;
  double velocity_jitter = 0.25;

  double detectability_px_mean = 900.0;
  double detectability_size_exponent = 0.5;
  double detectability_cv = 0.3;
  double detectability_ratio_min = 0.02;
  double detectability_ratio_max = 0.5;
  double min_safe_edge = 16.0;

  double occlusion_per_100_frames = 0.2;
  int occlusion_length = 15;
  double spawn_per_100_frames = 0.0;
  double despawn_per_100_frames = 0.0;

  std::uint64_t rng_seed = 1;

  void validate() const;
};

struct OracleObject {
  int track_id = 0;
  int first_frame = 0;
  std::vector<Box> trajectory;  // trajectory[i] is the box at first_frame + i
  std::uint64_t texture_seed = 0;
  double detectability_area = 0.0;
  std::set<int> occluded_frames;

  int last_frame() const { return first_frame + static_cast<int>(trajectory.size()) - 1; }
  bool alive_at(int frame) const { return frame >= first_frame && frame <= last_frame(); }
  const Box& box_at(int frame) const { return trajectory.at(static_cast<std::size_t>(frame - first_frame)); }
  double detectability_at(int frame) const {
    return occluded_frames.contains(frame) ? 2.0 * detectability_area : detectability_area;
  }
};

/// A generated scene. Truth is materialised eagerly; frames are rendered on
/// demand so long scenes stay cheap to hold.
class Scene {
 public:
  Scene(SceneConfig config, std::vector<OracleObject> objects);

  const SceneConfig& config() const { return config_; }
  int frame_count() const { return config_.duration_frames; }
  const std::vector<OracleObject>& objects() const { return objects_; }

  Frame render(int frame_index) const;
  const std::vector<GroundTruthRecord>& truth() const { return truth_; }
  std::vector<GroundTruthRecord> truth_at(int frame_index) const;

  /// Write frames as PGM plus annotations.csv into `dir`.
  void write(const std::filesystem::path& dir) const;

 private:
  void blit(GrayImage& img, const OracleObject& obj, const Box& box) const;

  SceneConfig config_;
  std::vector<OracleObject> objects_;
  std::vector<GroundTruthRecord> truth_;
  std::map<int, std::pair<std::size_t, std::size_t>> truth_ranges_;
  GrayImage background_;
};

Scene generate_scene(const SceneConfig& config);

/// Sample one object area from the scene's size distribution.
double sample_object_area(const SceneConfig& config, Rng& rng);

/// Closed-form oracle detector driven by ground truth with detectability.
///
/// For each placement, every truth object of that frame with at least
/// `min_visible_fraction` of its area inside the ROI is considered drawn. It
/// is detected iff its scaled on-canvas area reaches its detectability area;
/// confidence is 0.3 at the boundary and grows by 0.6 per unit of excess
/// ratio, capped at 0.99. Boxes carry seeded +-1 px jitter per edge.
class OracleDetector final : public Detector {
 public:
  explicit OracleDetector(std::vector<GroundTruthRecord> truth, std::uint64_t seed = 0,
                          double min_visible_fraction = 0.6);

  DetectorCapabilities capabilities() const override;
  std::vector<Detection> detect(const CanvasView& canvas) override;

  static double confidence_for(double scaled_area, double detectability_area);

 private:
  std::map<int, std::vector<GroundTruthRecord>> by_frame_;
  std::uint64_t seed_;
  double min_visible_fraction_;
};

}  // namespace cpi
