#include "cpi/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cpi/rng.hpp"

namespace cpi {

namespace {

constexpr int kTextureBlock = 2;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("scene config: ") + what);
}

}  // namespace

void SceneConfig::validate() const {
  require(width > 0 && height > 0, "width and height must be positive");
  require(n_objects >= 0 && duration_frames >= 0, "n_objects and duration_frames must be >= 0");
  require(fps > 0.0, "fps must be positive");
  require(size_mean > 0.0 && size_std >= 0.0, "size mean/std");
  require(size_min > 0.0 && size_min <= size_max, "size range");
  require(aspect_min > 0.0 && aspect_min <= aspect_max, "aspect range");
  require(speed_min >= 0.0 && speed_min <= speed_max, "speed range");
  require(velocity_jitter >= 0.0, "velocity jitter");
  require(detectability_px_mean > 0.0 && detectability_cv >= 0.0, "detectability pixel target");
  require(std::isfinite(detectability_size_exponent), "detectability_size_exponent");
  require(detectability_ratio_min > 0.0 && detectability_ratio_min <= detectability_ratio_max &&
              detectability_ratio_max <= 1.0,
          "detectability_ratio range must lie in (0, 1]");
  require(min_safe_edge >= 0.0, "min_safe_edge");
  require(occlusion_per_100_frames >= 0.0 && occlusion_length >= 0, "occlusion");
  require(spawn_per_100_frames >= 0.0 && despawn_per_100_frames >= 0.0, "spawn/despawn rates");
}

double sample_object_area(const SceneConfig& c, Rng& rng) {
  const double a = c.size_std > 0.0 ? rng.lognormal_by_moments(c.size_mean, c.size_std) : c.size_mean;
  return std::clamp(a, c.size_min, c.size_max);
}

namespace {

OracleObject spawn_object(const SceneConfig& c, Rng& rng, int track_id, int first_frame) {
  OracleObject o;
  o.track_id = track_id;
  o.first_frame = first_frame;
  o.texture_seed = rng.bits();

  const double area = sample_object_area(c, rng);
  const double aspect = rng.uniform(c.aspect_min, c.aspect_max);
  double w = std::round(std::sqrt(area * aspect));
  double h = std::round(std::sqrt(area / aspect));
  w = std::clamp(w, 4.0, static_cast<double>(c.width - 2));
  h = std::clamp(h, 4.0, static_cast<double>(c.height - 2));
  const double real_area = w * h;

  const double noise = c.detectability_cv > 0.0 ? rng.lognormal_by_moments(1.0, c.detectability_cv) : 1.0;
  const double target =
      c.detectability_px_mean * std::pow(real_area / c.size_mean, c.detectability_size_exponent) * noise;
  const double ratio = std::clamp(target / real_area, c.detectability_ratio_min, c.detectability_ratio_max);
  const double edge_floor = c.min_safe_edge * c.min_safe_edge * std::max(w / h, h / w);
  o.detectability_area = std::min(real_area, std::max(ratio * real_area, edge_floor));

  double x = rng.uniform(0.0, c.width - w);
  double y = rng.uniform(0.0, c.height - h);
  const double speed = rng.uniform(c.speed_min, c.speed_max);
  const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
  double vx = speed * std::cos(heading);
  double vy = speed * std::sin(heading);

  int occluded_left = 0;
  for (int f = first_frame; f < c.duration_frames; ++f) {
    if (f > first_frame) {
      x += vx + rng.uniform(-c.velocity_jitter, c.velocity_jitter);
      y += vy + rng.uniform(-c.velocity_jitter, c.velocity_jitter);
      if (x < 0.0) { x = -x; vx = std::abs(vx); }
      if (y < 0.0) { y = -y; vy = std::abs(vy); }
      if (x > c.width - w) { x = 2.0 * (c.width - w) - x; vx = -std::abs(vx); }
      if (y > c.height - h) { y = 2.0 * (c.height - h) - y; vy = -std::abs(vy); }
      x = std::clamp(x, 0.0, c.width - w);
      y = std::clamp(y, 0.0, c.height - h);
      if (rng.bernoulli(c.despawn_per_100_frames / 100.0)) break;
    }
    // Truth boxes are the rendered pixel rectangles.
    o.trajectory.push_back({static_cast<double>(round_half_up(x)), static_cast<double>(round_half_up(y)), w, h});
    if (occluded_left > 0) {
      o.occluded_frames.insert(f);
      --occluded_left;
    } else if (c.occlusion_length > 0 && rng.bernoulli(c.occlusion_per_100_frames / 100.0)) {
      occluded_left = c.occlusion_length;
    }
  }
  return o;
}

}  // namespace

Scene generate_scene(const SceneConfig& config) {
  config.validate();
  Rng rng(config.rng_seed);
  std::vector<OracleObject> objects;
  int next_id = 1;
  if (config.duration_frames > 0) {
    for (int i = 0; i < config.n_objects; ++i) objects.push_back(spawn_object(config, rng, next_id++, 0));
    Rng spawn_rng(hash_combine({config.rng_seed, 0x5350u}));
    for (int f = 1; f < config.duration_frames; ++f) {
      if (spawn_rng.bernoulli(config.spawn_per_100_frames / 100.0)) {
        objects.push_back(spawn_object(config, spawn_rng, next_id++, f));
      }
    }
  }
  return Scene(config, std::move(objects));
}

Scene::Scene(SceneConfig config, std::vector<OracleObject> objects)
    : config_(std::move(config)), objects_(std::move(objects)) {
  Rng bg(hash_combine({config_.rng_seed, 0xB6u}));
  background_ = GrayImage(config_.height, config_.width);
  for (Eigen::Index i = 0; i < background_.size(); ++i) {
    background_.data()[i] = static_cast<std::uint8_t>(48 + bg.uniform_int(0, 24));
  }
  for (int f = 0; f < config_.duration_frames; ++f) {
    const std::size_t begin = truth_.size();
    for (const auto& o : objects_) {
      if (!o.alive_at(f)) continue;
      truth_.push_back({f, o.track_id, o.box_at(f), 0, o.detectability_at(f)});
    }
    truth_ranges_[f] = {begin, truth_.size()};
  }
}

std::vector<GroundTruthRecord> Scene::truth_at(int frame_index) const {
  auto it = truth_ranges_.find(frame_index);
  if (it == truth_ranges_.end()) return {};
  return {truth_.begin() + static_cast<std::ptrdiff_t>(it->second.first),
          truth_.begin() + static_cast<std::ptrdiff_t>(it->second.second)};
}

void Scene::blit(GrayImage& img, const OracleObject& obj, const Box& box) const {
  const int x0 = static_cast<int>(box.x);
  const int y0 = static_cast<int>(box.y);
  const int w = static_cast<int>(box.w);
  const int h = static_cast<int>(box.h);
  const int bw = (w + kTextureBlock - 1) / kTextureBlock;
  // Texture is a pure function of the object's seed and block index.
  for (int r = 0; r < h; ++r) {
    const int yy = y0 + r;
    if (yy < 0 || yy >= img.rows()) continue;
    for (int c = 0; c < w; ++c) {
      const int xx = x0 + c;
      if (xx < 0 || xx >= img.cols()) continue;
      const auto block = static_cast<std::uint64_t>((r / kTextureBlock) * bw + c / kTextureBlock);
      const std::uint64_t hv = splitmix64(obj.texture_seed ^ (block * 0x9E3779B97F4A7C15ull));
      img(yy, xx) = static_cast<std::uint8_t>(120 + hv % 136);
    }
  }
}

Frame Scene::render(int frame_index) const {
  if (frame_index < 0 || frame_index >= config_.duration_frames) {
    throw std::out_of_range("frame index outside scene");
  }
  Frame f;
  f.index = frame_index;
  f.timestamp = frame_index / config_.fps;
  f.pixels = background_;
  for (const auto& o : objects_) {
    if (o.alive_at(frame_index)) blit(f.pixels, o, o.box_at(frame_index));
  }
  return f;
}

void Scene::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (int f = 0; f < config_.duration_frames; ++f) write_pgm(dir / frame_file_name(f), render(f).pixels);
  write_annotations(dir / "annotations.csv", truth_);
}

OracleDetector::OracleDetector(std::vector<GroundTruthRecord> truth, std::uint64_t seed,
                               double min_visible_fraction)
    : seed_(seed), min_visible_fraction_(min_visible_fraction) {
  for (auto& r : truth) by_frame_[r.frame_index].push_back(r);
}

DetectorCapabilities OracleDetector::capabilities() const {
  DetectorCapabilities caps;
  caps.needs_pixels = false;
  return caps;
}

double OracleDetector::confidence_for(double scaled_area, double detectability_area) {
  // Floored at 0.3: anything the oracle reports sits on or above the boundary.
  return std::clamp(0.3 + 0.6 * (scaled_area / detectability_area - 1.0), 0.3, 0.99);
}

std::vector<Detection> OracleDetector::detect(const CanvasView& canvas) {
  constexpr double kRelTol = 1e-9;
  std::vector<Detection> out;
  for (const PlacedRoi& pr : canvas.placements) {
    auto it = by_frame_.find(pr.frame_index);
    if (it == by_frame_.end()) continue;
    const Placement& p = pr.placement;
    for (const GroundTruthRecord& g : it->second) {
      if (!g.detectability_area) continue;
      const Box visible = intersect(g.box, pr.roi_box);
      if (visible.area() <= 0.0 || visible.area() < min_visible_fraction_ * g.box.area()) continue;
      const double scaled_area = visible.area() * p.scale * p.scale;
      if (scaled_area < *g.detectability_area * (1.0 - kRelTol)) continue;

      Box cb = frame_to_canvas(visible, p, pr.roi_box);
      Rng jitter(hash_combine({seed_, static_cast<std::uint64_t>(pr.frame_index),
                               static_cast<std::uint64_t>(g.track_id), static_cast<std::uint64_t>(p.pos_x),
                               static_cast<std::uint64_t>(p.pos_y),
                               static_cast<std::uint64_t>(std::llround(p.scale * 1e6))}));
      const double dx0 = jitter.uniform(-1.0, 1.0);
      const double dy0 = jitter.uniform(-1.0, 1.0);
      const double dx1 = jitter.uniform(-1.0, 1.0);
      const double dy1 = jitter.uniform(-1.0, 1.0);
      double x0 = cb.x + dx0, y0 = cb.y + dy0, x1 = cb.right() + dx1, y1 = cb.bottom() + dy1;
      const Box placed = p.placed_rect();
      x0 = std::clamp(x0, placed.x, placed.right());
      x1 = std::clamp(x1, placed.x, placed.right());
      y0 = std::clamp(y0, placed.y, placed.bottom());
      y1 = std::clamp(y1, placed.y, placed.bottom());
      if (x1 - x0 <= 0.0 || y1 - y0 <= 0.0) continue;

      Detection d;
      d.box = {x0, y0, x1 - x0, y1 - y0};
      d.class_id = g.class_id;
      d.confidence = confidence_for(scaled_area, *g.detectability_area);
      d.space = CoordSpace::canvas;
      out.push_back(d);
    }
  }
  return out;
}

}  // namespace cpi
