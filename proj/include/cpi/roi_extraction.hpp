#pragma once

#include <Eigen/Core>

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "cpi/geometry.hpp"
#include "cpi/image.hpp"
#include "cpi/media_io.hpp"

namespace cpi {

struct ExtractionParams {
  int gap = 5;
  int noise_threshold = 25;
  int min_blob_area = 64;
  double dilate = 4.0;

  int features_per_roi = 16;
  int nms_radius = 4;
  double score_floor = 1e-4;

  int lk_window = 15;
  int lk_levels = 2;
  int lk_max_iterations = 10;
  double lk_epsilon = 0.01;
  double lost_residual = 20.0;
  int min_track_points = 3;

  double dedup_iou = 0.5;
  double merge_iou = 0.8;
};

enum class RoiSource : std::uint8_t { PD, OF, Probe };

inline constexpr int kFeatureCount = 7;
using FeatureVector = Eigen::Matrix<double, kFeatureCount, 1>;

/// Zero-cost per-ROI features, in model input order.
struct ExtractionFeatures {
  double area = 0.0;
  double max_edge = 0.0;
  double aspect = 0.0;
  double mean_shift = 0.0;
  double shift_std = 0.0;
  double tracking_error = 0.0;
  double shift_ncc = 0.0;

  FeatureVector as_vector() const;
  static ExtractionFeatures from_vector(const FeatureVector& v);
  /// Size features only; flow statistics left at zero (PD ROIs).
  static ExtractionFeatures from_box(const Box& box);
};

inline constexpr const char* kFeatureNames[kFeatureCount] = {
    "area", "max_edge", "aspect", "mean_shift", "shift_std", "tracking_error", "shift_ncc"};

struct Roi {
  int id = -1;
  int frame_index = 0;
  Box box;
  RoiSource source = RoiSource::PD;
  int track_id = -1;
  /// Undilated object box carried by OF tracks.
  Box track_box;
  ExtractionFeatures features;
  double last_detection_confidence = 1.0;
  int consecutive_drop_count = 0;
  /// Set by merging: the largest member scale, which the merged ROI must keep
  /// so no member ends up smaller than it would have alone.
  double min_scale = 0.0;
};

struct FeaturePoint {
  float x = 0.0f;
  float y = 0.0f;
  float score = 0.0f;
};

struct FlowResult {
  Eigen::Vector2f shift = Eigen::Vector2f::Zero();
  float residual = 0.0f;
  bool lost = false;
};

class ExtractionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pixel-difference extraction: absolute difference, noise threshold and
/// small-blob removal, outer border following, bounding boxes dilated and
/// clipped to the frame.
std::vector<Roi> pd_extract(const Frame& frame_t, const Frame& frame_past, const ExtractionParams& params);

/// Outer border of the 8-connected component containing `start`, traced with
/// Suzuki-Abe border following. `start` must be the component's first pixel
/// in raster order. Returned points are (x, y).
std::vector<Eigen::Vector2i> trace_outer_border(const Image<int>& labels, int label, Eigen::Vector2i start);

/// 8-connected component labelling of a binary mask; returns the label image
/// (0 = background) and the component count.
std::pair<Image<int>, int> label_components(const Image<std::uint8_t>& mask);

std::vector<FeaturePoint> select_features(const GrayImage& frame, const Box& region, int k,
                                          const ExtractionParams& params = {});

/// Structure-tensor minimum eigenvalue at (x, y) over a 3x3 window of 3x3
/// Sobel gradients, intensities scaled to [0, 1].
float shi_tomasi_score(const FloatImage& unit_image, int x, int y);

/// Image pyramid used by Lucas-Kanade; level 0 is full resolution.
struct Pyramid {
  std::vector<FloatImage> levels;
  static Pyramid build(const GrayImage& img, int levels);
};

std::vector<FlowResult> lucas_kanade(const Pyramid& prev, const Pyramid& cur, std::span<const FeaturePoint> points,
                                     const ExtractionParams& params = {});
std::vector<FlowResult> lucas_kanade(const GrayImage& prev, const GrayImage& cur,
                                     std::span<const FeaturePoint> points, const ExtractionParams& params = {});

/// Last confirmed box of a live track.
struct TrackSeed {
  int track_id = -1;
  Box box;
  double confidence = 1.0;
  int consecutive_drop_count = 0;
};

struct TrackOutcome {
  std::vector<Roi> rois;
  std::vector<int> dropped_tracks;
};

/// Propagate each track box from `prev` to `cur` by the median feature shift.
TrackOutcome of_track(const Pyramid& prev, const Pyramid& cur, const GrayImage& prev_image,
                      std::span<const TrackSeed> tracks, int frame_index, const ExtractionParams& params);
TrackOutcome of_track(const Frame& prev, const Frame& cur, std::span<const TrackSeed> tracks,
                      const ExtractionParams& params);

/// Shift statistics over surviving points; exposed for testing.
ExtractionFeatures flow_features(const Box& box, std::span<const Eigen::Vector2f> shifts,
                                 std::span<const float> residuals);

using ScaleOf = std::function<double(const Roi&)>;

/// Dedup PD ROIs against OF ROIs, then merge high-overlap pairs whose union
/// is cheaper after rescaling. Output ordered by descending area, then id.
std::vector<Roi> merge_rois(std::vector<Roi> pd, std::vector<Roi> of, const ExtractionParams& params,
                            const ScaleOf& scale_of = {});

}  // namespace cpi
