#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cpi {

class PlanningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CanvasTemplate {
  int side = 0;
  double latency_ms = 0.0;

  double area() const { return static_cast<double>(side) * side; }
};

struct CanvasPlan {
  std::vector<int> counts;  // parallel to the template list
  double total_area = 0.0;
  double total_latency = 0.0;
  double deadline = 0.0;

  int canvas_count() const;
};

/// Exact unbounded integer knapsack: maximise sum(a_i x_i) subject to
/// sum(l_i x_i) <= deadline. Ties prefer fewer canvases, then larger templates.
CanvasPlan plan_canvases(const std::vector<CanvasTemplate>& templates, double deadline_ms);

/// Exhaustive enumeration, for small instances and tests.
CanvasPlan plan_canvases_brute_force(const std::vector<CanvasTemplate>& templates, double deadline_ms);

/// Latency as a power law of canvas area, l(a) = c * a^b.
struct PowerLawCurve {
  double c = 1.0;
  double b = 1.0;

  double operator()(double area) const;
  static PowerLawCurve fit(std::pair<double, double> p0, std::pair<double, double> p1);
};

/// Default seed points: 320x320 at 30.9 ms and 1920x1920 at 694 ms.
PowerLawCurve default_latency_curve();

class LatencyModel {
 public:
  LatencyModel(std::vector<int> sides, PowerLawCurve curve, double alpha = 0.3, double noise_sigma = 0.05,
               std::uint64_t seed = 0);

  const std::vector<CanvasTemplate>& templates() const { return templates_; }
  const PowerLawCurve& curve() const { return curve_; }
  double alpha() const { return alpha_; }
  int rejected_observations() const { return rejected_; }

  /// Exponential smoothing for the observed template; every other template is
  /// rescaled by the same drift factor. Non-positive observations are rejected.
  void update(int side, double observed_ms);

  /// Curve value times seeded log-normal noise; the n-th call draws from
  /// (seed, n) so replays are deterministic.
  double simulate(int side);
  double simulate(double area);

  std::size_t index_of(int side) const;

 private:
  std::vector<CanvasTemplate> templates_;
  PowerLawCurve curve_;
  double alpha_;
  double sigma_;
  std::uint64_t seed_;
  std::uint64_t calls_ = 0;
  int rejected_ = 0;
};

/// Smallest candidate side whose pixel throughput is within `tolerance` of the
/// throughput at the largest candidate.
int max_template_side(const PowerLawCurve& curve, const std::vector<int>& candidate_sides, double tolerance = 0.02);

inline const std::vector<int> kDefaultTemplateSides = {320, 640, 960, 1280};

}  // namespace cpi
