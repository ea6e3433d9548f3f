#include "cpi/canvas_planning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cpi/rng.hpp"

namespace cpi {

namespace {

constexpr double kFeasEps = 1e-9;

int total_count(const std::vector<int>& x) { return std::accumulate(x.begin(), x.end(), 0); }

// Strict preference between two count vectors of equal objective: fewer
// canvases, then more of the larger templates.
bool preferred(const std::vector<int>& a, const std::vector<int>& b, const std::vector<std::size_t>& by_side_desc) {
  const int na = total_count(a);
  const int nb = total_count(b);
  if (na != nb) return na < nb;
  for (std::size_t i : by_side_desc)
    if (a[i] != b[i]) return a[i] > b[i];
  return false;
}

void validate(const std::vector<CanvasTemplate>& templates, double deadline) {
  if (templates.empty()) throw PlanningError("no canvas templates");
  if (!(deadline >= 0.0)) throw PlanningError("deadline must be non-negative");
  for (const auto& t : templates) {
    if (t.side <= 0) throw PlanningError("template side must be positive");
    if (!(t.latency_ms > 0.0)) throw PlanningError("template latency must be positive");
  }
}

CanvasPlan finish(const std::vector<CanvasTemplate>& templates, std::vector<int> counts, double deadline) {
  CanvasPlan p;
  p.deadline = deadline;
  for (std::size_t i = 0; i < templates.size(); ++i) {
    p.total_area += templates[i].area() * counts[i];
    p.total_latency += templates[i].latency_ms * counts[i];
  }
  p.counts = std::move(counts);
  return p;
}

std::vector<std::size_t> sides_descending(const std::vector<CanvasTemplate>& t) {
  std::vector<std::size_t> idx(t.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return t[a].side > t[b].side; });
  return idx;
}

struct BranchAndBound {
  const std::vector<CanvasTemplate>& templates;
  std::vector<std::size_t> order;  // descending density
  std::vector<std::size_t> by_side;
  std::vector<int> cur;
  std::vector<int> best;
  double best_area = -1.0;

  void consider(double area) {
    if (area > best_area || (area == best_area && preferred(cur, best, by_side))) {
      best_area = area;
      best = cur;
    }
  }

  void search(std::size_t depth, double remaining, double area) {
    if (depth == order.size()) {
      consider(area);
      return;
    }
    const auto& t = templates[order[depth]];
    const double density = t.area() / t.latency_ms;
    // Fractional relaxation: no remaining template is denser than this one.
    if (area + remaining * density < best_area - 0.5) return;
    const int max_n = static_cast<int>(std::floor((remaining + kFeasEps) / t.latency_ms));
    for (int n = max_n; n >= 0; --n) {
      cur[order[depth]] = n;
      search(depth + 1, remaining - n * t.latency_ms, area + n * t.area());
    }
    cur[order[depth]] = 0;
  }
};

}  // namespace

int CanvasPlan::canvas_count() const { return total_count(counts); }

CanvasPlan plan_canvases(const std::vector<CanvasTemplate>& templates, double deadline_ms) {
  validate(templates, deadline_ms);
  BranchAndBound bb{templates, {}, sides_descending(templates), std::vector<int>(templates.size(), 0), {}, -1.0};
  bb.order.resize(templates.size());
  std::iota(bb.order.begin(), bb.order.end(), 0);
  std::stable_sort(bb.order.begin(), bb.order.end(), [&](auto a, auto b) {
    return templates[a].area() / templates[a].latency_ms > templates[b].area() / templates[b].latency_ms;
  });
  bb.best = bb.cur;
  bb.search(0, deadline_ms, 0.0);
  return finish(templates, bb.best, deadline_ms);
}

CanvasPlan plan_canvases_brute_force(const std::vector<CanvasTemplate>& templates, double deadline_ms) {
  validate(templates, deadline_ms);
  const auto by_side = sides_descending(templates);
  std::vector<int> cur(templates.size(), 0);
  std::vector<int> best = cur;
  double best_area = 0.0;
  auto rec = [&](auto&& self, std::size_t i, double used, double area) -> void {
    if (i == templates.size()) {
      if (area > best_area || (area == best_area && preferred(cur, best, by_side))) {
        best_area = area;
        best = cur;
      }
      return;
    }
    for (int n = 0; used + n * templates[i].latency_ms <= deadline_ms + kFeasEps; ++n) {
      cur[i] = n;
      self(self, i + 1, used + n * templates[i].latency_ms, area + n * templates[i].area());
    }
    cur[i] = 0;
  };
  rec(rec, 0, 0.0, 0.0);
  return finish(templates, best, deadline_ms);
}

double PowerLawCurve::operator()(double area) const { return c * std::pow(area, b); }

PowerLawCurve PowerLawCurve::fit(std::pair<double, double> p0, std::pair<double, double> p1) {
  const auto [a0, l0] = p0;
  const auto [a1, l1] = p1;
  if (!(a0 > 0 && a1 > 0 && l0 > 0 && l1 > 0) || a0 == a1) throw PlanningError("invalid latency seed points");
  PowerLawCurve curve;
  curve.b = std::log(l1 / l0) / std::log(a1 / a0);
  if (!(curve.b > 0.0)) throw PlanningError("latency must grow with area");
  curve.c = l0 / std::pow(a0, curve.b);
  return curve;
}

PowerLawCurve default_latency_curve() { return PowerLawCurve::fit({320.0 * 320.0, 30.9}, {1920.0 * 1920.0, 694.0}); }

LatencyModel::LatencyModel(std::vector<int> sides, PowerLawCurve curve, double alpha, double noise_sigma,
                           std::uint64_t seed)
    : curve_(curve), alpha_(alpha), sigma_(noise_sigma), seed_(seed) {
  if (sides.empty()) throw PlanningError("no canvas templates");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw PlanningError("smoothing factor must be in (0, 1]");
  if (noise_sigma < 0.0) throw PlanningError("noise sigma must be non-negative");
  for (std::size_t i = 0; i < sides.size(); ++i) {
    if (sides[i] <= 0) throw PlanningError("template side must be positive");
    if (i > 0 && sides[i] <= sides[i - 1]) throw PlanningError("template sides must be strictly ascending");
    templates_.push_back({sides[i], curve_(static_cast<double>(sides[i]) * sides[i])});
  }
}

std::size_t LatencyModel::index_of(int side) const {
  for (std::size_t i = 0; i < templates_.size(); ++i)
    if (templates_[i].side == side) return i;
  throw PlanningError("unknown template side " + std::to_string(side));
}

void LatencyModel::update(int side, double observed_ms) {
  if (!(observed_ms > 0.0)) {
    ++rejected_;
    return;
  }
  const std::size_t i = index_of(side);
  const double old = templates_[i].latency_ms;
  const double updated = alpha_ * observed_ms + (1.0 - alpha_) * old;
  const double drift = updated / old;
  for (std::size_t j = 0; j < templates_.size(); ++j) templates_[j].latency_ms *= drift;
  templates_[i].latency_ms = updated;
}

double LatencyModel::simulate(int side) { return simulate(static_cast<double>(side) * side); }

double LatencyModel::simulate(double area) {
  const double base = curve_(area);
  const std::uint64_t n = calls_++;
  if (sigma_ == 0.0) return base;
  Rng rng(hash_combine({seed_, n}));
  return base * std::exp(sigma_ * rng.normal());
}

int max_template_side(const PowerLawCurve& curve, const std::vector<int>& candidate_sides, double tolerance) {
  if (candidate_sides.empty()) throw PlanningError("no candidate sides");
  const int largest = *std::max_element(candidate_sides.begin(), candidate_sides.end());
  auto throughput = [&](int s) {
    const double a = static_cast<double>(s) * s;
    return a / curve(a);
  };
  const double peak = throughput(largest);
  int best = largest;
  for (int s : candidate_sides)
    if (throughput(s) >= (1.0 - tolerance) * peak) best = std::min(best, s);
  return best;
}

}  // namespace cpi
