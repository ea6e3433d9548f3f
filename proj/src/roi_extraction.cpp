#include "cpi/roi_extraction.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cpi {

FeatureVector ExtractionFeatures::as_vector() const {
  FeatureVector v;
  v << area, max_edge, aspect, mean_shift, shift_std, tracking_error, shift_ncc;
  return v;
}

ExtractionFeatures ExtractionFeatures::from_vector(const FeatureVector& v) {
  return {v(0), v(1), v(2), v(3), v(4), v(5), v(6)};
}

ExtractionFeatures ExtractionFeatures::from_box(const Box& box) {
  ExtractionFeatures f;
  f.area = box.w * box.h;
  f.max_edge = std::max(box.w, box.h);
  f.aspect = box.w / box.h;
  return f;
}

// ---------------------------------------------------------------------------
// Pixel difference extraction

namespace {

// Clockwise neighbour order in image coordinates (y grows downwards).
constexpr int kDx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
constexpr int kDy[8] = {0, 1, 1, 1, 0, -1, -1, -1};

int direction_of(const Eigen::Vector2i& from, const Eigen::Vector2i& to) {
  const int dx = to.x() - from.x();
  const int dy = to.y() - from.y();
  for (int d = 0; d < 8; ++d)
    if (kDx[d] == dx && kDy[d] == dy) return d;
  return -1;
}

}  // namespace

std::pair<Image<int>, int> label_components(const Image<std::uint8_t>& mask) {
  const int h = static_cast<int>(mask.rows());
  const int w = static_cast<int>(mask.cols());
  Image<int> labels = Image<int>::Zero(h, w);
  const std::uint8_t* m = mask.data();
  int* lab = labels.data();
  int count = 0;
  std::vector<int> stack;
  for (int i = 0; i < w * h; ++i) {
    if (!m[i] || lab[i]) continue;
    lab[i] = ++count;
    stack.assign(1, i);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int px = p % w;
      const int py = p / w;
      for (int d = 0; d < 8; ++d) {
        const int nx = px + kDx[d];
        const int ny = py + kDy[d];
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
        const int q = ny * w + nx;
        if (m[q] && !lab[q]) {
          lab[q] = count;
          stack.push_back(q);
        }
      }
    }
  }
  return {std::move(labels), count};
}

std::vector<Eigen::Vector2i> trace_outer_border(const Image<int>& labels, int label, Eigen::Vector2i start) {
  const auto inside = [&](const Eigen::Vector2i& p) {
    return p.x() >= 0 && p.y() >= 0 && p.x() < labels.cols() && p.y() < labels.rows() && labels(p.y(), p.x()) == label;
  };
  const auto neighbour = [](const Eigen::Vector2i& p, int d) { return Eigen::Vector2i(p.x() + kDx[d], p.y() + kDy[d]); };

  std::vector<Eigen::Vector2i> border;
  // Clockwise search from the west neighbour, which is background for an outer border start.
  int first_dir = -1;
  for (int k = 0; k < 8; ++k) {
    const int d = (4 + k) % 8;
    if (inside(neighbour(start, d))) {
      first_dir = d;
      break;
    }
  }
  if (first_dir < 0) return {start};

  const Eigen::Vector2i p1 = neighbour(start, first_dir);
  Eigen::Vector2i p2 = p1;
  Eigen::Vector2i p3 = start;
  const std::size_t guard = 8 * static_cast<std::size_t>(labels.size()) + 8;
  while (border.size() < guard) {
    const int back = direction_of(p3, p2);
    Eigen::Vector2i p4 = p3;
    for (int k = 1; k <= 8; ++k) {
      const int d = ((back - k) % 8 + 8) % 8;  // counter-clockwise
      const Eigen::Vector2i q = neighbour(p3, d);
      if (inside(q)) {
        p4 = q;
        break;
      }
    }
    border.push_back(p3);
    if (p4 == start && p3 == p1) break;
    p2 = p3;
    p3 = p4;
  }
  return border;
}

std::vector<Roi> pd_extract(const Frame& frame_t, const Frame& frame_past, const ExtractionParams& params) {
  if (frame_t.width() != frame_past.width() || frame_t.height() != frame_past.height()) {
    throw ExtractionError("pd_extract: frame dimensions differ");
  }
  const auto diff = (frame_t.pixels.cast<int>() - frame_past.pixels.cast<int>()).abs();
  const Image<std::uint8_t> mask = (diff > params.noise_threshold).cast<std::uint8_t>();
  auto [labels, count] = label_components(mask);

  std::vector<int> area(static_cast<std::size_t>(count) + 1, 0);
  std::vector<Eigen::Vector2i> first(static_cast<std::size_t>(count) + 1, Eigen::Vector2i(-1, -1));
  for (Eigen::Index y = 0; y < labels.rows(); ++y) {
    for (Eigen::Index x = 0; x < labels.cols(); ++x) {
      const int l = labels(y, x);
      if (!l) continue;
      if (area[l]++ == 0) first[l] = Eigen::Vector2i(static_cast<int>(x), static_cast<int>(y));
    }
  }

  std::vector<Roi> rois;
  for (int l = 1; l <= count; ++l) {
    if (area[l] < params.min_blob_area) continue;
    const auto border = trace_outer_border(labels, l, first[l]);
    int x0 = border.front().x(), x1 = x0, y0 = border.front().y(), y1 = y0;
    for (const auto& p : border) {
      x0 = std::min(x0, p.x());
      x1 = std::max(x1, p.x());
      y0 = std::min(y0, p.y());
      y1 = std::max(y1, p.y());
    }
    const Box tight{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 - x0 + 1),
                    static_cast<double>(y1 - y0 + 1)};
    const Box box = clip_to(dilate(tight, params.dilate), frame_t.width(), frame_t.height());
    if (!box.valid()) continue;
    Roi r;
    r.id = static_cast<int>(rois.size());
    r.frame_index = frame_t.index;
    r.box = box;
    r.source = RoiSource::PD;
    r.features = ExtractionFeatures::from_box(box);
    rois.push_back(r);
  }
  return rois;
}

// ---------------------------------------------------------------------------
// Shi-Tomasi

namespace {

struct Gradients {
  FloatImage gx, gy;
  int x0, y0;  // image coordinates of gradient (0, 0)
};

// Sobel gradients over [x0, x1) x [y0, y1); callers guarantee a 1 px image margin.
Gradients sobel(const FloatImage& img, int x0, int y0, int x1, int y1) {
  Gradients g{FloatImage(y1 - y0, x1 - x0), FloatImage(y1 - y0, x1 - x0), x0, y0};
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const float a = img(y - 1, x - 1), b = img(y - 1, x), c = img(y - 1, x + 1);
      const float d = img(y, x - 1), f = img(y, x + 1);
      const float gg = img(y + 1, x - 1), hh = img(y + 1, x), ii = img(y + 1, x + 1);
      g.gx(y - y0, x - x0) = ((c + 2.0f * f + ii) - (a + 2.0f * d + gg)) / 8.0f;
      g.gy(y - y0, x - x0) = ((gg + 2.0f * hh + ii) - (a + 2.0f * b + c)) / 8.0f;
    }
  }
  return g;
}

float min_eigen(const Eigen::Matrix2f& m) {
  const float half_tr = 0.5f * (m(0, 0) + m(1, 1));
  const float half_diff = 0.5f * (m(0, 0) - m(1, 1));
  return half_tr - std::sqrt(half_diff * half_diff + m(0, 1) * m(0, 1));
}

float tensor_score(const Gradients& g, int x, int y) {
  Eigen::Matrix2f m = Eigen::Matrix2f::Zero();
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const float ix = g.gx(y + dy - g.y0, x + dx - g.x0);
      const float iy = g.gy(y + dy - g.y0, x + dx - g.x0);
      m(0, 0) += ix * ix;
      m(0, 1) += ix * iy;
      m(1, 1) += iy * iy;
    }
  }
  m(1, 0) = m(0, 1);
  return min_eigen(m);
}

}  // namespace

float shi_tomasi_score(const FloatImage& unit_image, int x, int y) {
  if (x < 2 || y < 2 || x > unit_image.cols() - 3 || y > unit_image.rows() - 3) return 0.0f;
  const Gradients g = sobel(unit_image, x - 1, y - 1, x + 2, y + 2);
  return tensor_score(g, x, y);
}

std::vector<FeaturePoint> select_features(const GrayImage& frame, const Box& region, int k,
                                          const ExtractionParams& params) {
  if (k < 1 || region.w < 8.0 || region.h < 8.0) return {};
  const int w = frame.cols();
  const int h = frame.rows();
  const int x0 = std::max(2, static_cast<int>(std::ceil(region.x)));
  const int y0 = std::max(2, static_cast<int>(std::ceil(region.y)));
  const int x1 = std::min(w - 2, static_cast<int>(std::floor(region.right())));
  const int y1 = std::min(h - 2, static_cast<int>(std::floor(region.bottom())));
  if (x1 - x0 < 1 || y1 - y0 < 1) return {};

  const FloatImage unit =
      frame.block(y0 - 2, x0 - 2, y1 - y0 + 4, x1 - x0 + 4).cast<float>() / 255.0f;
  // Local coordinates: unit(0,0) is image (x0-2, y0-2).
  const Gradients g = sobel(unit, 1, 1, x1 - x0 + 3, y1 - y0 + 3);

  std::vector<FeaturePoint> cand;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const float s = tensor_score(g, x - x0 + 2, y - y0 + 2);
      if (s > params.score_floor) cand.push_back({static_cast<float>(x), static_cast<float>(y), s});
    }
  }
  const auto better = [](const FeaturePoint& a, const FeaturePoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  };
  // The order is total, so greedy suppression over a sorted prefix matches a
  // full sort whenever the prefix yields k points.
  const float r2 = static_cast<float>(params.nms_radius * params.nms_radius);
  std::vector<FeaturePoint> picked;
  std::size_t prefix = std::min(cand.size(), static_cast<std::size_t>(std::max(256, 32 * k)));
  while (true) {
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(prefix), cand.end(), better);
    picked.clear();
    for (std::size_t i = 0; i < prefix && static_cast<int>(picked.size()) < k; ++i) {
      const auto& c = cand[i];
      const bool clear = std::none_of(picked.begin(), picked.end(), [&](const FeaturePoint& p) {
        const float dx = p.x - c.x, dy = p.y - c.y;
        return dx * dx + dy * dy <= r2;
      });
      if (clear) picked.push_back(c);
    }
    if (static_cast<int>(picked.size()) == k || prefix == cand.size()) break;
    prefix = std::min(cand.size(), prefix * 4);
  }
  return picked;
}

// ---------------------------------------------------------------------------
// Lucas-Kanade

Pyramid Pyramid::build(const GrayImage& img, int levels) {
  Pyramid p;
  p.levels.push_back(to_float(img));
  for (int l = 1; l < levels; ++l) {
    const FloatImage& prev = p.levels.back();
    if (prev.rows() < 4 || prev.cols() < 4) break;
    p.levels.push_back(downsample2(prev));
  }
  return p;
}

namespace {

bool window_inside(const FloatImage& img, float x, float y, int half) {
  return x - half >= 0.0f && y - half >= 0.0f && x + half <= img.cols() - 1 && y + half <= img.rows() - 1;
}

}  // namespace

namespace {

// Bilinear samples of an (n x n) window centred at (cx, cy). Every sample of
// the window shares one set of weights; pixels outside the image are clamped.
void sample_window(const FloatImage& img, float cx, float cy, int half, float* out) {
  const int w = static_cast<int>(img.cols());
  const int h = static_cast<int>(img.rows());
  const float fx0 = std::floor(cx), fy0 = std::floor(cy);
  const float ax = cx - fx0, ay = cy - fy0;
  const int bx = static_cast<int>(fx0) - half, by = static_cast<int>(fy0) - half;
  const int n = 2 * half + 1;
  const bool inside = bx >= 0 && by >= 0 && bx + n < w && by + n < h;
  for (int v = 0; v < n; ++v) {
    for (int u = 0; u < n; ++u) {
      int x0 = bx + u, y0 = by + v, x1 = x0 + 1, y1 = y0 + 1;
      if (!inside) {
        x0 = std::clamp(x0, 0, w - 1);
        x1 = std::clamp(x1, 0, w - 1);
        y0 = std::clamp(y0, 0, h - 1);
        y1 = std::clamp(y1, 0, h - 1);
      }
      const float top = (1.0f - ax) * img(y0, x0) + ax * img(y0, x1);
      const float bot = (1.0f - ax) * img(y1, x0) + ax * img(y1, x1);
      *out++ = (1.0f - ay) * top + ay * bot;
    }
  }
}

}  // namespace

std::vector<FlowResult> lucas_kanade(const Pyramid& prev, const Pyramid& cur, std::span<const FeaturePoint> points,
                                     const ExtractionParams& params) {
  const int half = params.lk_window / 2;
  const int n = 2 * half + 1;
  const int m = n + 2;  // window plus a one-pixel ring for central differences
  const int levels = static_cast<int>(std::min(prev.levels.size(), cur.levels.size()));
  std::vector<FlowResult> out(points.size());

  std::vector<float> ext(static_cast<std::size_t>(m * m));
  std::vector<float> tmpl(static_cast<std::size_t>(n * n)), ix(tmpl.size()), iy(tmpl.size()), warped(tmpl.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    FlowResult& res = out[i];
    const float px = points[i].x;
    const float py = points[i].y;
    if (!window_inside(prev.levels[0], px, py, half)) {
      res.lost = true;
      continue;
    }
    Eigen::Vector2f guess = Eigen::Vector2f::Zero();
    for (int level = levels - 1; level >= 0 && !res.lost; --level) {
      const FloatImage& I = prev.levels[static_cast<std::size_t>(level)];
      const FloatImage& J = cur.levels[static_cast<std::size_t>(level)];
      const float inv = 1.0f / static_cast<float>(1 << level);
      const float lx = px * inv;
      const float ly = py * inv;

      sample_window(I, lx, ly, half + 1, ext.data());
      Eigen::Matrix2f G = Eigen::Matrix2f::Zero();
      for (int v = 0, k = 0; v < n; ++v) {
        for (int u = 0; u < n; ++u, ++k) {
          const float* row = &ext[static_cast<std::size_t>((v + 1) * m + u + 1)];
          tmpl[k] = row[0];
          ix[k] = 0.5f * (row[1] - row[-1]);
          iy[k] = 0.5f * (row[m] - row[-m]);
          G(0, 0) += ix[k] * ix[k];
          G(0, 1) += ix[k] * iy[k];
          G(1, 1) += iy[k] * iy[k];
        }
      }
      G(1, 0) = G(0, 1);
      if (min_eigen(G) / static_cast<float>(n * n) < 1e-4f) {
        res.lost = true;
        break;
      }
      const Eigen::Matrix2f Ginv = G.inverse();

      Eigen::Vector2f d = guess;
      for (int it = 0; it < params.lk_max_iterations; ++it) {
        sample_window(J, lx + d.x(), ly + d.y(), half, warped.data());
        Eigen::Vector2f b = Eigen::Vector2f::Zero();
        for (int k = 0; k < n * n; ++k) {
          const float diff = tmpl[k] - warped[k];
          b.x() += diff * ix[k];
          b.y() += diff * iy[k];
        }
        const Eigen::Vector2f delta = Ginv * b;
        d += delta;
        if (!std::isfinite(d.x()) || !std::isfinite(d.y()) ||
            std::abs(d.x()) > J.cols() || std::abs(d.y()) > J.rows()) {
          res.lost = true;
          break;
        }
        if (delta.norm() < params.lk_epsilon) break;
      }
      guess = level > 0 ? Eigen::Vector2f(2.0f * d) : d;
    }
    if (res.lost) continue;
    res.shift = guess;
    const FloatImage& I0 = prev.levels[0];
    const FloatImage& J0 = cur.levels[0];
    if (!window_inside(J0, px + guess.x(), py + guess.y(), half)) {
      res.lost = true;
      continue;
    }
    sample_window(I0, px, py, half, tmpl.data());
    sample_window(J0, px + guess.x(), py + guess.y(), half, warped.data());
    double sad = 0.0;
    for (int k = 0; k < n * n; ++k) sad += std::abs(tmpl[k] - warped[k]);
    res.residual = static_cast<float>(sad / (n * n));
  }
  return out;
}

std::vector<FlowResult> lucas_kanade(const GrayImage& prev, const GrayImage& cur, std::span<const FeaturePoint> points,
                                     const ExtractionParams& params) {
  return lucas_kanade(Pyramid::build(prev, params.lk_levels), Pyramid::build(cur, params.lk_levels), points, params);
}

// ---------------------------------------------------------------------------
// OF tracking

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ExtractionFeatures flow_features(const Box& box, std::span<const Eigen::Vector2f> shifts,
                                 std::span<const float> residuals) {
  ExtractionFeatures f = ExtractionFeatures::from_box(box);
  const auto n = static_cast<double>(shifts.size());
  if (shifts.empty()) return f;

  Eigen::Vector2d mean_vec = Eigen::Vector2d::Zero();
  double mean_mag = 0.0;
  for (const auto& s : shifts) {
    mean_vec += s.cast<double>();
    mean_mag += s.cast<double>().norm();
  }
  mean_vec /= n;
  f.mean_shift = mean_mag / n;

  double var_total = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (const auto& s : shifts) {
    const Eigen::Vector2d dv = s.cast<double>() - mean_vec;
    var_total += dv.squaredNorm();
    sxx += dv.x() * dv.x();
    syy += dv.y() * dv.y();
    sxy += dv.x() * dv.y();
  }
  f.shift_std = std::sqrt(var_total / n);
  constexpr double kVarEps = 1e-12;
  f.shift_ncc = (sxx / n > kVarEps && syy / n > kVarEps) ? std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0) : 0.0;
  if (f.shift_std < 1e-9) f.shift_std = 0.0;

  double err = 0.0;
  for (float r : residuals) err += r;
  f.tracking_error = residuals.empty() ? 0.0 : err / static_cast<double>(residuals.size());
  return f;
}

TrackOutcome of_track(const Pyramid& prev, const Pyramid& cur, const GrayImage& prev_image,
                      std::span<const TrackSeed> tracks, int frame_index, const ExtractionParams& params) {
  TrackOutcome out;
  const double fw = static_cast<double>(prev_image.cols());
  const double fh = static_cast<double>(prev_image.rows());
  for (const TrackSeed& t : tracks) {
    const auto points = select_features(prev_image, t.box, params.features_per_roi, params);
    if (points.empty()) {
      out.dropped_tracks.push_back(t.track_id);
      continue;
    }
    const auto flow = lucas_kanade(prev, cur, points, params);
    std::vector<Eigen::Vector2f> shifts;
    std::vector<float> residuals;
    for (const auto& fr : flow) {
      if (fr.lost) continue;
      shifts.push_back(fr.shift);
      residuals.push_back(fr.residual);
    }
    if (static_cast<int>(shifts.size()) < params.min_track_points) {
      out.dropped_tracks.push_back(t.track_id);
      continue;
    }
    std::vector<double> xs, ys;
    for (const auto& s : shifts) {
      xs.push_back(s.x());
      ys.push_back(s.y());
    }
    const Box moved = clip_to(Box{t.box.x + median(xs), t.box.y + median(ys), t.box.w, t.box.h}, fw, fh);
    const Box roi_box = clip_to(dilate(moved, params.dilate), fw, fh);
    ExtractionFeatures feats = flow_features(roi_box, shifts, residuals);
    if (feats.tracking_error > params.lost_residual || !moved.valid() || moved.w < 2.0 || moved.h < 2.0) {
      out.dropped_tracks.push_back(t.track_id);
      continue;
    }
    Roi r;
    r.id = static_cast<int>(out.rois.size());
    r.frame_index = frame_index;
    r.box = roi_box;
    r.source = RoiSource::OF;
    r.track_id = t.track_id;
    r.track_box = moved;
    r.features = feats;
    r.last_detection_confidence = t.confidence;
    r.consecutive_drop_count = t.consecutive_drop_count;
    out.rois.push_back(r);
  }
  return out;
}

TrackOutcome of_track(const Frame& prev, const Frame& cur, std::span<const TrackSeed> tracks,
                      const ExtractionParams& params) {
  return of_track(Pyramid::build(prev.pixels, params.lk_levels), Pyramid::build(cur.pixels, params.lk_levels),
                  prev.pixels, tracks, cur.index, params);
}

// ---------------------------------------------------------------------------
// Merging

namespace {

void sort_rois(std::vector<Roi>& rois) {
  std::stable_sort(rois.begin(), rois.end(), [](const Roi& a, const Roi& b) {
    if (a.box.area() != b.box.area()) return a.box.area() > b.box.area();
    return a.id < b.id;
  });
}

}  // namespace

std::vector<Roi> merge_rois(std::vector<Roi> pd, std::vector<Roi> of, const ExtractionParams& params,
                            const ScaleOf& scale_of) {
  const auto scale = [&](const Roi& r) { return std::max(r.min_scale, scale_of ? scale_of(r) : 1.0); };

  std::vector<Roi> rois = std::move(of);
  for (Roi& p : pd) {
    const bool overlapped = std::any_of(rois.begin(), rois.end(), [&](const Roi& o) {
      return o.source == RoiSource::OF && iou(p.box, o.box) > params.dedup_iou;
    });
    if (!overlapped) rois.push_back(std::move(p));
  }
  sort_rois(rois);

  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < rois.size() && !changed; ++i) {
      for (std::size_t j = i + 1; j < rois.size() && !changed; ++j) {
        const Roi& a = rois[i];
        const Roi& b = rois[j];
        if (iou(a.box, b.box) <= params.merge_iou) continue;
        const double sa = scale(a), sb = scale(b);
        const double s = std::max(sa, sb);
        const Box u = union_box(a.box, b.box);
        if (u.area() * s * s >= a.box.area() * sa * sa + b.box.area() * sb * sb) continue;

        // The merged ROI keeps the identity of the tracked member, else the larger one.
        const Roi& keep = (a.source != RoiSource::OF && b.source == RoiSource::OF) ? b : a;
        Roi merged = keep;
        merged.box = u;
        const ExtractionFeatures flow = keep.features;
        merged.features = ExtractionFeatures::from_box(u);
        merged.features.mean_shift = flow.mean_shift;
        merged.features.shift_std = flow.shift_std;
        merged.features.tracking_error = flow.tracking_error;
        merged.features.shift_ncc = flow.shift_ncc;
        merged.consecutive_drop_count = std::max(a.consecutive_drop_count, b.consecutive_drop_count);
        merged.last_detection_confidence = std::min(a.last_detection_confidence, b.last_detection_confidence);
        merged.min_scale = s;
        rois.erase(rois.begin() + static_cast<std::ptrdiff_t>(j));
        rois[i] = merged;
        sort_rois(rois);
        changed = true;
      }
    }
  }
  return rois;
}

}  // namespace cpi
