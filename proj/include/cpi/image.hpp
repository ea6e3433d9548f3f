#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>

#include "cpi/geometry.hpp"

namespace cpi {

/// Row-major dense image; rows are y, columns are x.
template <typename Scalar>
using Image = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using GrayImage = Image<std::uint8_t>;
using FloatImage = Image<float>;

template <typename Scalar>
inline int width_of(const Image<Scalar>& img) {
  return static_cast<int>(img.cols());
}

template <typename Scalar>
inline int height_of(const Image<Scalar>& img) {
  return static_cast<int>(img.rows());
}

inline std::uint8_t saturate_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp<long>(round_half_up(v), 0, 255));
}

/// Bilinear sample with border replication. (x, y) are pixel-center coordinates.
template <typename Scalar>
double sample_bilinear(const Image<Scalar>& img, double x, double y) {
  const int w = width_of(img);
  const int h = height_of(img);
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = (1.0 - fx) * static_cast<double>(img(y0, x0)) + fx * static_cast<double>(img(y0, x1));
  const double bot = (1.0 - fx) * static_cast<double>(img(y1, x0)) + fx * static_cast<double>(img(y1, x1));
  return (1.0 - fy) * top + fy * bot;
}

/// Resample the `region` of `src` to an out_w x out_h image (pixel-center aligned).
template <typename Scalar>
Image<Scalar> resample_region(const Image<Scalar>& src, const Box& region, int out_w, int out_h) {
  Image<Scalar> out(out_h, out_w);
  const double sx = region.w / out_w;
  const double sy = region.h / out_h;
  for (int r = 0; r < out_h; ++r) {
    const double y = region.y + (r + 0.5) * sy - 0.5;
    for (int c = 0; c < out_w; ++c) {
      const double x = region.x + (c + 0.5) * sx - 0.5;
      const double v = sample_bilinear(src, x, y);
      if constexpr (std::is_integral_v<Scalar>) {
        out(r, c) = static_cast<Scalar>(std::clamp<long>(round_half_up(v), 0, 255));
      } else {
        out(r, c) = static_cast<Scalar>(v);
      }
    }
  }
  return out;
}

inline FloatImage to_float(const GrayImage& img) { return img.cast<float>(); }

/// 2x box-filter downsample (odd trailing row/column dropped).
inline FloatImage downsample2(const FloatImage& img) {
  const Eigen::Index h = img.rows() / 2;
  const Eigen::Index w = img.cols() / 2;
  FloatImage out(h, w);
  for (Eigen::Index r = 0; r < h; ++r)
    for (Eigen::Index c = 0; c < w; ++c)
      out(r, c) = 0.25f * (img(2 * r, 2 * c) + img(2 * r, 2 * c + 1) + img(2 * r + 1, 2 * c) +
                           img(2 * r + 1, 2 * c + 1));
  return out;
}

}  // namespace cpi
