#pragma once
// Geometric augmentation shared by image and mask: scale jitter with a
// random crop back to the target size, small rotation and horizontal mirror.
// Images are sampled bilinearly, masks by nearest neighbour; pixels that fall
// outside the source are zero (the normalised mean colour / background).

#include <cmath>
#include <numbers>

#include "mfnet/core/kernels.hpp"
#include "mfnet/core/rng.hpp"
#include "mfnet/core/tensor.hpp"

namespace mfnet {

struct AugmentRanges {
  double scale_min = 0.9;
  double scale_max = 1.1;
  double max_rotation_deg = 10.0;
  double mirror_probability = 0.5;
};

// One draw, applied identically to an image and its mask.
struct Warp {
  double scale = 1.0;
  double angle = 0.0;  // radians
  bool mirror = false;
  double ty = 0.0;  // crop offset in output pixels
  double tx = 0.0;
};

inline Warp draw_warp(Rng& rng, std::size_t size, const AugmentRanges& r = {}) {
  Warp w;
  w.scale = rng.uniform(r.scale_min, r.scale_max);
  w.angle = rng.uniform(-r.max_rotation_deg, r.max_rotation_deg) * std::numbers::pi / 180.0;
  w.mirror = rng.bernoulli(r.mirror_probability);
  const double slack = std::max(0.0, (w.scale - 1.0) * static_cast<double>(size) / 2.0);
  w.ty = rng.uniform(-slack, slack);
  w.tx = rng.uniform(-slack, slack);
  return w;
}

namespace detail {

// Continuous source coordinate (pixel-index units) of output pixel (y, x).
inline std::pair<double, double> warp_source(const Warp& w, std::size_t y, std::size_t x, std::size_t size,
                                             std::size_t src_h, std::size_t src_w) {
  const double half = static_cast<double>(size) / 2.0;
  double oy = static_cast<double>(y) + 0.5 - half;
  double ox = static_cast<double>(x) + 0.5 - half;
  if (w.mirror) ox = -ox;
  const double c = std::cos(w.angle), s = std::sin(w.angle);
  const double ry = c * oy - s * ox + w.ty;
  const double rx = s * oy + c * ox + w.tx;
  const double sy = ry / w.scale + half, sx = rx / w.scale + half;
  return {sy * static_cast<double>(src_h) / static_cast<double>(size) - 0.5,
          sx * static_cast<double>(src_w) / static_cast<double>(size) - 0.5};
}

}  // namespace detail

template <typename T>
Tensor<T> warp_image(const Tensor<T>& src, const Warp& w, std::size_t size) {
  Tensor<T> out(size, size, src.channels());
  const auto h = static_cast<double>(src.height()), wd = static_cast<double>(src.width());
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const auto [sy, sx] = detail::warp_source(w, y, x, size, src.height(), src.width());
      if (sy < -0.5 || sx < -0.5 || sy > h - 0.5 || sx > wd - 0.5) continue;
      const double cy = std::clamp(sy, 0.0, h - 1.0), cx = std::clamp(sx, 0.0, wd - 1.0);
      const auto y0 = static_cast<std::size_t>(cy), x0 = static_cast<std::size_t>(cx);
      const std::size_t y1 = std::min(y0 + 1, src.height() - 1), x1 = std::min(x0 + 1, src.width() - 1);
      const double fy = cy - static_cast<double>(y0), fx = cx - static_cast<double>(x0);
      for (std::size_t k = 0; k < src.channels(); ++k) {
        const double v = (1 - fy) * ((1 - fx) * src(y0, x0, k) + fx * src(y0, x1, k)) +
                         fy * ((1 - fx) * src(y1, x0, k) + fx * src(y1, x1, k));
        out(y, x, k) = static_cast<T>(v);
      }
    }
  return out;
}

inline LabelMap warp_mask(const LabelMap& src, const Warp& w, std::size_t size) {
  LabelMap out(size, size, 0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const auto [sy, sx] = detail::warp_source(w, y, x, size, src.h, src.w);
      const double ry = std::floor(sy + 0.5), rx = std::floor(sx + 0.5);
      if (ry < 0 || rx < 0 || ry >= static_cast<double>(src.h) || rx >= static_cast<double>(src.w)) continue;
      out.at(y, x) = src.at(static_cast<std::size_t>(ry), static_cast<std::size_t>(rx));
    }
  return out;
}

// Plain resize to size x size (no augmentation).
template <typename T>
Tensor<T> resize_image(const Tensor<T>& src, std::size_t size) {
  if (src.height() == size && src.width() == size) return src;
  return kernels::bilinear_resize(src, size, size);
}

inline LabelMap resize_mask(const LabelMap& src, std::size_t size) {
  if (src.h == size && src.w == size) return src;
  return kernels::nearest_resize(src, size, size);
}

}  // namespace mfnet
