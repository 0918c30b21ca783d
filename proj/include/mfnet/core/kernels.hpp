#pragma once
// Plain tensor kernels shared by the frozen backbone and the autograd ops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <map>
#include <vector>

#include "mfnet/core/error.hpp"
#include "mfnet/core/tensor.hpp"

namespace mfnet::kernels {

struct ConvGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_extent(std::size_t in) const {
    if (in + 2 * pad < kernel) throw ConfigError("conv2d: input smaller than kernel");
    return (in + 2 * pad - kernel) / stride + 1;
  }
};

namespace detail {

#if defined(__AVX__)
inline constexpr std::size_t kVectorBytes = 32;
#else
inline constexpr std::size_t kVectorBytes = 16;
#endif

// 4 x (2 vectors) register tile of C += A * B.
template <typename T>
struct GemmTile {
  typedef T Vec __attribute__((vector_size(kVectorBytes)));
  static constexpr std::size_t kLanes = kVectorBytes / sizeof(T);
  static constexpr std::size_t kRows = 4;
  static constexpr std::size_t kCols = 2 * kLanes;

  static Vec load(const T* p) {
    Vec v;
    std::memcpy(&v, p, sizeof v);
    return v;
  }
  static void store(T* p, Vec v) { std::memcpy(p, &v, sizeof v); }

  static void run(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                  std::size_t ldc) {
    Vec acc[kRows][2] = {};
    for (std::size_t p = 0; p < k; ++p) {
      const Vec b0 = load(b + p * ldb), b1 = load(b + p * ldb + kLanes);
      for (std::size_t r = 0; r < kRows; ++r) {
        const T av = a[r * lda + p];
        acc[r][0] += av * b0;
        acc[r][1] += av * b1;
      }
    }
    for (std::size_t r = 0; r < kRows; ++r) {
      store(c + r * ldc, load(c + r * ldc) + acc[r][0]);
      store(c + r * ldc + kLanes, load(c + r * ldc + kLanes) + acc[r][1]);
    }
  }
};

}  // namespace detail

// C (m x n) += A (m x k) * B (k x n); row-major with leading dimensions.
template <typename T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
                     std::size_t ldb, T* c, std::size_t ldc) {
  using Tile = detail::GemmTile<T>;
  std::size_t i = 0;
  for (; i + Tile::kRows <= m; i += Tile::kRows) {
    std::size_t j = 0;
    for (; j + Tile::kCols <= n; j += Tile::kCols) Tile::run(k, a + i * lda, lda, b + j, ldb, c + i * ldc + j, ldc);
    if (j == n) continue;
    for (std::size_t r = 0; r < Tile::kRows; ++r)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[(i + r) * lda + p];
        for (std::size_t q = j; q < n; ++q) c[(i + r) * ldc + q] += av * b[p * ldb + q];
      }
  }
  for (; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * lda + p];
      for (std::size_t q = 0; q < n; ++q) c[i * ldc + q] += av * b[p * ldb + q];
    }
}

namespace detail {

// Rows of receptive fields, one per output pixel: (oh*ow) x (taps*cin),
// zero where the window leaves the input.
template <typename T>
std::vector<T> im2col(const Tensor<T>& x, const ConvGeometry& g, std::size_t oh, std::size_t ow) {
  const std::size_t cin = x.channels();
  const std::size_t row = g.kernel * g.kernel * cin;
  std::vector<T> cols(oh * ow * row, T{0});
  const auto ih = static_cast<long>(x.height());
  const auto iw = static_cast<long>(x.width());
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* dst = &cols[(oy * ow + ox) * row];
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
        if (iy < 0 || iy >= ih) continue;
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
          if (ix < 0 || ix >= iw) continue;
          const T* src = &x(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
          std::copy(src, src + cin, dst + (ky * g.kernel + kx) * cin);
        }
      }
    }
  return cols;
}

template <typename T>
void col2im_accumulate(const std::vector<T>& cols, const ConvGeometry& g, std::size_t oh, std::size_t ow,
                       Tensor<T>& grad_x) {
  const std::size_t cin = grad_x.channels();
  const std::size_t row = g.kernel * g.kernel * cin;
  const auto ih = static_cast<long>(grad_x.height());
  const auto iw = static_cast<long>(grad_x.width());
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const T* src = &cols[(oy * ow + ox) * row];
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
        if (iy < 0 || iy >= ih) continue;
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
          if (ix < 0 || ix >= iw) continue;
          T* dst = &grad_x(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
          const T* s = src + (ky * g.kernel + kx) * cin;
          for (std::size_t ic = 0; ic < cin; ++ic) dst[ic] += s[ic];
        }
      }
    }
}

inline bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace detail

// Weights are laid out as (out_channels, kernel*kernel, in_channels); bias is
// 1x1xout or empty.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 ConvGeometry g) {
  const std::size_t cin = x.channels();
  const std::size_t cout = weight.height();
  if (weight.channels() != cin || weight.width() != g.kernel * g.kernel) {
    throw ConfigError("conv2d: weight shape " + weight.shape().str() +
                      " incompatible with input " + x.shape().str());
  }
  const std::size_t oh = g.out_extent(x.height());
  const std::size_t ow = g.out_extent(x.width());
  const std::size_t row = g.kernel * g.kernel * cin;
  Tensor<T> out(oh, ow, cout);
  if (bias) {
    for (std::size_t p = 0; p < oh * ow; ++p)
      for (std::size_t oc = 0; oc < cout; ++oc) out[p * cout + oc] = (*bias)[oc];
  }
  // (taps*cin) x cout copy of the weights.
  std::vector<T> wt(row * cout);
  for (std::size_t oc = 0; oc < cout; ++oc)
    for (std::size_t r = 0; r < row; ++r) wt[r * cout + oc] = weight[oc * row + r];
  if (detail::is_pointwise(g)) {
    gemm_accumulate(oh * ow, cout, row, x.data(), row, wt.data(), cout, out.data(), cout);
  } else {
    const auto cols = detail::im2col(x, g, oh, ow);
    gemm_accumulate(oh * ow, cout, row, cols.data(), row, wt.data(), cout, out.data(), cout);
  }
  return out;
}

// Accumulates gradients of conv2d into grad_x / grad_w / grad_b (any may be null).
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     ConvGeometry g, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const std::size_t cin = x.channels();
  const std::size_t cout = weight.height();
  const std::size_t oh = grad_out.height();
  const std::size_t ow = grad_out.width();
  const std::size_t pixels = oh * ow;
  const std::size_t row = g.kernel * g.kernel * cin;
  if (grad_b) {
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t oc = 0; oc < cout; ++oc) (*grad_b)[oc] += grad_out[p * cout + oc];
  }
  const bool pointwise = detail::is_pointwise(g);
  if (grad_w) {
    std::vector<T> go_t(cout * pixels);
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t oc = 0; oc < cout; ++oc) go_t[oc * pixels + p] = grad_out[p * cout + oc];
    if (pointwise) {
      gemm_accumulate(cout, row, pixels, go_t.data(), pixels, x.data(), row, grad_w->data(), row);
    } else {
      const auto cols = detail::im2col(x, g, oh, ow);
      gemm_accumulate(cout, row, pixels, go_t.data(), pixels, cols.data(), row, grad_w->data(), row);
    }
  }
  if (grad_x) {
    if (pointwise) {
      gemm_accumulate(pixels, row, cout, grad_out.data(), cout, weight.data(), row, grad_x->data(), row);
    } else {
      std::vector<T> gcols(pixels * row, T{0});
      gemm_accumulate(pixels, row, cout, grad_out.data(), cout, weight.data(), row, gcols.data(), row);
      detail::col2im_accumulate(gcols, g, oh, ow, *grad_x);
    }
  }
}

// Source interval [begin, end) of output cell i when an extent of `in` is
// split into `out` equal parts; fractional ends are area-weighted.
struct AreaSpan {
  double begin;
  double end;
};

inline AreaSpan area_span(std::size_t i, std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  return {static_cast<double>(i) * scale, static_cast<double>(i + 1) * scale};
}

// Per-output list of (source index, weight); weights of one output sum to 1.
struct AreaTap {
  std::size_t index;
  double weight;
};

inline std::vector<std::vector<AreaTap>> area_taps(std::size_t in, std::size_t out) {
  std::vector<std::vector<AreaTap>> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const AreaSpan s = area_span(i, in, out);
    const double len = s.end - s.begin;
    const auto first = static_cast<std::size_t>(std::floor(s.begin));
    const auto last = std::min(in, static_cast<std::size_t>(std::ceil(s.end)));
    for (std::size_t j = first; j < last; ++j) {
      const double lo = std::max(s.begin, static_cast<double>(j));
      const double hi = std::min(s.end, static_cast<double>(j + 1));
      if (hi > lo) taps[i].push_back({j, (hi - lo) / len});
    }
  }
  return taps;
}

// Adaptive average pooling with exact fractional-area bins. Every source
// pixel's total contribution is out/in, so the map mean is preserved.
template <typename T>
Tensor<T> area_resize(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  if (oh == 0 || ow == 0 || oh > x.height() || ow > x.width()) {
    throw ConfigError("area_resize: target must be within (0, source] on each axis");
  }
  const auto ty = area_taps(x.height(), oh);
  const auto tx = area_taps(x.width(), ow);
  const std::size_t c = x.channels();
  Tensor<T> out(oh, ow, c);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* dst = &out(oy, ox, 0);
      for (const auto& a : ty[oy]) {
        for (const auto& b : tx[ox]) {
          const T w = static_cast<T>(a.weight * b.weight);
          const T* src = &x(a.index, b.index, 0);
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += w * src[ch];
        }
      }
    }
  }
  return out;
}

// Linear interpolation taps with half-pixel centres (corner alignment off).
struct LinearTap {
  std::size_t i0;
  std::size_t i1;
  double w0;
  double w1;
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::max(src, 0.0);
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double frac = src - static_cast<double>(i0);
    taps[i] = {i0, i1, 1.0 - frac, frac};
    if (i1 == i0) taps[i] = {i0, i0, 1.0, 0.0};
  }
  return taps;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  if (x.height() == oh && x.width() == ow) return x;
  const auto ty = linear_taps(x.height(), oh);
  const auto tx = linear_taps(x.width(), ow);
  const std::size_t c = x.channels();
  Tensor<T> out(oh, ow, c);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    const auto& a = ty[oy];
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const auto& b = tx[ox];
      T* dst = &out(oy, ox, 0);
      const T w00 = static_cast<T>(a.w0 * b.w0), w01 = static_cast<T>(a.w0 * b.w1);
      const T w10 = static_cast<T>(a.w1 * b.w0), w11 = static_cast<T>(a.w1 * b.w1);
      const T* p00 = &x(a.i0, b.i0, 0);
      const T* p01 = &x(a.i0, b.i1, 0);
      const T* p10 = &x(a.i1, b.i0, 0);
      const T* p11 = &x(a.i1, b.i1, 0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        dst[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
      }
    }
  }
  return out;
}

template <typename T>
void bilinear_resize_backward(const Tensor<T>& grad_out, Tensor<T>& grad_in) {
  const std::size_t oh = grad_out.height(), ow = grad_out.width();
  if (grad_in.height() == oh && grad_in.width() == ow) {
    grad_in += grad_out;
    return;
  }
  const auto ty = linear_taps(grad_in.height(), oh);
  const auto tx = linear_taps(grad_in.width(), ow);
  const std::size_t c = grad_out.channels();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    const auto& a = ty[oy];
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const auto& b = tx[ox];
      const T* g = &grad_out(oy, ox, 0);
      const T w00 = static_cast<T>(a.w0 * b.w0), w01 = static_cast<T>(a.w0 * b.w1);
      const T w10 = static_cast<T>(a.w1 * b.w0), w11 = static_cast<T>(a.w1 * b.w1);
      T* p00 = &grad_in(a.i0, b.i0, 0);
      T* p01 = &grad_in(a.i0, b.i1, 0);
      T* p10 = &grad_in(a.i1, b.i0, 0);
      T* p11 = &grad_in(a.i1, b.i1, 0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        p00[ch] += w00 * g[ch];
        p01[ch] += w01 * g[ch];
        p10[ch] += w10 * g[ch];
        p11[ch] += w11 * g[ch];
      }
    }
  }
}

// Nearest-neighbour resampling of a label map (pixel-centre sampling).
inline LabelMap nearest_resize(const LabelMap& m, std::size_t oh, std::size_t ow) {
  if (m.h == oh && m.w == ow) return m;
  LabelMap out(oh, ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const auto sy = std::min(m.h - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) *
                                                               static_cast<double>(m.h) /
                                                               static_cast<double>(oh)));
    for (std::size_t x = 0; x < ow; ++x) {
      const auto sx = std::min(m.w - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) *
                                                                 static_cast<double>(m.w) /
                                                                 static_cast<double>(ow)));
      out.at(y, x) = m.at(sy, sx);
    }
  }
  return out;
}

// Each output cell takes the label covering most of its source area; ties go
// to the smaller label.
inline LabelMap majority_resize(const LabelMap& m, std::size_t oh, std::size_t ow) {
  if (m.h == oh && m.w == ow) return m;
  if (oh == 0 || ow == 0 || oh > m.h || ow > m.w) throw ConfigError("majority_resize: bad output size");
  const auto ty = area_taps(m.h, oh), tx = area_taps(m.w, ow);
  LabelMap out(oh, ow);
  std::map<int, double> votes;
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      votes.clear();
      for (const auto& a : ty[y])
        for (const auto& b : tx[x]) votes[m.at(a.index, b.index)] += a.weight * b.weight;
      auto best = votes.begin();
      for (auto it = votes.begin(); it != votes.end(); ++it)
        if (it->second > best->second + 1e-12) best = it;
      out.at(y, x) = best->first;
    }
  return out;
}

// Per-pixel softmax over channels.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> out(logits.shape());
  const std::size_t c = logits.channels();
  for (std::size_t y = 0; y < logits.height(); ++y) {
    for (std::size_t x = 0; x < logits.width(); ++x) {
      const auto in = logits.pixel(y, x);
      auto dst = out.pixel(y, x);
      T mx = in[0];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, in[k]);
      T sum{0};
      for (std::size_t k = 0; k < c; ++k) {
        dst[k] = std::exp(in[k] - mx);
        sum += dst[k];
      }
      for (std::size_t k = 0; k < c; ++k) dst[k] /= sum;
    }
  }
  return out;
}

template <typename T>
LabelMap argmax_channels(const Tensor<T>& scores) {
  LabelMap out(scores.height(), scores.width());
  for (std::size_t y = 0; y < scores.height(); ++y) {
    for (std::size_t x = 0; x < scores.width(); ++x) {
      const auto p = scores.pixel(y, x);
      out.at(y, x) = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    }
  }
  return out;
}

}  // namespace mfnet::kernels
