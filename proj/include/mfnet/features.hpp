#pragma once
// Backbone feature tap, multi-scale query pooling and masked global pooling.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mfnet/core/error.hpp"
#include "mfnet/core/kernels.hpp"
#include "mfnet/core/layers.hpp"
#include "mfnet/core/rng.hpp"
#include "mfnet/core/tensor.hpp"

namespace mfnet {

enum class BackboneKind { tiny_random, pretrained_midlevel };

inline std::string to_string(BackboneKind k) {
  return k == BackboneKind::tiny_random ? "tiny_random" : "pretrained_midlevel";
}

inline BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "tiny_random") return BackboneKind::tiny_random;
  if (s == "pretrained_midlevel") return BackboneKind::pretrained_midlevel;
  throw ConfigError("unknown backbone kind '" + s + "'");
}

struct BackboneConfig {
  BackboneKind kind = BackboneKind::pretrained_midlevel;
  bool frozen = true;
  std::size_t output_channels = 256;
  std::size_t stride = 8;  // 8 or 4
  bool bias = false;
  std::uint64_t init_seed = 1;
  std::string weights;  // checkpoint holding a "backbone" group; empty = seeded init

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

template <typename T>
struct FeatureMap {
  Tensor<T> data;
  std::size_t scale_id = 1;
};

template <typename T>
struct Prototype {
  Tensor<T> data;  // 1 x 1 x C
  std::size_t class_index = 0;
  bool fallback = false;  // mask vanished at feature resolution
};

// Four 3x3 conv stages with a stride schedule reaching 1/stride resolution.
// The outputs of stages 3 and 4 are concatenated and projected to C channels
// by a 1x1 convolution. Weights are never updated.
template <typename T>
class Backbone {
 public:
  Backbone() = default;

  explicit Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    if (!cfg.frozen) throw ConfigError("backbone fine-tuning is not supported (frozen must be true)");
    if (cfg.output_channels == 0) throw ConfigError("backbone output_channels must be positive");
    std::vector<std::size_t> strides;
    if (cfg.stride == 8) {
      strides = {2, 2, 2, 1};
    } else if (cfg.stride == 4) {
      strides = {2, 2, 1, 1};
    } else {
      throw ConfigError("backbone stride must be 4 or 8");
    }
    const std::vector<std::size_t> widths = cfg.kind == BackboneKind::tiny_random
                                                ? std::vector<std::size_t>{16, 24, 32, 32}
                                                : std::vector<std::size_t>{32, 64, 128, 128};
    Rng rng(cfg.init_seed);
    std::size_t in = 3;
    for (std::size_t s = 0; s < 4; ++s) {
      stages_.emplace_back(in, widths[s], 3, strides[s], rng, cfg.bias);
      in = widths[s];
    }
    projection_ = Conv2d<T>(widths[2] + widths[3], cfg.output_channels, 1, 1, rng, cfg.bias);
    for (const auto& p : parameters()) p.var->requires_grad = false;
  }

  const BackboneConfig& config() const { return cfg_; }
  std::size_t channels() const { return cfg_.output_channels; }
  std::size_t min_input() const { return cfg_.stride; }

  // Feature map at 1/stride resolution (ceil), C channels.
  FeatureMap<T> extract(const Tensor<T>& image) const {
    if (image.channels() != 3) throw DataError("extract_features: expected a 3-channel image");
    if (image.height() < min_input() || image.width() < min_input())
      throw DataError("extract_features: image smaller than backbone minimum");
    if (!image.all_finite()) throw DataError("extract_features: non-finite input");
    Tensor<T> x = image;
    Tensor<T> s3;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      x = stages_[s].apply(x);
      for (auto& v : x.values()) v = v > T{0} ? v : T{0};
      if (s == 2) s3 = x;
    }
    auto s3v = ad::constant(std::move(s3));
    auto s4v = ad::constant(std::move(x));
    Tensor<T> tap = ad::concat_channels<T>({s3v, s4v})->value;
    return {projection_.apply(tap), 1};
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (std::size_t s = 0; s < stages_.size(); ++s)
      stages_[s].collect("stage" + std::to_string(s + 1), out);
    projection_.collect("projection", out);
    return out;
  }

 private:
  BackboneConfig cfg_{};
  std::vector<Conv2d<T>> stages_;
  Conv2d<T> projection_;
};

// Spatial sizes of the Z query scales: scale z halves (ceil) scale z-1.
inline std::vector<std::pair<std::size_t, std::size_t>> scale_sizes(std::size_t h, std::size_t w,
                                                                    std::size_t z) {
  if (z == 0) throw ConfigError("multiscale_query: Z must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> sizes{{h, w}};
  for (std::size_t i = 1; i < z; ++i) {
    const auto [ph, pw] = sizes.back();
    const std::pair<std::size_t, std::size_t> next{(ph + 1) / 2, (pw + 1) / 2};
    if (next == sizes.back())
      throw ConfigError("multiscale_query: Z=" + std::to_string(z) +
                        " exceeds the number of distinct resolutions for a " + std::to_string(h) +
                        "x" + std::to_string(w) + " map");
    sizes.push_back(next);
  }
  return sizes;
}

template <typename T>
std::vector<FeatureMap<T>> multiscale_query(const FeatureMap<T>& feat, std::size_t z) {
  const auto sizes = scale_sizes(feat.data.height(), feat.data.width(), z);
  std::vector<FeatureMap<T>> out;
  out.push_back({feat.data, 1});
  for (std::size_t i = 1; i < sizes.size(); ++i)
    out.push_back({kernels::area_resize(feat.data, sizes[i].first, sizes[i].second), i + 1});
  return out;
}

// Binary image mask (non-zero = foreground) reduced to feature resolution:
// area interpolation, then any overlap counts as foreground.
inline std::vector<std::uint8_t> downsample_mask(const LabelMap& mask, std::size_t h, std::size_t w) {
  Tensor<double> m(mask.h, mask.w, 1);
  for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask.data[i] != 0 ? 1.0 : 0.0;
  const Tensor<double> r = kernels::area_resize(m, h, w);
  std::vector<std::uint8_t> out(h * w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = r[i] > 0.0 ? 1 : 0;
  return out;
}

// Mean feature over foreground cells. If the mask vanishes at feature
// resolution the unmasked spatial mean is used and `fallback` is set.
template <typename T>
Prototype<T> masked_global_pool(const FeatureMap<T>& feat, const LabelMap& mask) {
  const Tensor<T>& f = feat.data;
  const auto fg = downsample_mask(mask, f.height(), f.width());
  const std::size_t c = f.channels();
  Prototype<T> p{Tensor<T>(1, 1, c), 0, false};
  std::size_t count = 0;
  for (std::size_t y = 0; y < f.height(); ++y)
    for (std::size_t x = 0; x < f.width(); ++x) {
      if (!fg[y * f.width() + x]) continue;
      auto px = f.pixel(y, x);
      for (std::size_t k = 0; k < c; ++k) p.data[k] += px[k];
      ++count;
    }
  if (count == 0) {
    p.fallback = true;
    for (std::size_t y = 0; y < f.height(); ++y)
      for (std::size_t x = 0; x < f.width(); ++x) {
        auto px = f.pixel(y, x);
        for (std::size_t k = 0; k < c; ++k) p.data[k] += px[k];
      }
    count = f.height() * f.width();
  }
  p.data *= T{1} / static_cast<T>(count);
  return p;
}

}  // namespace mfnet
