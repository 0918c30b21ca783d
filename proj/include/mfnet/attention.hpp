#pragma once
// Support-feature modulation by grouped relational attention, and
// attention-weighted combination of multi-scale query features.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mfnet/core/autograd.hpp"
#include "mfnet/core/layers.hpp"
#include "mfnet/features.hpp"

namespace mfnet {

// Per group r: W_A^r, W_B^r : C -> d_k and W_V^r : C -> C / N_r, bias-free.
template <typename T>
struct RelationParams {
  std::size_t channels = 0;
  std::size_t groups = 0;
  std::vector<Conv2d<T>> wa;
  std::vector<Conv2d<T>> wb;
  std::vector<Conv2d<T>> wv;

  RelationParams() = default;
  RelationParams(std::size_t c, std::size_t n_r, Rng& rng) : channels(c), groups(n_r) {
    if (n_r == 0 || c % n_r != 0)
      throw ConfigError("relation: N_r=" + std::to_string(n_r) + " must divide C=" + std::to_string(c));
    const std::size_t d = c / n_r;
    for (std::size_t r = 0; r < n_r; ++r) {
      wa.emplace_back(c, d, 1, 1, rng, false);
      wb.emplace_back(c, d, 1, 1, rng, false);
      wv.emplace_back(c, d, 1, 1, rng, false, 0.5);
    }
  }

  std::size_t key_dim() const { return channels / groups; }

  void zero_values() {
    for (auto& v : wv) v.weight->value.fill(T{0});
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t r = 0; r < groups; ++r) {
      wa[r].collect(prefix + ".group" + std::to_string(r) + ".wa", out);
      wb[r].collect(prefix + ".group" + std::to_string(r) + ".wb", out);
      wv[r].collect(prefix + ".group" + std::to_string(r) + ".wv", out);
    }
  }
};

namespace detail {

template <typename T>
ad::Var<T> stack_prototypes(const std::vector<Tensor<T>>& shots) {
  std::vector<ad::Var<T>> rows;
  for (const auto& s : shots) rows.push_back(ad::constant(s));
  return ad::stack_rows(rows);
}

}  // namespace detail

// Relation weights of group r for a stack of K shot vectors (K, 1, C).
// Returns a (K, 1, K) row-stochastic matrix.
template <typename T>
Tensor<T> relation_weights(const ad::Var<T>& shots, const RelationParams<T>& params, std::size_t r) {
  Tensor<T> w;
  ad::row_attention(params.wa.at(r)(shots), params.wb.at(r)(shots), params.wv.at(r)(shots), &w);
  return w;
}

template <typename T>
Tensor<T> relation_weights(const std::vector<Tensor<T>>& shots, const RelationParams<T>& params,
                           std::size_t r) {
  return relation_weights(detail::stack_prototypes(shots), params, r);
}

// output_k = F_k + concat_r sum_j w^r_kj W_V^r F_j, on a (K, 1, C) stack.
template <typename T>
ad::Var<T> relational_modulate(const ad::Var<T>& shots, const RelationParams<T>& params) {
  if (shots->value.channels() != params.channels)
    throw ConfigError("relational_modulate: channel mismatch");
  std::vector<ad::Var<T>> heads;
  for (std::size_t r = 0; r < params.groups; ++r) {
    heads.push_back(ad::row_attention(params.wa[r](shots), params.wb[r](shots), params.wv[r](shots)));
  }
  return ad::add(shots, ad::concat_channels(heads));
}

template <typename T>
std::vector<Tensor<T>> relational_modulate(const std::vector<Tensor<T>>& shots,
                                           const RelationParams<T>& params) {
  const auto out = relational_modulate(detail::stack_prototypes(shots), params)->value;
  std::vector<Tensor<T>> result;
  for (std::size_t k = 0; k < shots.size(); ++k) {
    Tensor<T> v(1, 1, out.channels());
    for (std::size_t i = 0; i < out.channels(); ++i) v[i] = out(k, 0, i);
    result.push_back(std::move(v));
  }
  return result;
}

// Class prototype: mean of the K shot vectors, modulated first when
// use_relation is set and K > 1.
template <typename T>
ad::Var<T> class_prototype(const ad::Var<T>& shots, const RelationParams<T>& params, bool use_relation) {
  if (use_relation && shots->value.height() > 1) return ad::mean_rows(relational_modulate(shots, params));
  return ad::mean_rows(shots);
}

template <typename T>
Tensor<T> class_prototype(const std::vector<Tensor<T>>& shots, const RelationParams<T>& params,
                          bool use_relation) {
  return class_prototype(detail::stack_prototypes(shots), params, use_relation)->value;
}

// Shared across class branches and scales.
//   attention: 3x3 -> relu -> 3x3 -> relu -> 1x1 (one channel)
//   transform: 1x1 -> relu -> residual block
template <typename T>
struct ScaleAttnParams {
  Conv2d<T> attn1;
  Conv2d<T> attn2;
  Conv2d<T> attn3;
  Conv2d<T> transform;
  ResidualBlock<T> residual;

  ScaleAttnParams() = default;
  ScaleAttnParams(std::size_t c, Rng& rng)
      : attn1(c, c, 3, 1, rng),
        attn2(c, c, 3, 1, rng),
        attn3(c, 1, 1, 1, rng, true, 0.5),
        transform(c, c, 1, 1, rng),
        residual(c, rng) {}

  void collect(const std::string& prefix, ParamList<T>& out) const {
    attn1.collect(prefix + ".attn1", out);
    attn2.collect(prefix + ".attn2", out);
    attn3.collect(prefix + ".attn3", out);
    transform.collect(prefix + ".transform", out);
    residual.collect(prefix + ".residual", out);
  }
};

template <typename T>
struct ScaleBranch {
  ad::Var<T> attn;         // H^z x W^z x 1
  ad::Var<T> transformed;  // H^z x W^z x C
};

template <typename T>
ScaleBranch<T> scale_attention(const ad::Var<T>& x, const ScaleAttnParams<T>& p, bool with_attention = true) {
  ScaleBranch<T> b;
  if (with_attention) b.attn = p.attn3(ad::relu(p.attn2(ad::relu(p.attn1(x)))));
  b.transformed = p.residual(ad::relu(p.transform(x)));
  return b;
}

// Upsamples every branch to (h, w) and blends them with per-pixel softmax
// weights across scales. Without attention the scales are averaged.
template <typename T>
ad::Var<T> combine_scales(const std::vector<ScaleBranch<T>>& branches, std::size_t h, std::size_t w,
                          bool use_attention = true, std::vector<Tensor<T>>* weights_out = nullptr) {
  if (branches.empty()) throw ConfigError("combine_scales: no branches");
  std::vector<ad::Var<T>> feats;
  for (const auto& b : branches) feats.push_back(ad::upsample_bilinear(b.transformed, h, w));
  if (!use_attention) {
    if (feats.size() == 1) return feats[0];
    return ad::scale(ad::sum(feats), T{1} / static_cast<T>(feats.size()));
  }
  std::vector<ad::Var<T>> logits;
  for (const auto& b : branches) logits.push_back(ad::upsample_bilinear(b.attn, h, w));
  return ad::softmax_blend(logits, feats, weights_out);
}

}  // namespace mfnet
