#pragma once
// Weighted focal segmentation loss, triplet pools and selection for
// pixel-wise metric learning, triplet loss and the combined objective.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mfnet/core/autograd.hpp"
#include "mfnet/core/error.hpp"
#include "mfnet/core/rng.hpp"
#include "mfnet/core/tensor.hpp"

namespace mfnet {

struct FocalConfig {
  double gamma = 2.0;
  bool class_weighting = true;
  bool include_background = true;
  double eps = 1e-12;
  friend bool operator==(const FocalConfig&, const FocalConfig&) = default;
};

// omega_n = 1 / log(1.1 + M_n / M)
inline double focal_class_weight(std::size_t class_pixels, std::size_t total_pixels) {
  return 1.0 / std::log(1.1 + static_cast<double>(class_pixels) / static_cast<double>(total_pixels));
}

namespace detail {

struct FocalTerms {
  std::vector<double> weight;  // per label
  double norm = 0.0;           // 1 / (M * summed class count)
};

inline FocalTerms focal_terms(const LabelMap& gt, std::size_t labels, const FocalConfig& cfg) {
  FocalTerms t;
  std::vector<std::size_t> counts(labels, 0);
  for (int v : gt.data) {
    if (v < 0 || static_cast<std::size_t>(v) >= labels)
      throw DataError("focal_seg_loss: label " + std::to_string(v) + " out of range");
    ++counts[static_cast<std::size_t>(v)];
  }
  t.weight.resize(labels, 1.0);
  if (cfg.class_weighting)
    for (std::size_t n = 0; n < labels; ++n) t.weight[n] = focal_class_weight(counts[n], gt.size());
  const std::size_t summed = cfg.include_background ? labels : labels - 1;
  t.norm = 1.0 / (static_cast<double>(gt.size()) * static_cast<double>(summed));
  return t;
}

}  // namespace detail

// L = -1/(M * N') sum_m sum_n w_n (1 - p_mn)^gamma y_mn log p_mn
// over foreground labels, plus background when include_background is set.
template <typename T>
T focal_seg_loss(const Tensor<T>& probs, const LabelMap& gt, const FocalConfig& cfg) {
  if (probs.height() != gt.h || probs.width() != gt.w)
    throw ConfigError("focal_seg_loss: probability map and mask sizes differ");
  const auto terms = detail::focal_terms(gt, probs.channels(), cfg);
  double total = 0.0;
  for (std::size_t y = 0; y < gt.h; ++y)
    for (std::size_t x = 0; x < gt.w; ++x) {
      const int t = gt.at(y, x);
      if (t == 0 && !cfg.include_background) continue;
      const double p = static_cast<double>(probs(y, x, static_cast<std::size_t>(t)));
      total += terms.weight[static_cast<std::size_t>(t)] * std::pow(1.0 - p, cfg.gamma) *
               std::log(std::max(p, cfg.eps));
    }
  return static_cast<T>(-terms.norm * total);
}

template <typename T>
ad::Var<T> focal_seg_loss(const ad::Var<T>& probs, const LabelMap& gt, const FocalConfig& cfg) {
  Tensor<T> value(1, 1, 1);
  value[0] = focal_seg_loss(probs->value, gt, cfg);
  return ad::custom<T>(std::move(value), {probs}, [gt, cfg](const Tensor<T>& up, std::span<const ad::Var<T>> ps) {
    const auto& p = ps[0];
    auto& g = p->grad_buffer();
    const auto terms = detail::focal_terms(gt, p->value.channels(), cfg);
    for (std::size_t y = 0; y < gt.h; ++y)
      for (std::size_t x = 0; x < gt.w; ++x) {
        const int t = gt.at(y, x);
        if (t == 0 && !cfg.include_background) continue;
        const auto ti = static_cast<std::size_t>(t);
        const double prob = static_cast<double>(p->value(y, x, ti));
        const double q = 1.0 - prob;
        const bool clamped = prob < cfg.eps;
        const double logp = std::log(std::max(prob, cfg.eps));
        double d = 0.0;
        if (cfg.gamma != 0.0 && q > 0.0) d += -cfg.gamma * std::pow(q, cfg.gamma - 1.0) * logp;
        if (!clamped) d += std::pow(q, cfg.gamma) / prob;
        g(y, x, ti) += static_cast<T>(-terms.norm * terms.weight[ti] * d) * up[0];
      }
  });
}

// ---------------------------------------------------------------------------
// Metric-learning pools

struct PixelRef {
  std::size_t y = 0;
  std::size_t x = 0;
  friend bool operator==(const PixelRef&, const PixelRef&) = default;
  friend auto operator<=>(const PixelRef&, const PixelRef&) = default;
};

struct ClassPools {
  std::vector<PixelRef> anchors;         // gt = n, pred = n
  std::vector<PixelRef> hard_positives;  // gt = n, pred != n
  std::vector<PixelRef> hard_negatives;  // gt != n, pred = n
};

struct TripletPools {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<ClassPools> classes;  // index n - 1 for episode class n
};

inline TripletPools build_pools(const LabelMap& pred, const LabelMap& gt, std::size_t ways) {
  if (pred.h != gt.h || pred.w != gt.w) throw ConfigError("build_pools: mask sizes differ");
  TripletPools pools{gt.h, gt.w, std::vector<ClassPools>(ways)};
  for (std::size_t y = 0; y < gt.h; ++y)
    for (std::size_t x = 0; x < gt.w; ++x) {
      const int g = gt.at(y, x), p = pred.at(y, x);
      for (std::size_t n = 1; n <= ways; ++n) {
        const int c = static_cast<int>(n);
        auto& cp = pools.classes[n - 1];
        if (g == c && p == c) cp.anchors.push_back({y, x});
        else if (g == c) cp.hard_positives.push_back({y, x});
        else if (p == c) cp.hard_negatives.push_back({y, x});
      }
    }
  return pools;
}

enum class TripletStrategy { spat, rnd, fea };

inline std::string to_string(TripletStrategy s) {
  switch (s) {
    case TripletStrategy::spat: return "spat";
    case TripletStrategy::rnd: return "rnd";
    case TripletStrategy::fea: return "fea";
  }
  return "?";
}

inline TripletStrategy parse_triplet_strategy(const std::string& s) {
  if (s == "spat") return TripletStrategy::spat;
  if (s == "rnd") return TripletStrategy::rnd;
  if (s == "fea") return TripletStrategy::fea;
  throw ConfigError("unknown triplet strategy '" + s + "'");
}

struct Triplet {
  std::size_t class_label = 0;
  PixelRef anchor;
  PixelRef positive;
  PixelRef negative;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

inline double pixel_distance(PixelRef a, PixelRef b) {
  const double dy = static_cast<double>(a.y) - static_cast<double>(b.y);
  const double dx = static_cast<double>(a.x) - static_cast<double>(b.x);
  return std::sqrt(dy * dy + dx * dx);
}

// Bandwidth of the spatial kernel: tau_fraction x diagonal of the pool grid.
inline double spatial_tau(const TripletPools& pools, double tau_fraction) {
  return tau_fraction * std::sqrt(static_cast<double>(pools.h * pools.h + pools.w * pools.w));
}

// Unnormalised selection weights exp(-d(anchor, c) / tau).
inline std::vector<double> spatial_weights(PixelRef anchor, const std::vector<PixelRef>& candidates, double tau) {
  std::vector<double> w;
  w.reserve(candidates.size());
  double dmin = std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) dmin = std::min(dmin, pixel_distance(anchor, c));
  // Shifted by the nearest distance so at least one weight is exactly 1.
  for (const auto& c : candidates) w.push_back(std::exp(-(pixel_distance(anchor, c) - dmin) / tau));
  return w;
}

struct TripletSelectConfig {
  std::size_t count = 20;  // N_t
  TripletStrategy strategy = TripletStrategy::spat;
  double tau_fraction = 0.1;
};

template <typename T>
double squared_distance(const Tensor<T>& emb, PixelRef a, PixelRef b) {
  const auto pa = emb.pixel(a.y, a.x);
  const auto pb = emb.pixel(b.y, b.x);
  double s = 0.0;
  for (std::size_t k = 0; k < pa.size(); ++k) {
    const double d = static_cast<double>(pa[k]) - static_cast<double>(pb[k]);
    s += d * d;
  }
  return s;
}

// Up to N_t anchors drawn without replacement from the joint anchor pool;
// each forms a triplet inside its own class's pools. `embedding` is required
// by the feature-distance strategy only.
template <typename T = double>
std::vector<Triplet> select_triplets(const TripletPools& pools, const TripletSelectConfig& cfg, Rng& rng,
                                     const Tensor<T>* embedding = nullptr) {
  std::vector<std::pair<std::size_t, PixelRef>> joint;
  for (std::size_t n = 0; n < pools.classes.size(); ++n)
    for (const auto& a : pools.classes[n].anchors) joint.push_back({n, a});
  std::vector<Triplet> out;
  if (joint.empty() || cfg.count == 0) return out;
  if (cfg.strategy == TripletStrategy::fea && embedding == nullptr)
    throw ConfigError("select_triplets: feature strategy needs the embedding map");
  const double tau = spatial_tau(pools, cfg.tau_fraction);
  const auto picks = rng.sample_without_replacement(joint.size(), std::min(cfg.count, joint.size()));
  for (std::size_t idx : picks) {
    const auto [n, anchor] = joint[idx];
    const auto& cp = pools.classes[n];
    if (cp.hard_positives.empty() || cp.hard_negatives.empty()) continue;
    Triplet t{n + 1, anchor, {}, {}};
    switch (cfg.strategy) {
      case TripletStrategy::spat: {
        const auto w = spatial_weights(anchor, cp.hard_positives, tau);
        t.positive = cp.hard_positives[rng.weighted_index(w)];
        t.negative = cp.hard_negatives[rng.uniform_index(cp.hard_negatives.size())];
        break;
      }
      case TripletStrategy::rnd:
        t.positive = cp.hard_positives[rng.uniform_index(cp.hard_positives.size())];
        t.negative = cp.hard_negatives[rng.uniform_index(cp.hard_negatives.size())];
        break;
      case TripletStrategy::fea: {
        // Farthest positive and nearest negative in embedding space; ties keep the first.
        double best_p = -1.0, best_n = std::numeric_limits<double>::infinity();
        for (const auto& c : cp.hard_positives) {
          const double d = squared_distance(*embedding, anchor, c);
          if (d > best_p) best_p = d, t.positive = c;
        }
        for (const auto& c : cp.hard_negatives) {
          const double d = squared_distance(*embedding, anchor, c);
          if (d < best_n) best_n = d, t.negative = c;
        }
        break;
      }
    }
    out.push_back(t);
  }
  return out;
}

// sum over triplets of max(|f_a - f_p|^2 - |f_a - f_n|^2 + alpha, 0)
template <typename T>
T triplet_loss(const Tensor<T>& embedding, const std::vector<Triplet>& triplets, double alpha) {
  double total = 0.0;
  for (const auto& t : triplets) {
    const double v = squared_distance(embedding, t.anchor, t.positive) -
                     squared_distance(embedding, t.anchor, t.negative) + alpha;
    total += std::max(v, 0.0);
  }
  return static_cast<T>(total);
}

template <typename T>
ad::Var<T> triplet_loss(const ad::Var<T>& embedding, const std::vector<Triplet>& triplets, double alpha) {
  Tensor<T> value(1, 1, 1);
  value[0] = triplet_loss(embedding->value, triplets, alpha);
  return ad::custom<T>(std::move(value), {embedding},
                       [triplets, alpha](const Tensor<T>& up, std::span<const ad::Var<T>> ps) {
                         const auto& e = ps[0];
                         auto& g = e->grad_buffer();
                         const std::size_t c = e->value.channels();
                         for (const auto& t : triplets) {
                           const double v = squared_distance(e->value, t.anchor, t.positive) -
                                            squared_distance(e->value, t.anchor, t.negative) + alpha;
                           if (v <= 0.0) continue;
                           const auto fa = e->value.pixel(t.anchor.y, t.anchor.x);
                           const auto fp = e->value.pixel(t.positive.y, t.positive.x);
                           const auto fn = e->value.pixel(t.negative.y, t.negative.x);
                           std::vector<T> da(c), dp(c), dn(c);
                           for (std::size_t k = 0; k < c; ++k) {
                             da[k] = T{2} * (fn[k] - fp[k]) * up[0];
                             dp[k] = T{-2} * (fa[k] - fp[k]) * up[0];
                             dn[k] = T{2} * (fa[k] - fn[k]) * up[0];
                           }
                           auto ga = g.pixel(t.anchor.y, t.anchor.x);
                           auto gp = g.pixel(t.positive.y, t.positive.x);
                           auto gn = g.pixel(t.negative.y, t.negative.x);
                           for (std::size_t k = 0; k < c; ++k) {
                             ga[k] += da[k];
                             gp[k] += dp[k];
                             gn[k] += dn[k];
                           }
                         }
                       });
}

// L = L_seg + lambda * L_pml once epoch >= pml_start_epoch, else L_seg.
inline double total_loss(double seg, double pml, double lambda, std::size_t epoch, std::size_t pml_start_epoch) {
  return epoch >= pml_start_epoch ? seg + lambda * pml : seg;
}

template <typename T>
ad::Var<T> total_loss(const ad::Var<T>& seg, const ad::Var<T>& pml, double lambda, std::size_t epoch,
                      std::size_t pml_start_epoch) {
  if (epoch < pml_start_epoch || !pml) return seg;
  return ad::linear_combination<T>({seg, pml}, {T{1}, static_cast<T>(lambda)});
}

}  // namespace mfnet
