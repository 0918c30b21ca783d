#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mfnet/core/autograd.hpp"
#include "mfnet/core/layers.hpp"
#include "mfnet/core/rng.hpp"
#include "mfnet/core/tensor.hpp"

namespace testutil {

using mfnet::Rng;
using mfnet::Tensor;

inline Tensor<double> random_tensor(Rng& rng, std::size_t h, std::size_t w, std::size_t c, double scale = 1.0) {
  Tensor<double> t(h, w, c);
  for (auto& v : t.values()) v = rng.normal(0.0, scale);
  return t;
}

inline mfnet::LabelMap random_labels(Rng& rng, std::size_t h, std::size_t w, int max_label) {
  mfnet::LabelMap m(h, w, 0);
  for (auto& v : m.data) v = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(max_label) + 1));
  return m;
}

// Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor) between an
// analytic and a numeric gradient.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                             double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

// Central differences of a scalar function over every entry of `target`.
inline std::vector<double> numeric_gradient(Tensor<double>& target, const std::function<double()>& f,
                                            double h = 1e-6) {
  std::vector<double> g(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double saved = target[i];
    target[i] = saved + h;
    const double up = f();
    target[i] = saved - h;
    const double down = f();
    target[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Builds the graph with `build`, back-propagates, and compares the gradient of
// every Var in `inputs` against central differences. Returns the worst
// norm-wise relative error.
inline double check_gradients(const std::vector<mfnet::ad::Var<double>>& inputs,
                              const std::function<mfnet::ad::Var<double>()>& build, double h = 1e-6) {
  for (const auto& v : inputs) {
    v->requires_grad = true;
    v->grad = Tensor<double>(v->value.shape());
  }
  mfnet::ad::backward(build());
  double worst = 0.0;
  for (const auto& v : inputs) {
    const std::vector<double> analytic(v->grad.values().begin(), v->grad.values().end());
    const auto numeric = numeric_gradient(v->value, [&] { return build()->value[0]; }, h);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

// Contracts a tensor Var to a scalar with fixed random coefficients so that
// every output element carries a distinct upstream gradient.
inline mfnet::ad::Var<double> project(const mfnet::ad::Var<double>& x, const Tensor<double>& coeffs) {
  Tensor<double> v(1, 1, 1);
  for (std::size_t i = 0; i < x->value.size(); ++i) v[0] += coeffs[i] * x->value[i];
  return mfnet::ad::custom<double>(std::move(v), {x}, [coeffs](const Tensor<double>& up, auto ps) {
    auto& g = ps[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += coeffs[i] * up[0];
  });
}

}  // namespace testutil
