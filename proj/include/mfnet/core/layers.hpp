#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mfnet/core/autograd.hpp"
#include "mfnet/core/rng.hpp"

namespace mfnet {

template <typename T>
struct NamedParam {
  std::string name;
  ad::Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// Convolution with learnable weight (out, k*k, in) and optional bias (1, 1, out).
template <typename T>
struct Conv2d {
  ad::Var<T> weight;
  ad::Var<T> bias;  // null when bias-free
  kernels::ConvGeometry geom;

  Conv2d() = default;

  // He-normal initialisation scaled by `gain`; gain 0 yields all-zero weights.
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng,
         bool with_bias = true, double gain = 1.0)
      : geom{kernel, stride, kernel / 2} {
    Tensor<T> w(out, kernel * kernel, in);
    const double stddev = gain * std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
    for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, stddev));
    weight = ad::parameter(std::move(w));
    if (with_bias) bias = ad::parameter(Tensor<T>(1, 1, out));
  }

  std::size_t in_channels() const { return weight->value.channels(); }
  std::size_t out_channels() const { return weight->value.height(); }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::conv2d(x, weight, bias, geom); }

  Tensor<T> apply(const Tensor<T>& x) const {
    return kernels::conv2d(x, weight->value, bias ? &bias->value : nullptr, geom);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias) out.push_back({prefix + ".bias", bias});
  }
};

// Two 3x3 convolutions with a rectifier between them and an identity skip:
//   out = relu(x + conv2(relu(conv1(x))))
template <typename T>
struct ResidualBlock {
  Conv2d<T> conv1;
  Conv2d<T> conv2;

  ResidualBlock() = default;
  ResidualBlock(std::size_t channels, Rng& rng)
      : conv1(channels, channels, 3, 1, rng), conv2(channels, channels, 3, 1, rng, true, 0.5) {}

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    return ad::relu(ad::add(x, conv2(ad::relu(conv1(x)))));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    conv1.collect(prefix + ".conv1", out);
    conv2.collect(prefix + ".conv2", out);
  }
};

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) p.var->zero_grad();
}

}  // namespace mfnet
