#pragma once
// Minimal reverse-mode differentiation over HWC tensors.
//
// A Var is a shared node holding a value, a lazily sized gradient and a
// closure that pushes its gradient into its parents. Parameters are long-lived
// Vars; graphs built from them are released when the last result is dropped.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "mfnet/core/kernels.hpp"
#include "mfnet/core/tensor.hpp"

namespace mfnet::ad {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  void zero_grad() {
    if (!grad.empty()) grad.fill(T{0});
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->grad = Tensor<T>(n->value.shape());
  return n;
}

namespace detail {

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return n;
}

}  // namespace detail

// Back-propagates d(root)/d(.) into every reachable node that requires grad.
// `seed` scales the root gradient (root must be a scalar 1x1x1 tensor).
template <typename T>
void backward(const Var<T>& root, T seed = T{1}) {
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (n->backward) n->grad = Tensor<T>(n->value.shape());
  }
  root->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) {
      n->backward(*n);
      n->grad = Tensor<T>();  // interior gradients are not needed afterwards
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              kernels::ConvGeometry g) {
  Tensor<T> out = kernels::conv2d(x->value, weight->value, bias ? &bias->value : nullptr, g);
  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return detail::make_result<T>(std::move(out), parents, [x, weight, bias, g](Node<T>& self) {
    kernels::conv2d_backward(x->value, weight->value, self.grad, g,
                             x->requires_grad ? &x->grad_buffer() : nullptr,
                             weight->requires_grad ? &weight->grad_buffer() : nullptr,
                             bias && bias->requires_grad ? &bias->grad_buffer() : nullptr);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x->value;
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return detail::make_result<T>(std::move(out), {x}, [x](Node<T>& self) {
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x->value[i] > T{0}) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = a->value;
  out += b->value;
  return detail::make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a->requires_grad) a->grad_buffer() += self.grad;
    if (b->requires_grad) b->grad_buffer() += self.grad;
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  out *= s;
  return detail::make_result<T>(std::move(out), {a}, [a, s](Node<T>& self) {
    auto& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <typename T>
Var<T> sum(const std::vector<Var<T>>& xs) {
  Tensor<T> out = xs.at(0)->value;
  for (std::size_t i = 1; i < xs.size(); ++i) out += xs[i]->value;
  return detail::make_result<T>(std::move(out), xs, [xs](Node<T>& self) {
    for (const auto& x : xs)
      if (x->requires_grad) x->grad_buffer() += self.grad;
  });
}

// map (H, W, C) + vec (1, 1, C) replicated over every pixel.
template <typename T>
Var<T> add_broadcast(const Var<T>& map, const Var<T>& vec) {
  const std::size_t c = map->value.channels();
  if (vec->value.size() != c) throw ConfigError("add_broadcast: channel mismatch");
  Tensor<T> out = map->value;
  for (std::size_t y = 0; y < out.height(); ++y)
    for (std::size_t x = 0; x < out.width(); ++x) {
      auto p = out.pixel(y, x);
      for (std::size_t k = 0; k < c; ++k) p[k] += vec->value[k];
    }
  return detail::make_result<T>(std::move(out), {map, vec}, [map, vec, c](Node<T>& self) {
    if (map->requires_grad) map->grad_buffer() += self.grad;
    if (vec->requires_grad) {
      auto& g = vec->grad_buffer();
      for (std::size_t y = 0; y < self.grad.height(); ++y)
        for (std::size_t x = 0; x < self.grad.width(); ++x) {
          auto p = self.grad.pixel(y, x);
          for (std::size_t k = 0; k < c; ++k) g[k] += p[k];
        }
    }
  });
}

// vec (1, 1, C) replicated to (H, W, C).
template <typename T>
Var<T> broadcast(const Var<T>& vec, std::size_t h, std::size_t w) {
  const std::size_t c = vec->value.size();
  Tensor<T> out(h, w, c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      auto p = out.pixel(y, x);
      for (std::size_t k = 0; k < c; ++k) p[k] = vec->value[k];
    }
  return detail::make_result<T>(std::move(out), {vec}, [vec, c](Node<T>& self) {
    auto& g = vec->grad_buffer();
    for (std::size_t y = 0; y < self.grad.height(); ++y)
      for (std::size_t x = 0; x < self.grad.width(); ++x) {
        auto p = self.grad.pixel(y, x);
        for (std::size_t k = 0; k < c; ++k) g[k] += p[k];
      }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  const Shape s0 = xs.at(0)->value.shape();
  std::size_t total = 0;
  for (const auto& x : xs) {
    if (x->value.height() != s0.h || x->value.width() != s0.w)
      throw ConfigError("concat_channels: spatial mismatch");
    total += x->value.channels();
  }
  Tensor<T> out(s0.h, s0.w, total);
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t c = x->value.channels();
    for (std::size_t y = 0; y < s0.h; ++y)
      for (std::size_t xx = 0; xx < s0.w; ++xx) {
        auto src = x->value.pixel(y, xx);
        std::copy(src.begin(), src.end(), &out(y, xx, offset));
      }
    offset += c;
  }
  return detail::make_result<T>(std::move(out), xs, [xs](Node<T>& self) {
    std::size_t offset = 0;
    for (const auto& x : xs) {
      const std::size_t c = x->value.channels();
      if (x->requires_grad) {
        auto& g = x->grad_buffer();
        for (std::size_t y = 0; y < g.height(); ++y)
          for (std::size_t xx = 0; xx < g.width(); ++xx) {
            auto dst = g.pixel(y, xx);
            const T* src = &self.grad(y, xx, offset);
            for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
          }
      }
      offset += c;
    }
  });
}

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, std::size_t h, std::size_t w) {
  if (x->value.height() == h && x->value.width() == w) return x;
  Tensor<T> out = kernels::bilinear_resize(x->value, h, w);
  return detail::make_result<T>(std::move(out), {x}, [x](Node<T>& self) {
    kernels::bilinear_resize_backward(self.grad, x->grad_buffer());
  });
}

template <typename T>
Var<T> softmax_channels(const Var<T>& logits) {
  Tensor<T> out = kernels::softmax_channels(logits->value);
  auto probs = std::make_shared<Tensor<T>>(out);
  return detail::make_result<T>(std::move(out), {logits}, [logits, probs](Node<T>& self) {
    auto& g = logits->grad_buffer();
    const std::size_t c = g.channels();
    for (std::size_t y = 0; y < g.height(); ++y)
      for (std::size_t x = 0; x < g.width(); ++x) {
        auto p = probs->pixel(y, x);
        auto go = self.grad.pixel(y, x);
        T dot{0};
        for (std::size_t k = 0; k < c; ++k) dot += go[k] * p[k];
        auto gi = g.pixel(y, x);
        for (std::size_t k = 0; k < c; ++k) gi[k] += p[k] * (go[k] - dot);
      }
  });
}

// Rows (1, 1, C) stacked into (K, 1, C).
// Every pixel vector divided by sqrt(|x|^2 + eps).
template <typename T>
Var<T> normalize_pixels(const Var<T>& x, T eps = T(1e-12)) {
  const std::size_t c = x->value.channels(), n = x->value.height() * x->value.width();
  Tensor<T> out(x->value.shape());
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = eps;
    for (std::size_t k = 0; k < c; ++k) s += x->value[i * c + k] * x->value[i * c + k];
    norms[i] = std::sqrt(s);
    for (std::size_t k = 0; k < c; ++k) out[i * c + k] = x->value[i * c + k] / norms[i];
  }
  return detail::make_result<T>(std::move(out), {x}, [x, norms = std::move(norms), c](Node<T>& self) {
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < norms.size(); ++i) {
      T dot = 0;
      for (std::size_t k = 0; k < c; ++k) dot += self.value[i * c + k] * self.grad[i * c + k];
      for (std::size_t k = 0; k < c; ++k)
        g[i * c + k] += (self.grad[i * c + k] - self.value[i * c + k] * dot) / norms[i];
    }
  });
}

template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& rows) {
  const std::size_t c = rows.at(0)->value.size();
  Tensor<T> out(rows.size(), 1, c);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k]->value.size() != c) throw ConfigError("stack_rows: length mismatch");
    std::copy(rows[k]->value.data(), rows[k]->value.data() + c, &out(k, 0, 0));
  }
  return detail::make_result<T>(std::move(out), rows, [rows, c](Node<T>& self) {
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (!rows[k]->requires_grad) continue;
      auto& g = rows[k]->grad_buffer();
      for (std::size_t i = 0; i < c; ++i) g[i] += self.grad(k, 0, i);
    }
  });
}

// Row k of a (K, 1, C) tensor as (1, 1, C).
template <typename T>
Var<T> row(const Var<T>& m, std::size_t k) {
  const std::size_t c = m->value.channels();
  Tensor<T> out(1, 1, c);
  std::copy(&m->value(k, 0, 0), &m->value(k, 0, 0) + c, out.data());
  return detail::make_result<T>(std::move(out), {m}, [m, k, c](Node<T>& self) {
    auto& g = m->grad_buffer();
    for (std::size_t i = 0; i < c; ++i) g(k, 0, i) += self.grad[i];
  });
}

// Mean over the rows of (K, 1, C) -> (1, 1, C).
template <typename T>
Var<T> mean_rows(const Var<T>& m) {
  const std::size_t kk = m->value.height(), c = m->value.channels();
  Tensor<T> out(1, 1, c);
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t i = 0; i < c; ++i) out[i] += m->value(k, 0, i);
  out *= T{1} / static_cast<T>(kk);
  return detail::make_result<T>(std::move(out), {m}, [m, kk, c](Node<T>& self) {
    auto& g = m->grad_buffer();
    const T inv = T{1} / static_cast<T>(kk);
    for (std::size_t k = 0; k < kk; ++k)
      for (std::size_t i = 0; i < c; ++i) g(k, 0, i) += inv * self.grad[i];
  });
}

// Channel slice [begin, begin + count).
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape s = x->value.shape();
  if (begin + count > s.c) throw ConfigError("slice_channels: out of range");
  Tensor<T> out(s.h, s.w, count);
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t xx = 0; xx < s.w; ++xx)
      for (std::size_t k = 0; k < count; ++k) out(y, xx, k) = x->value(y, xx, begin + k);
  return detail::make_result<T>(std::move(out), {x}, [x, begin, count](Node<T>& self) {
    auto& g = x->grad_buffer();
    for (std::size_t y = 0; y < g.height(); ++y)
      for (std::size_t xx = 0; xx < g.width(); ++xx)
        for (std::size_t k = 0; k < count; ++k) g(y, xx, begin + k) += self.grad(y, xx, k);
  });
}

// Scaled dot-product attention over K rows:
//   out_k = sum_j softmax_j(<q_k, key_j> / sqrt(d)) * value_j
// q, key: (K, 1, d); value: (K, 1, dv). Weights are returned through `weights_out`.
template <typename T>
Var<T> row_attention(const Var<T>& q, const Var<T>& key, const Var<T>& value,
                     Tensor<T>* weights_out = nullptr) {
  const std::size_t kk = q->value.height();
  const std::size_t d = q->value.channels();
  const std::size_t dv = value->value.channels();
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(d));
  auto w = std::make_shared<Tensor<T>>(kk, 1, kk);
  for (std::size_t k = 0; k < kk; ++k) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < kk; ++j) {
      T dot{0};
      for (std::size_t i = 0; i < d; ++i) dot += q->value(k, 0, i) * key->value(j, 0, i);
      (*w)(k, 0, j) = dot * inv_sqrt_d;
      mx = std::max(mx, (*w)(k, 0, j));
    }
    T s{0};
    for (std::size_t j = 0; j < kk; ++j) {
      (*w)(k, 0, j) = std::exp((*w)(k, 0, j) - mx);
      s += (*w)(k, 0, j);
    }
    for (std::size_t j = 0; j < kk; ++j) (*w)(k, 0, j) /= s;
  }
  if (weights_out) *weights_out = *w;
  Tensor<T> out(kk, 1, dv);
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t j = 0; j < kk; ++j) {
      const T wkj = (*w)(k, 0, j);
      for (std::size_t i = 0; i < dv; ++i) out(k, 0, i) += wkj * value->value(j, 0, i);
    }
  return detail::make_result<T>(
      std::move(out), {q, key, value}, [q, key, value, w, kk, d, dv, inv_sqrt_d](Node<T>& self) {
        // d weights
        Tensor<T> gw(kk, 1, kk);
        for (std::size_t k = 0; k < kk; ++k)
          for (std::size_t j = 0; j < kk; ++j) {
            T acc{0};
            for (std::size_t i = 0; i < dv; ++i) acc += self.grad(k, 0, i) * value->value(j, 0, i);
            gw(k, 0, j) = acc;
          }
        if (value->requires_grad) {
          auto& gv = value->grad_buffer();
          for (std::size_t k = 0; k < kk; ++k)
            for (std::size_t j = 0; j < kk; ++j)
              for (std::size_t i = 0; i < dv; ++i) gv(j, 0, i) += (*w)(k, 0, j) * self.grad(k, 0, i);
        }
        // d logits through the row softmax
        Tensor<T> gl(kk, 1, kk);
        for (std::size_t k = 0; k < kk; ++k) {
          T dot{0};
          for (std::size_t j = 0; j < kk; ++j) dot += gw(k, 0, j) * (*w)(k, 0, j);
          for (std::size_t j = 0; j < kk; ++j)
            gl(k, 0, j) = (*w)(k, 0, j) * (gw(k, 0, j) - dot) * inv_sqrt_d;
        }
        if (q->requires_grad) {
          auto& gq = q->grad_buffer();
          for (std::size_t k = 0; k < kk; ++k)
            for (std::size_t j = 0; j < kk; ++j)
              for (std::size_t i = 0; i < d; ++i) gq(k, 0, i) += gl(k, 0, j) * key->value(j, 0, i);
        }
        if (key->requires_grad) {
          auto& gk = key->grad_buffer();
          for (std::size_t k = 0; k < kk; ++k)
            for (std::size_t j = 0; j < kk; ++j)
              for (std::size_t i = 0; i < d; ++i) gk(j, 0, i) += gl(k, 0, j) * q->value(k, 0, i);
        }
      });
}

// Per-pixel softmax across Z single-channel logit maps, then convex
// combination of Z feature maps: out = sum_z a_z * feats_z.
// All maps must already share one spatial size.
template <typename T>
Var<T> softmax_blend(const std::vector<Var<T>>& logits, const std::vector<Var<T>>& feats,
                     std::vector<Tensor<T>>* weights_out = nullptr) {
  const std::size_t z = logits.size();
  if (z == 0 || feats.size() != z) throw ConfigError("softmax_blend: branch count mismatch");
  const Shape fs = feats[0]->value.shape();
  auto weights = std::make_shared<std::vector<Tensor<T>>>(z, Tensor<T>(fs.h, fs.w, 1));
  for (std::size_t y = 0; y < fs.h; ++y)
    for (std::size_t x = 0; x < fs.w; ++x) {
      T mx = logits[0]->value(y, x, 0);
      for (std::size_t i = 1; i < z; ++i) mx = std::max(mx, logits[i]->value(y, x, 0));
      T s{0};
      for (std::size_t i = 0; i < z; ++i) {
        (*weights)[i](y, x, 0) = std::exp(logits[i]->value(y, x, 0) - mx);
        s += (*weights)[i](y, x, 0);
      }
      for (std::size_t i = 0; i < z; ++i) (*weights)[i](y, x, 0) /= s;
    }
  Tensor<T> out(fs);
  for (std::size_t i = 0; i < z; ++i) {
    if (!(feats[i]->value.shape() == fs) || logits[i]->value.height() != fs.h ||
        logits[i]->value.width() != fs.w)
      throw ConfigError("softmax_blend: spatial mismatch");
    for (std::size_t y = 0; y < fs.h; ++y)
      for (std::size_t x = 0; x < fs.w; ++x) {
        const T a = (*weights)[i](y, x, 0);
        auto src = feats[i]->value.pixel(y, x);
        auto dst = out.pixel(y, x);
        for (std::size_t k = 0; k < fs.c; ++k) dst[k] += a * src[k];
      }
  }
  if (weights_out) *weights_out = *weights;
  std::vector<Var<T>> parents = logits;
  parents.insert(parents.end(), feats.begin(), feats.end());
  return detail::make_result<T>(std::move(out), parents, [logits, feats, weights, z, fs](Node<T>& self) {
    std::vector<T> da(z);
    for (std::size_t y = 0; y < fs.h; ++y)
      for (std::size_t x = 0; x < fs.w; ++x) {
        auto go = self.grad.pixel(y, x);
        T mean{0};
        for (std::size_t i = 0; i < z; ++i) {
          auto f = feats[i]->value.pixel(y, x);
          T acc{0};
          for (std::size_t k = 0; k < fs.c; ++k) acc += go[k] * f[k];
          da[i] = acc;
          mean += (*weights)[i](y, x, 0) * acc;
        }
        for (std::size_t i = 0; i < z; ++i) {
          const T a = (*weights)[i](y, x, 0);
          if (feats[i]->requires_grad) {
            auto gf = feats[i]->grad_buffer().pixel(y, x);
            for (std::size_t k = 0; k < fs.c; ++k) gf[k] += a * go[k];
          }
          if (logits[i]->requires_grad) logits[i]->grad_buffer()(y, x, 0) += a * (da[i] - mean);
        }
      }
  });
}

// Scalar combination sum_i coeff_i * x_i of 1x1x1 Vars.
template <typename T>
Var<T> linear_combination(const std::vector<Var<T>>& xs, const std::vector<T>& coeffs) {
  Tensor<T> out(1, 1, 1);
  for (std::size_t i = 0; i < xs.size(); ++i) out[0] += coeffs[i] * xs[i]->value[0];
  return detail::make_result<T>(std::move(out), xs, [xs, coeffs](Node<T>& self) {
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (xs[i]->requires_grad) xs[i]->grad_buffer()[0] += coeffs[i] * self.grad[0];
  });
}

// Generic op with a caller-supplied backward: `grad_fn(parent_index, upstream)`
// returns the contribution to that parent's gradient.
template <typename T>
Var<T> custom(Tensor<T> value, std::vector<Var<T>> parents,
              std::function<void(const Tensor<T>& upstream, std::span<const Var<T>> parents)> grad_fn) {
  auto ps = parents;
  return detail::make_result<T>(std::move(value), std::move(parents),
                                [ps, grad_fn](Node<T>& self) { grad_fn(self.grad, ps); });
}

}  // namespace mfnet::ad
