#pragma once
// Dense rank-3 tensor in height x width x channels (HWC) order.
//
// Every spatial quantity in the pipeline (images, feature maps, logits,
// probability maps) is an HWC tensor. Vectors are stored as 1x1xC, small
// matrices as Rx1xC so that 1x1 convolutions double as linear maps.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mfnet/core/error.hpp"

namespace mfnet {

struct Shape {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;

  std::size_t size() const { return h * w * c; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << h << ", " << w << ", " << c << ')';
    return os.str();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape_(s), data_(s.size(), fill) {}
  Tensor(std::size_t h, std::size_t w, std::size_t c, T fill = T{0})
      : Tensor(Shape{h, w, c}, fill) {}

  static Tensor vector(std::span<const T> values) {
    Tensor t(1, 1, values.size());
    std::copy(values.begin(), values.end(), t.data_.begin());
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t height() const { return shape_.h; }
  std::size_t width() const { return shape_.w; }
  std::size_t channels() const { return shape_.c; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t y, std::size_t x, std::size_t ch) {
    assert(y < shape_.h && x < shape_.w && ch < shape_.c);
    return data_[(y * shape_.w + x) * shape_.c + ch];
  }
  const T& operator()(std::size_t y, std::size_t x, std::size_t ch) const {
    assert(y < shape_.h && x < shape_.w && ch < shape_.c);
    return data_[(y * shape_.w + x) * shape_.c + ch];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Channel vector at one pixel.
  std::span<T> pixel(std::size_t y, std::size_t x) {
    return {data_.data() + (y * shape_.w + x) * shape_.c, shape_.c};
  }
  std::span<const T> pixel(std::size_t y, std::size_t x) const {
    return {data_.data() + (y * shape_.w + x) * shape_.c, shape_.c};
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  void require_same_shape(const Tensor& o, const char* where) const {
    if (!(shape_ == o.shape_)) {
      throw ConfigError(std::string(where) + ": shape mismatch " + shape_.str() + " vs " +
                        o.shape_.str());
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Integer label image (episode-local or dataset labels), row-major HxW.
struct LabelMap {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<int> data;

  LabelMap() = default;
  LabelMap(std::size_t height, std::size_t width, int fill = 0)
      : h(height), w(width), data(height * width, fill) {}

  int& at(std::size_t y, std::size_t x) { return data[y * w + x]; }
  int at(std::size_t y, std::size_t x) const { return data[y * w + x]; }
  std::size_t size() const { return data.size(); }
  bool contains(int label) const {
    return std::find(data.begin(), data.end(), label) != data.end();
  }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace mfnet
