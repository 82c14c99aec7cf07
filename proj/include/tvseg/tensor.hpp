#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "tvseg/core.hpp"

namespace tvseg {

/// Flat parameter tensor with a shape tag. Used for network weights and
/// optimizer moments; activations use Volume.
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(numel_of(shape)), T(0));
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 1) throw InvalidArgument("tensor dims must be >= 1");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }
  T& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  T operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(T x) { std::fill(v.begin(), v.end(), x); }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  Tensor<T> z;
  z.shape = t.shape;
  z.v.assign(t.v.size(), T(0));
  return z;
}

/// Reference to a named parameter tensor, used to walk a parameter set in a
/// fixed deterministic order (optimizer, checkpoints, gradient checks).
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

}  // namespace tvseg
