#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tvseg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Precondition / usage violations (bad shapes, bad options). CLI exit code 2.
struct InvalidArgument : Error {
  using Error::Error;
};

/// Non-finite values or failed numerical checks. CLI exit code 3.
struct NumericError : Error {
  using Error::Error;
};

/// Voxel grid extents, depth x height x width. w varies fastest in memory.
struct Shape3 {
  int64_t d = 0;
  int64_t h = 0;
  int64_t w = 0;

  int64_t voxels() const { return d * h * w; }
  bool valid() const { return d >= 1 && h >= 1 && w >= 1; }
  bool operator==(const Shape3& o) const { return d == o.d && h == o.h && w == o.w; }
  bool operator!=(const Shape3& o) const { return !(*this == o); }

  std::string str() const {
    return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

namespace detail {
// Caps absurd allocations; the artifact is desk scale.
constexpr int64_t kMaxVoxels = int64_t(1) << 32;

inline void check_shape(int64_t channels, const Shape3& s) {
  if (channels < 1) throw InvalidArgument("volume channels must be >= 1, got " + std::to_string(channels));
  if (!s.valid()) throw InvalidArgument("invalid volume shape " + s.str());
  if (s.voxels() > kMaxVoxels || channels * s.voxels() > kMaxVoxels)
    throw InvalidArgument("volume too large: " + std::to_string(channels) + "x" + s.str());
}
}  // namespace detail

/// Dense channel-major scalar volume: data index = ((c*d + i)*h + j)*w + k.
template <typename T>
class Volume {
public:
  Volume() = default;

  Volume(int64_t channels, Shape3 shape, T fill = T(0)) : channels_(channels), shape_(shape) {
    detail::check_shape(channels, shape);
    data_.assign(static_cast<size_t>(channels * shape.voxels()), fill);
  }

  int64_t channels() const { return channels_; }
  const Shape3& shape() const { return shape_; }
  int64_t voxels() const { return shape_.voxels(); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  /// Pointer to the start of one channel's d*h*w block.
  T* channel(int64_t c) { return data_.data() + c * shape_.voxels(); }
  const T* channel(int64_t c) const { return data_.data() + c * shape_.voxels(); }

  int64_t offset(int64_t c, int64_t i, int64_t j, int64_t k) const {
    return ((c * shape_.d + i) * shape_.h + j) * shape_.w + k;
  }

  /// Unchecked access for hot loops.
  T& operator()(int64_t c, int64_t i, int64_t j, int64_t k) { return data_[offset(c, i, j, k)]; }
  T operator()(int64_t c, int64_t i, int64_t j, int64_t k) const { return data_[offset(c, i, j, k)]; }

  /// Bounds-checked access.
  T& at(int64_t c, int64_t i, int64_t j, int64_t k) {
    check_index(c, i, j, k);
    return data_[offset(c, i, j, k)];
  }
  T at(int64_t c, int64_t i, int64_t j, int64_t k) const {
    check_index(c, i, j, k);
    return data_[offset(c, i, j, k)];
  }

  bool all_finite() const {
    for (T x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  bool operator==(const Volume& o) const {
    return channels_ == o.channels_ && shape_ == o.shape_ && data_ == o.data_;
  }

private:
  void check_index(int64_t c, int64_t i, int64_t j, int64_t k) const {
    if (c < 0 || c >= channels_ || i < 0 || i >= shape_.d || j < 0 || j >= shape_.h || k < 0 ||
        k >= shape_.w)
      throw InvalidArgument("voxel index (" + std::to_string(c) + "," + std::to_string(i) + "," +
                            std::to_string(j) + "," + std::to_string(k) + ") out of bounds for " +
                            std::to_string(channels_) + "x" + shape_.str());
  }

  int64_t channels_ = 0;
  Shape3 shape_{};
  std::vector<T> data_;
};

using VolumeF = Volume<float>;
using VolumeD = Volume<double>;

/// Per-voxel {0,1} labels over a Shape3 grid.
class BinaryMask {
public:
  BinaryMask() = default;

  explicit BinaryMask(Shape3 shape, uint8_t fill = 0) : shape_(shape) {
    detail::check_shape(1, shape);
    if (fill > 1) throw InvalidArgument("mask fill must be 0 or 1");
    data_.assign(static_cast<size_t>(shape.voxels()), fill);
  }

  const Shape3& shape() const { return shape_; }
  int64_t voxels() const { return shape_.voxels(); }
  bool empty() const { return data_.empty(); }

  uint8_t* data() { return data_.data(); }
  const uint8_t* data() const { return data_.data(); }
  std::vector<uint8_t>& vec() { return data_; }
  const std::vector<uint8_t>& vec() const { return data_; }

  int64_t offset(int64_t i, int64_t j, int64_t k) const {
    return (i * shape_.h + j) * shape_.w + k;
  }
  uint8_t& operator()(int64_t i, int64_t j, int64_t k) { return data_[offset(i, j, k)]; }
  uint8_t operator()(int64_t i, int64_t j, int64_t k) const { return data_[offset(i, j, k)]; }

  int64_t count_ones() const {
    int64_t n = 0;
    for (uint8_t v : data_) n += v;
    return n;
  }

  bool operator==(const BinaryMask& o) const { return shape_ == o.shape_ && data_ == o.data_; }
  bool operator!=(const BinaryMask& o) const { return !(*this == o); }

private:
  Shape3 shape_{};
  std::vector<uint8_t> data_;
};

/// Connected-component labeling result. 0 is background; positive labels are
/// contiguous 1..num_clusters in first-encounter scan order.
struct LabelMap {
  Shape3 shape{};
  std::vector<int32_t> labels;
  int32_t num_clusters = 0;

  int32_t operator()(int64_t i, int64_t j, int64_t k) const {
    return labels[(i * shape.h + j) * shape.w + k];
  }
};

/// Extract one channel as a single-channel volume.
template <typename T>
Volume<T> slice_channel(const Volume<T>& v, int64_t c) {
  if (c < 0 || c >= v.channels())
    throw InvalidArgument("channel " + std::to_string(c) + " out of range");
  Volume<T> out(1, v.shape());
  const T* src = v.channel(c);
  std::copy(src, src + v.voxels(), out.data());
  return out;
}

/// Binarize a single-channel probability volume; out = 1 iff prob >= tau.
template <typename T>
BinaryMask mask_from_threshold(const Volume<T>& prob, double tau) {
  if (prob.channels() != 1)
    throw InvalidArgument("mask_from_threshold expects a single-channel volume, got " +
                          std::to_string(prob.channels()) + " channels");
  if (!(tau > 0.0 && tau < 1.0))
    throw InvalidArgument("threshold tau must be in (0,1), got " + std::to_string(tau));
  BinaryMask out(prob.shape());
  const T* p = prob.data();
  for (int64_t i = 0; i < prob.voxels(); ++i) out.data()[i] = (static_cast<double>(p[i]) >= tau) ? 1 : 0;
  return out;
}

struct OverlapCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  int64_t total() const { return tp + fp + fn + tn; }
};

/// Confusion counts treating `pred` as the prediction and `truth` as ground truth.
inline OverlapCounts count_overlap(const BinaryMask& pred, const BinaryMask& truth) {
  if (pred.shape() != truth.shape())
    throw InvalidArgument("count_overlap shape mismatch: " + pred.shape().str() + " vs " +
                          truth.shape().str());
  OverlapCounts c;
  const uint8_t* a = pred.data();
  const uint8_t* b = truth.data();
  const int64_t n = pred.voxels();
  for (int64_t i = 0; i < n; ++i) {
    c.tp += (a[i] & b[i]);
    c.fp += (a[i] & (1 - b[i]));
    c.fn += ((1 - a[i]) & b[i]);
  }
  c.tn = n - c.tp - c.fp - c.fn;
  return c;
}

}  // namespace tvseg
