#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "crp/error.hpp"

namespace crp {

using Shape = std::vector<std::size_t>;

std::size_t shape_product(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array. Feature maps are channel-first (C, H, W); dense
/// vectors are (N,). Every extent is at least 1.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_product(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_product(shape_) != data_.size()) {
      fail(ErrorKind::shape, "tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_to_string(shape_));
    }
  }

  template <typename U>
  static BasicTensor cast_from(const BasicTensor<U>& other) {
    std::vector<T> out(other.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(other[i]);
    BasicTensor t(other.shape(), std::move(out));
    t.set_name(other.name());
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  /// Leading axis: channels for feature maps, features for vectors.
  std::size_t channels() const { return shape_.empty() ? 0 : shape_[0]; }
  /// Number of elements per channel.
  std::size_t channel_stride() const { return shape_.empty() ? 0 : size() / shape_[0]; }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  std::span<const T> channel(std::size_t c) const {
    const std::size_t n = channel_stride();
    return std::span<const T>(data_).subspan(c * n, n);
  }
  std::span<T> channel(std::size_t c) {
    const std::size_t n = channel_stride();
    return std::span<T>(data_).subspan(c * n, n);
  }

  const std::string& name() const noexcept { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }

  /// Same data, new shape with identical element count.
  BasicTensor reshaped(Shape shape) const {
    BasicTensor t(std::move(shape), data_);
    t.name_ = name_;
    return t;
  }

  bool operator==(const BasicTensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  void check_extents() const {
    if (shape_.empty()) fail(ErrorKind::shape, "tensor rank must be at least 1");
    for (std::size_t e : shape_) {
      if (e == 0) fail(ErrorKind::shape, "tensor extents must be >= 1, got " + shape_to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
  std::string name_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;
using IntTensor = BasicTensor<std::int32_t>;
using ByteTensor = BasicTensor<std::uint8_t>;

/// Boolean selection with its own shape; stored as bytes.
struct BoolMask {
  Shape shape;
  std::vector<std::uint8_t> bits;

  BoolMask() = default;
  BoolMask(Shape s, bool fill);
  BoolMask(Shape s, std::vector<std::uint8_t> b);

  std::size_t size() const noexcept { return bits.size(); }
  bool operator[](std::size_t i) const { return bits[i] != 0; }
  std::size_t count() const;
  BoolMask complement() const;
};

enum class SpatialReduce { sum, max };

/// Per-channel reduction over all non-channel axes of a rank-3 tensor.
template <typename T>
BasicTensor<T> reduce_spatial(const BasicTensor<T>& t, SpatialReduce mode);

/// Sum over the true positions of `mask`. The mask either has the tensor's
/// shape or, for rank-3 tensors, its (H, W) shape broadcast over channels.
template <typename T>
double masked_sum(const BasicTensor<T>& t, const BoolMask& mask);

/// Per-channel reduction for any rank: axis 0 is the channel axis and each
/// rank-1 element is its own channel. Accumulates in double.
template <typename T>
std::vector<double> channel_reduce(const BasicTensor<T>& t, SpatialReduce mode);

/// Sum of all elements with 64-bit accumulation.
template <typename T>
double sum(const BasicTensor<T>& t);

template <typename T>
bool all_finite(const BasicTensor<T>& t) {
  for (const T& v : t.data()) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

/// Throws a compute error naming `what` if any element is NaN or Inf.
template <typename T>
void check_finite(const BasicTensor<T>& t, const std::string& what) {
  if (!all_finite(t)) fail(ErrorKind::compute, "non-finite values in " + what);
}

/// Collapses the channel axis of a (C, H, W) tensor into an (H, W) map.
Tensor64 sum_channels(const Tensor64& t);

}  // namespace crp
