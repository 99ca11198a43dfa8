#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "emma/error.hpp"

namespace emma {

using Shape = std::vector<std::size_t>;

// Spatial extents of a volume, depth-height-width order.
struct Extents3 {
  std::size_t d = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t volume() const { return d * h * w; }
  std::size_t operator[](std::size_t i) const { return i == 0 ? d : (i == 1 ? h : w); }
  std::size_t& operator[](std::size_t i) { return i == 0 ? d : (i == 1 ? h : w); }
  static Extents3 cube(std::size_t n) { return {n, n, n}; }
  friend bool operator==(const Extents3&, const Extents3&) = default;
};

// Integer voxel coordinate; may lie outside a volume during patch extraction.
struct Index3 {
  std::ptrdiff_t z = 0;
  std::ptrdiff_t y = 0;
  std::ptrdiff_t x = 0;
  friend bool operator==(const Index3&, const Index3&) = default;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::string extents_str(const Extents3& e) {
  std::ostringstream os;
  os << e.d << 'x' << e.h << 'x' << e.w;
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense, contiguous, row-major tensor. Volumes use channel-major [C, D, H, W].
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // [C, D, H, W] accessors.
  std::size_t channels() const { return shape_.at(0); }
  Extents3 spatial() const {
    if (shape_.size() != 4) throw DimensionError("expected [C,D,H,W] tensor, got " + shape_str(shape_));
    return {shape_[1], shape_[2], shape_[3]};
  }
  T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
  }
  const T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
  }
  std::span<T> channel(std::size_t c) {
    const std::size_t n = numel() / shape_.at(0);
    return std::span<T>(data_).subspan(c * n, n);
  }
  std::span<const T> channel(std::size_t c) const {
    const std::size_t n = numel() / shape_.at(0);
    return std::span<const T>(data_).subspan(c * n, n);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

inline Shape volume_shape(std::size_t channels, const Extents3& e) { return {channels, e.d, e.h, e.w}; }

}  // namespace emma
