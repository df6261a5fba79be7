#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "promptlab/error.hpp"

namespace promptlab {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

/// Dense row-major array. Rank 0 is a scalar holding one element; every
/// extent of a higher-rank tensor is at least 1.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError(detail::concat("tensor data length ", data_.size(),
                                      " does not match shape ",
                                      shape_str(shape_)));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<T> values) {
    return Tensor({rows, cols}, std::vector<T>(values));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  // 2-D accessors. Rank-1 tensors are treated as a single row.
  std::size_t rows() const {
    require_matrix_like();
    return shape_.size() == 1 ? 1 : shape_[0];
  }
  std::size_t cols() const {
    require_matrix_like();
    return shape_.back();
  }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_.back() + c];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    }
    return data_[0];
  }

  std::span<T> row(std::size_t r) {
    return {data_.data() + r * cols(), cols()};
  }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) {
        throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape_));
      }
    }
  }
  void require_matrix_like() const {
    if (shape_.empty() || shape_.size() > 2) {
      throw ShapeError("expected a rank-1 or rank-2 tensor, got " +
                       shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

template <std::floating_point T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <std::floating_point T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.flat().begin(), t.flat().end(),
                     [](T v) { return std::isfinite(v); });
}

}  // namespace promptlab
