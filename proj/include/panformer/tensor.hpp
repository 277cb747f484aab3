#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "panformer/error.hpp"

namespace panformer {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array, last axis = channels. Rank is at most 4.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_rank();
    data_.assign(static_cast<std::size_t>(panformer::numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (static_cast<std::int64_t>(data_.size()) != panformer::numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis < 0 ? rank() + axis : axis)); }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty() && shape_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(std::initializer_list<std::int64_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::int64_t> idx) const { return data_[offset(idx)]; }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const& {
    Tensor t = *this;
    t.reshape_in_place(std::move(shape));
    return t;
  }
  Tensor reshaped(Shape shape) && {
    reshape_in_place(std::move(shape));
    return std::move(*this);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_rank() const {
    if (shape_.size() > 4) throw DimensionError("tensor rank exceeds 4: " + shape_str(shape_));
    for (auto d : shape_)
      if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape_));
  }

  void reshape_in_place(Shape shape) {
    if (panformer::numel(shape) != numel())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
    check_rank();
  }

  std::size_t offset(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != shape_.size()) throw DimensionError("index rank mismatch for shape " + shape_str(shape_));
    std::int64_t off = 0;
    std::size_t a = 0;
    for (auto i : idx) off = off * shape_[a++] + i;
    return static_cast<std::size_t>(off);
  }

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace panformer
