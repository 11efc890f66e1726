#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ofdiff {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Shape violations (mismatched extents, bad broadcast).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Precondition violations of an operation contract.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_string(const Shape& shape);

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major array of Scalar with an arbitrary number of axes.
///
/// Storage is an Eigen column array so element-wise math can be written as
/// Eigen expressions over `array()`; the logical layout is row-major over
/// `shape()` (last axis fastest).
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Array::Constant(shape_size(shape_), fill)) {
    for (Index e : shape_) {
      if (e < 0) throw ShapeError("negative extent in " + shape_string(shape_));
    }
  }
  Tensor(Shape shape, Array values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Element of a rank-3 tensor (C, H, W).
  Scalar& at(Index c, Index y, Index x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  Scalar at(Index c, Index y, Index x) const { return data_[(c * shape_[1] + y) * shape_[2] + x]; }

  /// Element of a rank-4 tensor (N, C, H, W).
  Scalar& at(Index n, Index c, Index y, Index x) {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  Scalar at(Index n, Index c, Index y, Index x) const {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  Scalar item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  Shape shape_;
  Array data_;
};

}  // namespace ofdiff
