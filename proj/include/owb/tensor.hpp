#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace owb {

using Scalar = double;
using Index = Eigen::Index;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

using Shape = std::vector<Index>;

std::string to_string(const Shape& shape);
Index element_count(const Shape& shape);

/// Raised for any shape disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles.
///
/// The flat payload is an Eigen vector so every op can work on it as a
/// vector or reinterpret it as a row-major matrix without copying.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Vector data);
  Tensor(Shape shape, std::initializer_list<Scalar> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar value);
  static Tensor scalar(Scalar value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1 && shape_.empty(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }
  Scalar item() const;

  /// View the payload as rows x cols; rows * cols must equal size().
  MatrixMap matrix(Index rows, Index cols);
  ConstMatrixMap matrix(Index rows, Index cols) const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  /// Same payload, new shape. Element counts must agree.
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  Vector data_;
  bool requires_grad_ = false;
};

/// Stack equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& items);
Tensor stack(const std::vector<const Tensor*>& items);
/// Row `i` of a tensor with a leading batch axis.
Tensor unstack_row(const Tensor& batch, Index i);

Scalar linf_distance(const Tensor& a, const Tensor& b);
Scalar l2_distance(const Tensor& a, const Tensor& b);

}  // namespace owb
