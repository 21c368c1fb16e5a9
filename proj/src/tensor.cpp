#include "owb/tensor.hpp"

#include <numeric>
#include <sstream>

namespace owb {

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index element_count(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(element_count(shape_))) {}

Tensor::Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("shape " + to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                     " elements");
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
  data_.resize(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), data_.data());
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("shape " + to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                     " elements");
  }
}

Tensor Tensor::full(Shape shape, Scalar value) {
  Tensor t(std::move(shape));
  t.data_.setConstant(value);
  return t;
}

Scalar Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

MatrixMap Tensor::matrix(Index rows, Index cols) {
  if (rows * cols != data_.size()) {
    throw ShapeError("cannot view " + to_string(shape_) + " as " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  return {data_.data(), rows, cols};
}

ConstMatrixMap Tensor::matrix(Index rows, Index cols) const {
  if (rows * cols != data_.size()) {
    throw ShapeError("cannot view " + to_string(shape_) + " as " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  return {data_.data(), rows, cols};
}

Tensor Tensor::reshaped(Shape shape) const {
  if (element_count(shape) != data_.size()) {
    throw ShapeError("reshape: " + to_string(shape_) + " -> " + to_string(shape));
  }
  Tensor out(std::move(shape), data_);
  out.requires_grad_ = requires_grad_;
  return out;
}

Tensor stack(const std::vector<const Tensor*>& items) {
  if (items.empty()) throw ShapeError("stack: no tensors");
  const Shape& inner = items.front()->shape();
  Shape shape{static_cast<Index>(items.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  const Index stride = items.front()->size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != inner) {
      throw ShapeError("stack: " + to_string(items[i]->shape()) + " vs " + to_string(inner));
    }
    out.data().segment(static_cast<Index>(i) * stride, stride) = items[i]->data();
  }
  return out;
}

Tensor stack(const std::vector<Tensor>& items) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(items.size());
  for (const auto& t : items) ptrs.push_back(&t);
  return stack(ptrs);
}

Tensor unstack_row(const Tensor& batch, Index i) {
  if (batch.rank() < 1 || i < 0 || i >= batch.dim(0)) {
    throw ShapeError("unstack_row: index " + std::to_string(i) + " of " + to_string(batch.shape()));
  }
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  if (inner.empty()) inner.push_back(1);
  const Index stride = batch.size() / batch.dim(0);
  return Tensor(inner, batch.data().segment(i * stride, stride));
}

Scalar linf_distance(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("linf_distance: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return a.size() == 0 ? 0.0 : (a.data() - b.data()).cwiseAbs().maxCoeff();
}

Scalar l2_distance(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("l2_distance: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return (a.data() - b.data()).norm();
}

}  // namespace owb
