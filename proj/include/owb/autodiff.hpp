#pragma once

#include "owb/tensor.hpp"

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace owb {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Local gradient rule of a recorded op. `grad_in[k]` is null when input k
/// does not participate in differentiation; rules must accumulate (+=).
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

/// Gradients produced by Tape::backward, keyed by Var id.
class Gradients {
 public:
  /// Gradient for `v`; a zero tensor when `v` is unreachable from the loss.
  Tensor of(Var v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

/// Reverse-mode recording of one computation. Node ids are assigned in
/// creation order, so operands always precede their consumers.
/// Not thread-safe; use one tape per thread of control.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose participation follows `value.requires_grad()`.
  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var variable(Tensor value);

  /// Record an op. The node participates when any input does; otherwise the
  /// rule is dropped and the node is a constant.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the scalar `loss` with respect to every participating node.
  Gradients backward(Var loss) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  // deque keeps references to earlier values stable while recording.
  std::deque<Node> nodes_;
};

/// Central-difference estimate of d func / d x, one coordinate at a time.
Tensor finite_diff_grad(const std::function<Scalar(const Tensor&)>& func, const Tensor& x, Scalar h);

// ---------------------------------------------------------------------------
// Differentiable ops. Shape errors name the op and the offending shapes.
// ---------------------------------------------------------------------------

/// Elementwise; `b` may also be a single-element tensor broadcast over `a`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Scalar s);
Var add_scalar(Var a, Scalar s);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Scalar s, Var a) { return scale(a, s); }
inline Var operator*(Var a, Scalar s) { return scale(a, s); }
inline Var operator-(Var a) { return scale(a, -1.0); }

/// (m,k) x (k,n) -> (m,n).
Var matmul(Var a, Var b);
/// x (N,in), weight (out,in), bias (out) -> (N,out).
Var linear(Var x, Var weight, Var bias);
/// x (N,C,H,W), weight (O,C,k,k), bias (O); stride 1, zero padding.
Var conv2d(Var x, Var weight, Var bias, Index padding);
/// 2x2 window, stride 2; ties resolve to the first index in row-major order.
Var max_pool2(Var x);
/// Nearest-neighbour 2x upsampling of (N,C,H,W).
Var upsample2(Var x);

Var relu(Var x);
Var sigmoid(Var x);
/// Elementwise square root; the derivative at 0 is taken as 0.
Var sqrt(Var x);
/// Pass-through inside (lo, hi), zero derivative at and beyond the bounds.
Var clamp(Var x, Scalar lo, Scalar hi);

Var reshape(Var x, Shape shape);
/// (N, ...) -> (N, prod(...)).
Var flatten(Var x);

/// Sum of all elements -> scalar.
Var sum(Var x);
Var mean(Var x);
/// Sum over every axis but the first -> (N).
Var sum_rows(Var x);

/// Along the last axis, with max subtraction.
Var softmax(Var x);
Var log_softmax(Var x);
/// Per-row -log softmax(logits)[label]; (N,C) -> (N), (C) -> scalar.
Var cross_entropy(Var logits, std::span<const int> labels);
Var cross_entropy(Var logits, int label);
/// Per-row selection x[i, index[i]]; (N,C) -> (N), (C) -> scalar.
Var pick(Var x, std::span<const int> index);

Var l1_norm(Var x);
Var l2_norm_squared(Var x);
Var l1_norm_rows(Var x);
Var l2_norm_squared_rows(Var x);

/// Forward value `forward`, gradient passed to `x` unchanged (straight-through).
Var straight_through(Var x, Tensor forward);
/// out.flat[i] = source[i] < 0 ? 0 : x.flat[source[i]].
Var gather(Var x, std::vector<Index> source, Shape out_shape);

}  // namespace owb
