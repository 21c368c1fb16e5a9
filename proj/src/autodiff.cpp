#include "owb/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace owb {

namespace {

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

[[noreturn]] void bad_shape(const char* op, const Shape& a, const char* expected) {
  throw ShapeError(std::string(op) + ": got shape " + to_string(a) + ", expected " + expected);
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::logic_error("op on an unrecorded Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::logic_error("operands recorded on different tapes");
  return tape_of(a);
}

// Rows/cols of a tensor viewed as (N, C) along its last axis.
std::pair<Index, Index> last_axis_view(const Shape& s) {
  if (s.empty()) return {1, 1};
  Index cols = s.back();
  Index rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return {rows, cols};
}

}  // namespace

// ---------------------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("value() of an unrecorded Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Tensor Gradients::of(Var v) const {
  if (v.id() < grads_.size() && grads_[v.id()].size() > 0) return grads_[v.id()];
  if (v.id() < shapes_.size()) return Tensor::zeros(shapes_[v.id()]);
  return Tensor::zeros(v.shape());
}

Var Tape::leaf(Tensor value) {
  const bool rg = value.requires_grad();
  nodes_.push_back(Node{std::move(value), {}, rg, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

Var Tape::variable(Tensor value) {
  value.set_requires_grad(true);
  return leaf(std::move(value));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.value.set_requires_grad(false);
  for (Var in : inputs) {
    if (in.tape() != this) throw std::logic_error("input recorded on a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var loss) const {
  if (loss.tape() != this) throw std::logic_error("backward: loss recorded on a different tape");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + to_string(lv.shape()));

  Gradients out;
  out.grads_.resize(nodes_.size());
  out.shapes_.reserve(nodes_.size());
  for (const auto& n : nodes_) out.shapes_.push_back(n.value.shape());

  if (!nodes_[loss.id()].requires_grad) return out;
  out.grads_[loss.id()] = Tensor::full(lv.shape(), 1.0);

  std::vector<Tensor*> slots;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    Tensor& g = out.grads_[id];
    if (!node.requires_grad || !node.backward || g.size() == 0) continue;
    slots.clear();
    for (std::size_t in : node.inputs) {
      if (!nodes_[in].requires_grad) {
        slots.push_back(nullptr);
        continue;
      }
      Tensor& gi = out.grads_[in];
      if (gi.size() == 0) gi = Tensor::zeros(nodes_[in].value.shape());
      slots.push_back(&gi);
    }
    node.backward(g, slots);
  }
  return out;
}

Tensor finite_diff_grad(const std::function<Scalar(const Tensor&)>& func, const Tensor& x, Scalar h) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor probe = x;
  Tensor grad(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar orig = probe[i];
    probe[i] = orig + h;
    const Scalar up = func(probe);
    probe[i] = orig - h;
    const Scalar down = func(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    return t.record(Tensor(av.shape(), av.data() + bv.data()), {a, b},
                    [](const Tensor& g, std::span<Tensor* const> gi) {
                      if (gi[0]) gi[0]->data() += g.data();
                      if (gi[1]) gi[1]->data() += g.data();
                    });
  }
  if (bv.size() == 1) {
    const Scalar s = bv[0];
    return t.record(Tensor(av.shape(), av.data().array() + s), {a, b},
                    [](const Tensor& g, std::span<Tensor* const> gi) {
                      if (gi[0]) gi[0]->data() += g.data();
                      if (gi[1]) (*gi[1])[0] += g.data().sum();
                    });
  }
  shape_mismatch("add", av.shape(), bv.shape());
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    return t.record(Tensor(av.shape(), av.data() - bv.data()), {a, b},
                    [](const Tensor& g, std::span<Tensor* const> gi) {
                      if (gi[0]) gi[0]->data() += g.data();
                      if (gi[1]) gi[1]->data() -= g.data();
                    });
  }
  if (bv.size() == 1) {
    const Scalar s = bv[0];
    return t.record(Tensor(av.shape(), av.data().array() - s), {a, b},
                    [](const Tensor& g, std::span<Tensor* const> gi) {
                      if (gi[0]) gi[0]->data() += g.data();
                      if (gi[1]) (*gi[1])[0] -= g.data().sum();
                    });
  }
  shape_mismatch("sub", av.shape(), bv.shape());
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    return t.record(Tensor(av.shape(), av.data().cwiseProduct(bv.data())), {a, b},
                    [a, b](const Tensor& g, std::span<Tensor* const> gi) {
                      if (gi[0]) gi[0]->data() += g.data().cwiseProduct(b.value().data());
                      if (gi[1]) gi[1]->data() += g.data().cwiseProduct(a.value().data());
                    });
  }
  if (bv.size() == 1) {
    return t.record(Tensor(av.shape(), av.data() * bv[0]), {a, b},
                    [a, b](const Tensor& g, std::span<Tensor* const> gi) {
                      if (gi[0]) gi[0]->data() += g.data() * b.value()[0];
                      if (gi[1]) (*gi[1])[0] += g.data().dot(a.value().data());
                    });
  }
  shape_mismatch("mul", av.shape(), bv.shape());
}

Var scale(Var a, Scalar s) {
  return tape_of(a).record(Tensor(a.shape(), a.value().data() * s), {a},
                           [s](const Tensor& g, std::span<Tensor* const> gi) {
                             if (gi[0]) gi[0]->data() += g.data() * s;
                           });
}

Var add_scalar(Var a, Scalar s) {
  return tape_of(a).record(Tensor(a.shape(), a.value().data().array() + s), {a},
                           [](const Tensor& g, std::span<Tensor* const> gi) {
                             if (gi[0]) gi[0]->data() += g.data();
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) shape_mismatch("matmul", av.shape(), bv.shape());
  const Index m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  out.matrix(m, n).noalias() = av.matrix(m, k) * bv.matrix(k, n);
  return t.record(std::move(out), {a, b}, [a, b, m, k, n](const Tensor& g, std::span<Tensor* const> gi) {
    auto gm = g.matrix(m, n);
    if (gi[0]) gi[0]->matrix(m, k).noalias() += gm * b.value().matrix(k, n).transpose();
    if (gi[1]) gi[1]->matrix(k, n).noalias() += a.value().matrix(m, k).transpose() * gm;
  });
}

Var linear(Var x, Var weight, Var bias) {
  Tape& t = tape_of(x, weight);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) shape_mismatch("linear", xv.shape(), wv.shape());
  const Index n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  if (bv.size() != out_dim) shape_mismatch("linear", wv.shape(), bv.shape());
  Tensor out({n, out_dim});
  auto om = out.matrix(n, out_dim);
  om.noalias() = xv.matrix(n, in) * wv.matrix(out_dim, in).transpose();
  om.rowwise() += bv.data().transpose();
  return t.record(std::move(out), {x, weight, bias},
                  [x, weight, n, in, out_dim](const Tensor& g, std::span<Tensor* const> gi) {
                    auto gm = g.matrix(n, out_dim);
                    if (gi[0]) gi[0]->matrix(n, in).noalias() += gm * weight.value().matrix(out_dim, in);
                    if (gi[1]) gi[1]->matrix(out_dim, in).noalias() += gm.transpose() * x.value().matrix(n, in);
                    if (gi[2]) gi[2]->data() += gm.colwise().sum().transpose();
                  });
}

namespace {

struct ConvGeometry {
  Index n, c, h, w, o, k, pad, ho, wo;
  Index ckk() const { return c * k * k; }
  Index spatial() const { return ho * wo; }
};

// cols: (C*k*k) x (N*Ho*Wo), row-major.
void im2col(const Tensor& x, const ConvGeometry& g, RowMatrix& cols) {
  cols.resize(g.ckk(), g.n * g.spatial());
  const Scalar* src = x.raw();
  for (Index c = 0; c < g.c; ++c) {
    for (Index ki = 0; ki < g.k; ++ki) {
      for (Index kj = 0; kj < g.k; ++kj) {
        Scalar* row = cols.row((c * g.k + ki) * g.k + kj).data();
        for (Index n = 0; n < g.n; ++n) {
          const Scalar* plane = src + (n * g.c + c) * g.h * g.w;
          Scalar* dst = row + n * g.spatial();
          for (Index oh = 0; oh < g.ho; ++oh) {
            const Index ih = oh + ki - g.pad;
            Scalar* drow = dst + oh * g.wo;
            if (ih < 0 || ih >= g.h) {
              std::fill(drow, drow + g.wo, 0.0);
              continue;
            }
            const Scalar* srow = plane + ih * g.w;
            for (Index ow = 0; ow < g.wo; ++ow) {
              const Index iw = ow + kj - g.pad;
              drow[ow] = (iw < 0 || iw >= g.w) ? 0.0 : srow[iw];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const RowMatrix& cols, const ConvGeometry& g, Tensor& dx) {
  Scalar* dst = dx.raw();
  for (Index c = 0; c < g.c; ++c) {
    for (Index ki = 0; ki < g.k; ++ki) {
      for (Index kj = 0; kj < g.k; ++kj) {
        const Scalar* row = cols.row((c * g.k + ki) * g.k + kj).data();
        for (Index n = 0; n < g.n; ++n) {
          Scalar* plane = dst + (n * g.c + c) * g.h * g.w;
          const Scalar* src = row + n * g.spatial();
          for (Index oh = 0; oh < g.ho; ++oh) {
            const Index ih = oh + ki - g.pad;
            if (ih < 0 || ih >= g.h) continue;
            Scalar* prow = plane + ih * g.w;
            const Scalar* srow = src + oh * g.wo;
            for (Index ow = 0; ow < g.wo; ++ow) {
              const Index iw = ow + kj - g.pad;
              if (iw >= 0 && iw < g.w) prow[iw] += srow[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, Index padding) {
  Tape& t = tape_of(x, weight);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1) || wv.dim(2) != wv.dim(3)) {
    shape_mismatch("conv2d", xv.shape(), wv.shape());
  }
  if (padding < 0) throw std::invalid_argument("conv2d: negative padding");
  ConvGeometry geo{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), padding, 0, 0};
  geo.ho = geo.h + 2 * padding - geo.k + 1;
  geo.wo = geo.w + 2 * padding - geo.k + 1;
  if (geo.ho <= 0 || geo.wo <= 0) shape_mismatch("conv2d", xv.shape(), wv.shape());
  if (bv.size() != geo.o) shape_mismatch("conv2d", wv.shape(), bv.shape());

  auto cols = std::make_shared<RowMatrix>();
  im2col(xv, geo, *cols);
  const Index sp = geo.spatial();
  RowMatrix prod(geo.o, geo.n * sp);
  prod.noalias() = wv.matrix(geo.o, geo.ckk()) * (*cols);

  Tensor out({geo.n, geo.o, geo.ho, geo.wo});
  for (Index n = 0; n < geo.n; ++n) {
    for (Index o = 0; o < geo.o; ++o) {
      out.data().segment((n * geo.o + o) * sp, sp) =
          prod.row(o).segment(n * sp, sp).transpose().array() + bv[o];
    }
  }
  const bool keep_cols = weight.requires_grad();
  if (!keep_cols) cols.reset();
  return t.record(std::move(out), {x, weight, bias},
                  [weight, geo, cols](const Tensor& g, std::span<Tensor* const> gi) {
                    const Index sp = geo.spatial();
                    RowMatrix gmat(geo.o, geo.n * sp);
                    for (Index n = 0; n < geo.n; ++n) {
                      for (Index o = 0; o < geo.o; ++o) {
                        gmat.row(o).segment(n * sp, sp) = g.data().segment((n * geo.o + o) * sp, sp).transpose();
                      }
                    }
                    if (gi[1]) gi[1]->matrix(geo.o, geo.ckk()).noalias() += gmat * cols->transpose();
                    if (gi[2]) gi[2]->data() += gmat.rowwise().sum();
                    if (gi[0]) {
                      RowMatrix dcols(geo.ckk(), geo.n * sp);
                      dcols.noalias() = weight.value().matrix(geo.o, geo.ckk()).transpose() * gmat;
                      col2im_add(dcols, geo, *gi[0]);
                    }
                  });
}

Var max_pool2(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || xv.dim(2) < 2 || xv.dim(3) < 2) bad_shape("max_pool2", xv.shape(), "(N,C,H>=2,W>=2)");
  const Index planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const Index ho = h / 2, wo = w / 2;
  Tensor out({xv.dim(0), xv.dim(1), ho, wo});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  for (Index p = 0; p < planes; ++p) {
    const Scalar* src = xv.raw() + p * h * w;
    for (Index i = 0; i < ho; ++i) {
      for (Index j = 0; j < wo; ++j) {
        Index best = (2 * i) * w + 2 * j;
        const Index cand[3] = {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1};
        for (Index c : cand) {
          if (src[c] > src[best]) best = c;
        }
        const Index o = (p * ho + i) * wo + j;
        out[o] = src[best];
        (*argmax)[static_cast<std::size_t>(o)] = p * h * w + best;
      }
    }
  }
  return tape_of(x).record(std::move(out), {x}, [argmax](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    for (Index o = 0; o < g.size(); ++o) (*gi[0])[(*argmax)[static_cast<std::size_t>(o)]] += g[o];
  });
}

Var upsample2(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) bad_shape("upsample2", xv.shape(), "(N,C,H,W)");
  const Index planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor out({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < 2 * h; ++i) {
      for (Index j = 0; j < 2 * w; ++j) out[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
    }
  }
  return tape_of(x).record(std::move(out), {x}, [planes, h, w](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    for (Index p = 0; p < planes; ++p) {
      for (Index i = 0; i < 2 * h; ++i) {
        for (Index j = 0; j < 2 * w; ++j) (*gi[0])[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

Var relu(Var x) {
  const Tensor& xv = x.value();
  return tape_of(x).record(Tensor(xv.shape(), xv.data().cwiseMax(0.0)), {x},
                           [x](const Tensor& g, std::span<Tensor* const> gi) {
                             if (gi[0]) {
                               gi[0]->data().array() += (x.value().data().array() > 0.0).select(g.data().array(), 0.0);
                             }
                           });
}

Var sigmoid(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (Index i = 0; i < xv.size(); ++i) {
    const Scalar v = xv[i];
    out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  Tape& t = tape_of(x);
  const std::size_t self = t.size();
  return t.record(std::move(out), {x}, [&t, self](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    const auto y = t.value(self).data().array();
    gi[0]->data().array() += g.data().array() * y * (1.0 - y);
  });
}

Var sqrt(Var x) {
  const Tensor& xv = x.value();
  if ((xv.data().array() < 0.0).any()) throw std::domain_error("sqrt: negative input");
  Tape& t = tape_of(x);
  const std::size_t self = t.size();
  return t.record(Tensor(xv.shape(), xv.data().cwiseSqrt()), {x}, [&t, self](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    const Tensor& y = t.value(self);
    for (Index i = 0; i < y.size(); ++i) {
      if (y[i] > 0) (*gi[0])[i] += g[i] * 0.5 / y[i];
    }
  });
}

Var clamp(Var x, Scalar lo, Scalar hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  const Tensor& xv = x.value();
  return tape_of(x).record(Tensor(xv.shape(), xv.data().cwiseMax(lo).cwiseMin(hi)), {x},
                           [x, lo, hi](const Tensor& g, std::span<Tensor* const> gi) {
                             if (!gi[0]) return;
                             const auto v = x.value().data().array();
                             gi[0]->data().array() += ((v > lo) && (v < hi)).select(g.data().array(), 0.0);
                           });
}

// ---------------------------------------------------------------------------
// Shape and reductions

Var reshape(Var x, Shape shape) {
  const Tensor& xv = x.value();
  if (element_count(shape) != xv.size()) shape_mismatch("reshape", xv.shape(), shape);
  return tape_of(x).record(Tensor(std::move(shape), xv.data()), {x}, [](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) gi[0]->data() += g.data();
  });
}

Var flatten(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) bad_shape("flatten", xv.shape(), "(N, ...)");
  return reshape(x, {xv.dim(0), xv.size() / xv.dim(0)});
}

Var sum(Var x) {
  return tape_of(x).record(Tensor::scalar(x.value().data().sum()), {x}, [](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) gi[0]->data().array() += g[0];
  });
}

Var mean(Var x) {
  const Index n = x.value().size();
  if (n == 0) bad_shape("mean", x.shape(), "non-empty");
  return tape_of(x).record(Tensor::scalar(x.value().data().mean()), {x}, [n](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) gi[0]->data().array() += g[0] / static_cast<Scalar>(n);
  });
}

Var sum_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) bad_shape("sum_rows", xv.shape(), "(N, ...)");
  const Index n = xv.dim(0), d = xv.size() / n;
  Tensor out({n}, xv.matrix(n, d).rowwise().sum());
  return tape_of(x).record(std::move(out), {x}, [n, d](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) gi[0]->matrix(n, d).colwise() += g.data();
  });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) bad_shape("softmax", xv.shape(), "rank >= 1");
  const auto [rows, cols] = last_axis_view(xv.shape());
  Tensor out(xv.shape());
  auto om = out.matrix(rows, cols);
  const auto xm = xv.matrix(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    om.row(r) = (xm.row(r).array() - xm.row(r).maxCoeff()).exp();
    om.row(r) /= om.row(r).sum();
  }
  Tape& t = tape_of(x);
  const std::size_t self = t.size();
  return t.record(std::move(out), {x}, [&t, self, rows = rows, cols = cols](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    const auto y = t.value(self).matrix(rows, cols);
    const auto gm = g.matrix(rows, cols);
    auto dx = gi[0]->matrix(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const Scalar dot = gm.row(r).dot(y.row(r));
      dx.row(r).array() += y.row(r).array() * (gm.row(r).array() - dot);
    }
  });
}

namespace {

RowMatrix log_softmax_rows(ConstMatrixMap xm) {
  RowMatrix out(xm.rows(), xm.cols());
  for (Index r = 0; r < xm.rows(); ++r) {
    const Scalar mx = xm.row(r).maxCoeff();
    const Scalar lse = mx + std::log((xm.row(r).array() - mx).exp().sum());
    out.row(r) = xm.row(r).array() - lse;
  }
  return out;
}

}  // namespace

Var log_softmax(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) bad_shape("log_softmax", xv.shape(), "rank >= 1");
  const auto [rows, cols] = last_axis_view(xv.shape());
  Tensor out(xv.shape());
  out.matrix(rows, cols) = log_softmax_rows(xv.matrix(rows, cols));
  Tape& t = tape_of(x);
  const std::size_t self = t.size();
  return t.record(std::move(out), {x}, [&t, self, rows = rows, cols = cols](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    const auto y = t.value(self).matrix(rows, cols);
    const auto gm = g.matrix(rows, cols);
    auto dx = gi[0]->matrix(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      dx.row(r).array() += gm.row(r).array() - y.row(r).array().exp() * gm.row(r).sum();
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& xv = logits.value();
  if (xv.rank() != 1 && xv.rank() != 2) bad_shape("cross_entropy", xv.shape(), "(C) or (N,C)");
  const Index rows = xv.rank() == 1 ? 1 : xv.dim(0);
  const Index cols = xv.shape().back();
  if (static_cast<Index>(labels.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + to_string(xv.shape()));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab) {
    if (l < 0 || l >= cols) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(cols) + ")");
    }
  }
  auto logp = std::make_shared<RowMatrix>(log_softmax_rows(xv.matrix(rows, cols)));
  Tensor out = xv.rank() == 1 ? Tensor::scalar(0.0) : Tensor({rows});
  for (Index r = 0; r < rows; ++r) out[r] = -(*logp)(r, lab[static_cast<std::size_t>(r)]);
  return tape_of(logits).record(std::move(out), {logits},
                                [logp, lab = std::move(lab), rows, cols](const Tensor& g, std::span<Tensor* const> gi) {
                                  if (!gi[0]) return;
                                  auto dx = gi[0]->matrix(rows, cols);
                                  for (Index r = 0; r < rows; ++r) {
                                    dx.row(r) += g[r] * logp->row(r).array().exp().matrix();
                                    dx(r, lab[static_cast<std::size_t>(r)]) -= g[r];
                                  }
                                });
}

Var cross_entropy(Var logits, int label) {
  const int labels[1] = {label};
  return cross_entropy(logits, std::span<const int>(labels, 1));
}

Var pick(Var x, std::span<const int> index) {
  const Tensor& xv = x.value();
  if (xv.rank() != 1 && xv.rank() != 2) bad_shape("pick", xv.shape(), "(C) or (N,C)");
  const Index rows = xv.rank() == 1 ? 1 : xv.dim(0);
  const Index cols = xv.shape().back();
  if (static_cast<Index>(index.size()) != rows) throw ShapeError("pick: index count does not match " + to_string(xv.shape()));
  std::vector<int> idx(index.begin(), index.end());
  Tensor out = xv.rank() == 1 ? Tensor::scalar(0.0) : Tensor({rows});
  for (Index r = 0; r < rows; ++r) {
    const int c = idx[static_cast<std::size_t>(r)];
    if (c < 0 || c >= cols) throw std::out_of_range("pick: index " + std::to_string(c) + " out of range");
    out[r] = xv[r * cols + c];
  }
  return tape_of(x).record(std::move(out), {x}, [idx = std::move(idx), rows, cols](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    for (Index r = 0; r < rows; ++r) (*gi[0])[r * cols + idx[static_cast<std::size_t>(r)]] += g[r];
  });
}

Var l1_norm(Var x) {
  const Tensor& xv = x.value();
  return tape_of(x).record(Tensor::scalar(xv.data().cwiseAbs().sum()), {x}, [x](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    const auto v = x.value().data().array();
    gi[0]->data().array() += g[0] * ((v > 0.0).cast<Scalar>() - (v < 0.0).cast<Scalar>());
  });
}

Var l2_norm_squared(Var x) {
  const Tensor& xv = x.value();
  return tape_of(x).record(Tensor::scalar(xv.data().squaredNorm()), {x}, [x](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) gi[0]->data() += 2.0 * g[0] * x.value().data();
  });
}

Var l1_norm_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) bad_shape("l1_norm_rows", xv.shape(), "(N, ...)");
  const Index n = xv.dim(0), d = xv.size() / n;
  Tensor out({n}, xv.matrix(n, d).cwiseAbs().rowwise().sum());
  return tape_of(x).record(std::move(out), {x}, [x, n, d](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    const auto v = x.value().matrix(n, d).array();
    gi[0]->matrix(n, d).array() +=
        ((v > 0.0).cast<Scalar>() - (v < 0.0).cast<Scalar>()).colwise() * g.data().array();
  });
}

Var l2_norm_squared_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) bad_shape("l2_norm_squared_rows", xv.shape(), "(N, ...)");
  const Index n = xv.dim(0), d = xv.size() / n;
  Tensor out({n}, xv.matrix(n, d).rowwise().squaredNorm());
  return tape_of(x).record(std::move(out), {x}, [x, n, d](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    gi[0]->matrix(n, d).array() += (x.value().matrix(n, d).array().colwise() * g.data().array()) * 2.0;
  });
}

Var straight_through(Var x, Tensor forward) {
  if (forward.shape() != x.shape()) shape_mismatch("straight_through", x.shape(), forward.shape());
  return tape_of(x).record(std::move(forward), {x}, [](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) gi[0]->data() += g.data();
  });
}

Var gather(Var x, std::vector<Index> source, Shape out_shape) {
  const Tensor& xv = x.value();
  Tensor out(out_shape);
  if (static_cast<Index>(source.size()) != out.size()) {
    throw ShapeError("gather: " + std::to_string(source.size()) + " indices for shape " + to_string(out_shape));
  }
  for (Index i = 0; i < out.size(); ++i) {
    const Index s = source[static_cast<std::size_t>(i)];
    if (s >= xv.size()) throw std::out_of_range("gather: source index out of range");
    out[i] = s < 0 ? 0.0 : xv[s];
  }
  return tape_of(x).record(std::move(out), {x}, [src = std::move(source)](const Tensor& g, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i] >= 0) (*gi[0])[src[i]] += g[static_cast<Index>(i)];
    }
  });
}

}  // namespace owb
