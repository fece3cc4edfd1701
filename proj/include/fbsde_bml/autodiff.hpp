#pragma once

// Reverse-mode differentiation over batched matrices.
//
// Every node holds an Eigen matrix whose rows index Monte Carlo paths and
// whose columns index components, so one node covers a whole batch and the
// tape length scales with the number of time steps, not with the number of
// paths. Binary elementwise operations broadcast a 1 x 1, 1 x k or B x 1
// operand against a B x k operand; the reverse pass sums over the
// broadcast dimensions.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fbsde_bml/errors.hpp"

namespace fbsde::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

/// Handle to a tape node. Valid while its tape is alive.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the upstream gradient of node `self` into its parents.
  using Backprop = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var constant(double value) { return constant(Matrix::Constant(1, 1, value)); }
  Var parameter(Matrix value) { return push(std::move(value), true, {}); }

  /// Records an operation result. Gradients flow only if some parent requires them.
  Var record(Matrix value, std::initializer_list<Var> parents, Backprop backprop) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backprop) : Backprop{});
  }

  Var record(Matrix value, std::span<const Var> parents, Backprop backprop) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backprop) : Backprop{});
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& upstream(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  template <class Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (node.has_grad) {
      node.grad += g;
    } else {
      node.grad = g;
      node.has_grad = true;
    }
  }

  /// Reverse sweep from a 1 x 1 root. Clears gradients from any earlier sweep.
  void backward(Var root) {
    check_owner(root);
    if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward: root must be a 1 x 1 scalar");
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    accumulate(root.id(), Matrix::Ones(1, 1));
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backprop) n.backprop(*this, i);
    }
  }

  /// Gradient of the last backward root with respect to `v` (zeros if unreached).
  Matrix grad(Var v) const {
    check_owner(v);
    const Node& n = nodes_[v.id()];
    if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void check_owner(const Var& v) const {
    if (v.tape_ != this) throw std::logic_error("autodiff: variable belongs to a different tape");
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backprop backprop;
  };

  Var push(Matrix value, bool requires_grad, Backprop backprop) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, std::move(backprop)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace detail {

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline Index broadcast_dim(Index a, Index b, const char* op) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ShapeError(std::string(op) + ": incompatible broadcast dimensions " + std::to_string(a) + " and " +
                   std::to_string(b));
}

inline Matrix expand(const Matrix& a, Index rows, Index cols) {
  if (a.rows() == rows && a.cols() == cols) return a;
  if (a.rows() == 1 && a.cols() == 1) return Matrix::Constant(rows, cols, a(0, 0));
  if (a.rows() == 1) return a.replicate(rows, 1);
  return a.replicate(1, cols);
}

inline Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

template <class Forward, class GradA, class GradB>
Var binary(const char* op, Var a, Var b, Forward forward, GradA grad_a, GradB grad_b) {
  Tape& t = a.tape();
  t.check_owner(b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Index rows = broadcast_dim(av.rows(), bv.rows(), op);
  const Index cols = broadcast_dim(av.cols(), bv.cols(), op);
  Matrix ea = expand(av, rows, cols);
  Matrix eb = expand(bv, rows, cols);
  Matrix out = forward(ea, eb);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, grad_a, grad_b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    const Matrix& va = tp.value(ia);
    const Matrix& vb = tp.value(ib);
    const Matrix ea2 = expand(va, g.rows(), g.cols());
    const Matrix eb2 = expand(vb, g.rows(), g.cols());
    if (tp.requires_grad(ia)) tp.accumulate(ia, reduce_to(grad_a(g, ea2, eb2), va.rows(), va.cols()));
    if (tp.requires_grad(ib)) tp.accumulate(ib, reduce_to(grad_b(g, ea2, eb2), vb.rows(), vb.cols()));
  });
}

template <class Forward, class Derivative>
Var unary(Var a, Forward forward, Derivative derivative) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  return t.record(forward(a.value()), {a}, [ia, derivative](Tape& tp, std::size_t self) {
    tp.accumulate(ia, derivative(tp.upstream(self), tp.value(ia), tp.value(self)));
  });
}

}  // namespace detail

inline Var operator+(Var a, Var b) {
  return detail::binary(
      "add", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x + y; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; });
}

inline Var operator-(Var a, Var b) {
  return detail::binary(
      "sub", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x - y; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return -g; });
}

inline Var operator*(Var a, Var b) {
  return detail::binary(
      "mul", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseProduct(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.cwiseProduct(y); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix { return g.cwiseProduct(x); });
}

inline Var operator/(Var a, Var b) {
  return detail::binary(
      "div", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix& x, const Matrix& y) -> Matrix {
        return (-g.array() * x.array() / (y.array() * y.array())).matrix();
      });
}

inline Var operator-(Var a) {
  return detail::unary(
      a, [](const Matrix& x) -> Matrix { return -x; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return -g; });
}

inline Var operator*(Var a, double s) {
  return detail::unary(
      a, [s](const Matrix& x) -> Matrix { return x * s; },
      [s](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g * s; });
}
inline Var operator*(double s, Var a) { return a * s; }
inline Var operator/(Var a, double s) { return a * (1.0 / s); }

inline Var operator+(Var a, double s) {
  return detail::unary(
      a, [s](const Matrix& x) -> Matrix { return (x.array() + s).matrix(); },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; });
}
inline Var operator+(double s, Var a) { return a + s; }
inline Var operator-(Var a, double s) { return a + (-s); }
inline Var operator-(double s, Var a) { return (-a) + s; }

inline Var sin(Var a) {
  return detail::unary(
      a, [](const Matrix& x) -> Matrix { return x.array().sin().matrix(); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix {
        return (g.array() * x.array().cos()).matrix();
      });
}

inline Var cos(Var a) {
  return detail::unary(
      a, [](const Matrix& x) -> Matrix { return x.array().cos().matrix(); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix {
        return (-g.array() * x.array().sin()).matrix();
      });
}

inline Var exp(Var a) {
  return detail::unary(
      a, [](const Matrix& x) -> Matrix { return x.array().exp().matrix(); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.cwiseProduct(y); });
}

inline Var tanh(Var a) {
  return detail::unary(
      a,
      [](const Matrix& x) -> Matrix {
        // (e^{2x} - 1) / (e^{2x} + 1) through Eigen's vectorized exp; |x| > 20 saturates in double.
        const Eigen::ArrayXXd e = (2.0 * x.array().max(-20.0).min(20.0)).exp();
        return ((e - 1.0) / (e + 1.0)).matrix();
      },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix {
        return (g.array() * (1.0 - y.array().square())).matrix();
      });
}

inline Var square(Var a) {
  return detail::unary(
      a, [](const Matrix& x) -> Matrix { return x.array().square().matrix(); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix { return (2.0 * g.array() * x.array()).matrix(); });
}

/// Elementwise a^p for a constant exponent.
inline Var pow(Var a, double p) {
  return detail::unary(
      a, [p](const Matrix& x) -> Matrix { return x.array().pow(p).matrix(); },
      [p](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix {
        return (g.array() * p * x.array().pow(p - 1.0)).matrix();
      });
}

/// Matrix product a (r x k) times b (k x c).
inline Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  t.check_owner(b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + detail::shape_str(a.value()) + " times " + detail::shape_str(b.value()));
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value(), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

/// Dense layer x W + b with x: B x in, W: in x out, b: 1 x out.
inline Var affine(Var x, Var weight, Var bias) {
  Tape& t = x.tape();
  t.check_owner(weight);
  t.check_owner(bias);
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw ShapeError("affine: input " + detail::shape_str(x.value()) + ", weight " +
                     detail::shape_str(weight.value()) + ", bias " + detail::shape_str(bias.value()));
  }
  Matrix out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return t.record(std::move(out), {x, weight, bias}, [ix, iw, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    if (tp.requires_grad(ix)) tp.accumulate(ix, g * tp.value(iw).transpose());
    if (tp.requires_grad(iw)) tp.accumulate(iw, tp.value(ix).transpose() * g);
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
  });
}

/// Per-row matrix-vector product. Row b of `mat` holds a rows x cols matrix in
/// row-major order; row b of `vec` holds a length-cols vector. Returns B x rows.
inline Var batched_matvec(Var mat, Var vec, Index rows, Index cols) {
  Tape& t = mat.tape();
  t.check_owner(vec);
  if (mat.cols() != rows * cols || vec.cols() != cols || mat.rows() != vec.rows()) {
    throw ShapeError("batched_matvec: matrix " + detail::shape_str(mat.value()) + ", vector " +
                     detail::shape_str(vec.value()) + " for " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  const Matrix& s = mat.value();
  const Matrix& v = vec.value();
  Matrix out = Matrix::Zero(s.rows(), rows);
  for (Index i = 0; i < rows; ++i) {
    for (Index k = 0; k < cols; ++k) out.col(i) += s.col(i * cols + k).cwiseProduct(v.col(k));
  }
  const std::size_t is = mat.id(), iv = vec.id();
  return t.record(std::move(out), {mat, vec}, [is, iv, rows, cols](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    const Matrix& sv = tp.value(is);
    const Matrix& vv = tp.value(iv);
    if (tp.requires_grad(is)) {
      Matrix ds(sv.rows(), sv.cols());
      for (Index i = 0; i < rows; ++i) {
        for (Index k = 0; k < cols; ++k) ds.col(i * cols + k) = g.col(i).cwiseProduct(vv.col(k));
      }
      tp.accumulate(is, ds);
    }
    if (tp.requires_grad(iv)) {
      Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
      for (Index i = 0; i < rows; ++i) {
        for (Index k = 0; k < cols; ++k) dv.col(k) += g.col(i).cwiseProduct(sv.col(i * cols + k));
      }
      tp.accumulate(iv, dv);
    }
  });
}

/// Row sums: B x k -> B x 1.
inline Var sum_cols(Var a) {
  return detail::unary(
      a, [](const Matrix& x) -> Matrix { return x.rowwise().sum(); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix { return g.replicate(1, x.cols()); });
}

/// Sum of all entries: -> 1 x 1.
inline Var sum(Var a) {
  return detail::unary(
      a, [](const Matrix& x) -> Matrix { return Matrix::Constant(1, 1, x.sum()); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix {
        return Matrix::Constant(x.rows(), x.cols(), g(0, 0));
      });
}

/// Mean of all entries: -> 1 x 1.
inline Var mean(Var a) {
  const double count = static_cast<double>(a.value().size());
  if (count == 0.0) throw ShapeError("mean: empty operand");
  return sum(a) * (1.0 / count);
}

/// Columns [first, first+count).
inline Var slice_cols(Var a, Index first, Index count) {
  if (first < 0 || count < 0 || first + count > a.cols()) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t ia = a.id();
  return a.tape().record(a.value().middleCols(first, count), {a}, [ia, first, count](Tape& tp, std::size_t self) {
    Matrix g = Matrix::Zero(tp.value(ia).rows(), tp.value(ia).cols());
    g.middleCols(first, count) = tp.upstream(self);
    tp.accumulate(ia, g);
  });
}

/// Horizontal concatenation of operands with equal row counts.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& t = parts.front().tape();
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    t.check_owner(p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Index>> slots;
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    slots.emplace_back(p.id(), offset);
    offset += p.cols();
  }
  return t.record(std::move(out), parts, [slots](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    for (const auto& [id, off] : slots) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(off, tp.value(id).cols()));
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Constant of the given shape on the same tape as `like`.
inline Var filled(const Var& like, Index rows, Index cols, double value) {
  return like.tape().constant(Matrix::Constant(rows, cols, value));
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace fbsde::ad
