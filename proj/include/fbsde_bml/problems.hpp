#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fbsde_bml/autodiff.hpp"
#include "fbsde_bml/errors.hpp"

namespace fbsde {

/// Coefficient of the forward or backward equation, evaluated on a batch.
/// x: B x n, y: B x m, z: B x (m*d) with each row a row-major m x d matrix.
using CoefficientFn = std::function<ad::Var(double t, ad::Var x, ad::Var y, ad::Var z)>;
/// Terminal condition g(x_T): B x n -> B x m.
using TerminalFn = std::function<ad::Var(ad::Var x)>;
/// A map (t, x) -> y (B x m) or z (B x m*d).
using StateFn = std::function<ad::Var(double t, ad::Var x)>;

struct AnalyticSolution {
  StateFn y;
  StateFn z;
};

/// X_t = x0 + int b ds + int sigma dW,  Y_t = g(X_T) + int_t^T f ds - int_t^T Z dW.
/// drift returns B x n, diffusion returns B x (n*d) (row-major n x d per row),
/// generator returns B x m.
struct FBSDEProblem {
  std::string name;
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t d = 0;
  Eigen::VectorXd x0;
  double horizon = 0.0;
  CoefficientFn drift;
  CoefficientFn diffusion;
  CoefficientFn generator;
  TerminalFn terminal;
  std::optional<Eigen::VectorXd> reference_y0;
  std::optional<AnalyticSolution> analytic;
};

enum class ProblemId { fusincos, longsin, lq5, lq100, linear_fixture };

inline constexpr std::string_view problem_name(ProblemId id) {
  switch (id) {
    case ProblemId::fusincos: return "fusincos";
    case ProblemId::longsin: return "longsin";
    case ProblemId::lq5: return "lq5";
    case ProblemId::lq100: return "lq100";
    case ProblemId::linear_fixture: return "linear";
  }
  return "";
}

/// Accepts the CLI names plus "linear_fixture" as an alias of "linear".
inline ProblemId parse_problem(std::string_view name) {
  if (name == "fusincos") return ProblemId::fusincos;
  if (name == "longsin") return ProblemId::longsin;
  if (name == "lq5") return ProblemId::lq5;
  if (name == "lq100") return ProblemId::lq100;
  if (name == "linear" || name == "linear_fixture") return ProblemId::linear_fixture;
  throw std::invalid_argument("unknown problem: " + std::string(name));
}

namespace problems {

inline FBSDEProblem fusincos() {
  FBSDEProblem p;
  p.name = "fusincos";
  p.n = p.m = p.d = 1;
  p.x0 = Eigen::VectorXd::Constant(1, 1.0);
  p.horizon = 1.0;
  p.drift = [](double t, ad::Var x, ad::Var y, ad::Var z) {
    const ad::Var s = x + t;
    return -0.5 * ad::sin(s) * ad::cos(s) * (ad::square(y) + z);
  };
  p.diffusion = [](double t, ad::Var x, ad::Var y, ad::Var z) {
    const ad::Var s = x + t;
    return 0.5 * ad::cos(s) * (y * ad::sin(s) + z + 1.0);
  };
  p.generator = [](double t, ad::Var x, ad::Var y, ad::Var z) { return y * z - ad::cos(x + t); };
  const double horizon = p.horizon;
  p.terminal = [horizon](ad::Var x) { return ad::sin(x + horizon); };
  p.analytic = AnalyticSolution{
      [](double t, ad::Var x) { return ad::sin(x + t); },
      [](double t, ad::Var x) { return ad::square(ad::cos(x + t)); },
  };
  p.reference_y0 = Eigen::VectorXd::Constant(1, std::sin(p.x0(0)));
  return p;
}

/// Forward equation without Z; Y_t = (10/d) e^{-r(T-t)} sum_j sin(X_j).
inline FBSDEProblem longsin(std::size_t dim = 4, double rate = 0.0, double sigma0 = 0.4) {
  FBSDEProblem p;
  p.name = "longsin";
  p.n = p.d = dim;
  p.m = 1;
  p.x0 = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(dim), std::numbers::pi / 2.0);
  p.horizon = 1.0;
  const double horizon = p.horizon;
  const double scale = 10.0 / static_cast<double>(dim);
  const auto n = static_cast<ad::Index>(dim);

  ad::Matrix identity_row = ad::Matrix::Zero(1, n * n);
  for (ad::Index i = 0; i < n; ++i) identity_row(0, i * n + i) = 1.0;

  p.drift = [n](double, ad::Var x, ad::Var, ad::Var) { return ad::filled(x, x.rows(), n, 0.0); };
  p.diffusion = [identity_row, sigma0](double, ad::Var x, ad::Var y, ad::Var) {
    return (y * sigma0) * x.tape().constant(identity_row);
  };
  p.generator = [=](double t, ad::Var x, ad::Var y, ad::Var) {
    const ad::Var level = ad::sum_cols(ad::sin(x)) * scale;
    return y * (-rate) + ad::pow(level, 3.0) * (0.5 * sigma0 * sigma0 * std::exp(-3.0 * rate * (horizon - t)));
  };
  p.terminal = [scale](ad::Var x) { return ad::sum_cols(ad::sin(x)) * scale; };
  p.analytic = AnalyticSolution{
      [=](double t, ad::Var x) { return ad::sum_cols(ad::sin(x)) * (scale * std::exp(-rate * (horizon - t))); },
      [=](double t, ad::Var x) {
        const double c = sigma0 * scale * scale * std::exp(-2.0 * rate * (horizon - t));
        return ad::cos(x) * ad::sum_cols(ad::sin(x)) * c;
      },
  };
  p.reference_y0 = Eigen::VectorXd::Constant(1, 10.0 * std::exp(-rate * horizon));
  return p;
}

/// Adjoint system of the linear-quadratic control problem with Q = I, d = 1.
inline FBSDEProblem linear_quadratic(std::size_t dim) {
  FBSDEProblem p;
  p.name = dim == 5 ? "lq5" : (dim == 100 ? "lq100" : "lq" + std::to_string(dim));
  p.n = p.m = dim;
  p.d = 1;
  p.x0 = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(dim));
  p.horizon = 0.1;
  p.drift = [](double, ad::Var x, ad::Var y, ad::Var z) { return x * -0.25 + y * 0.5 + z * 0.5; };
  p.diffusion = [](double, ad::Var x, ad::Var y, ad::Var z) { return x * 0.2 + y * 0.5 + z * 0.5; };
  p.generator = [](double, ad::Var x, ad::Var y, ad::Var z) { return x * -0.5 - y * 0.25 + z * 0.2; };
  p.terminal = [](ad::Var x) { return -x; };
  // Riccati solution at t = 0 scaled by x0 = 1.
  p.reference_y0 = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(dim), -0.9586);
  return p;
}

/// X = x0 + W with x0 = 0, Y_t = W_t, Z = 1.
inline FBSDEProblem linear_fixture() {
  FBSDEProblem p;
  p.name = "linear";
  p.n = p.m = p.d = 1;
  p.x0 = Eigen::VectorXd::Zero(1);
  p.horizon = 1.0;
  p.drift = [](double, ad::Var x, ad::Var, ad::Var) { return ad::filled(x, x.rows(), 1, 0.0); };
  p.diffusion = [](double, ad::Var x, ad::Var, ad::Var) { return ad::filled(x, x.rows(), 1, 1.0); };
  p.generator = [](double, ad::Var x, ad::Var, ad::Var) { return ad::filled(x, x.rows(), 1, 0.0); };
  p.terminal = [](ad::Var x) { return x + 0.0; };
  p.analytic = AnalyticSolution{
      [](double, ad::Var x) { return x + 0.0; },
      [](double, ad::Var x) { return ad::filled(x, x.rows(), 1, 1.0); },
  };
  p.reference_y0 = Eigen::VectorXd::Zero(1);
  return p;
}

}  // namespace problems

inline FBSDEProblem builtin_problem(ProblemId id) {
  switch (id) {
    case ProblemId::fusincos: return problems::fusincos();
    case ProblemId::longsin: return problems::longsin();
    case ProblemId::lq5: return problems::linear_quadratic(5);
    case ProblemId::lq100: return problems::linear_quadratic(100);
    case ProblemId::linear_fixture: return problems::linear_fixture();
  }
  throw std::invalid_argument("unknown problem id");
}

inline FBSDEProblem builtin_problem(std::string_view name) { return builtin_problem(parse_problem(name)); }

struct CoefficientValues {
  Eigen::VectorXd drift;      // n
  Eigen::MatrixXd diffusion;  // n x d
  Eigen::VectorXd generator;  // m
};

namespace detail {

inline ad::Matrix row_major_flat(const Eigen::MatrixXd& a) {
  ad::Matrix flat(1, a.size());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index k = 0; k < a.cols(); ++k) flat(0, i * a.cols() + k) = a(i, k);
  return flat;
}

inline Eigen::MatrixXd unflatten_row(const ad::Matrix& flat, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd a(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) a(i, k) = flat(0, i * cols + k);
  return a;
}

inline void expect_shape(const ad::Var& v, std::size_t cols, const char* what) {
  if (static_cast<std::size_t>(v.cols()) != cols) {
    throw ShapeError(std::string(what) + " returned " + std::to_string(v.cols()) + " columns, expected " +
                     std::to_string(cols));
  }
}

}  // namespace detail

/// Point evaluation of (b, sigma, f) at a single (t, x, y, z).
inline CoefficientValues eval_coefficients(const FBSDEProblem& p, double t, const Eigen::VectorXd& x,
                                           const Eigen::VectorXd& y, const Eigen::MatrixXd& z) {
  const auto n = static_cast<Eigen::Index>(p.n), m = static_cast<Eigen::Index>(p.m),
             d = static_cast<Eigen::Index>(p.d);
  if (x.size() != n || y.size() != m || z.rows() != m || z.cols() != d) {
    throw ShapeError("eval_coefficients: argument shapes do not match problem dimensions");
  }
  ad::Tape tape;
  const ad::Var xv = tape.constant(x.transpose());
  const ad::Var yv = tape.constant(y.transpose());
  const ad::Var zv = tape.constant(detail::row_major_flat(z));
  const ad::Var b = p.drift(t, xv, yv, zv);
  const ad::Var s = p.diffusion(t, xv, yv, zv);
  const ad::Var f = p.generator(t, xv, yv, zv);
  detail::expect_shape(b, p.n, "drift");
  detail::expect_shape(s, p.n * p.d, "diffusion");
  detail::expect_shape(f, p.m, "generator");
  return CoefficientValues{b.value().row(0).transpose(), detail::unflatten_row(s.value(), n, d),
                           f.value().row(0).transpose()};
}

/// Analytic (Y_t, Z_t) at a single point, when the problem carries one.
inline std::optional<std::pair<Eigen::VectorXd, Eigen::MatrixXd>> analytic_reference(const FBSDEProblem& p, double t,
                                                                                     const Eigen::VectorXd& x) {
  if (!p.analytic) return std::nullopt;
  if (x.size() != static_cast<Eigen::Index>(p.n)) throw ShapeError("analytic_reference: state has wrong length");
  ad::Tape tape;
  const ad::Var xv = tape.constant(x.transpose());
  const ad::Var y = p.analytic->y(t, xv);
  const ad::Var z = p.analytic->z(t, xv);
  return std::make_pair(Eigen::VectorXd(y.value().row(0).transpose()),
                        detail::unflatten_row(z.value(), static_cast<Eigen::Index>(p.m),
                                              static_cast<Eigen::Index>(p.d)));
}

}  // namespace fbsde
