#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fbsde_bml/autodiff.hpp"
#include "fbsde_bml/errors.hpp"
#include "fbsde_bml/network.hpp"
#include "fbsde_bml/problems.hpp"
#include "fbsde_bml/random.hpp"
#include "fbsde_bml/timegrid.hpp"

namespace fbsde {

enum class LossKind { delta, lebesgue, exp_decay };

/// Time measure of the backward measurability loss.
struct LossSpec {
  LossKind kind = LossKind::lebesgue;
  double gamma = 0.05;

  void validate() const {
    if (kind == LossKind::exp_decay && !(gamma > 0.0)) {
      throw std::invalid_argument("LossSpec: gamma must be positive for the exponential-decay measure");
    }
  }
};

/// CLI spelling: delta, lambda, gamma.
inline std::string_view loss_name(LossKind kind) {
  switch (kind) {
    case LossKind::delta: return "delta";
    case LossKind::lebesgue: return "lambda";
    case LossKind::exp_decay: return "gamma";
  }
  return "";
}

inline LossKind parse_loss(std::string_view name) {
  if (name == "delta") return LossKind::delta;
  if (name == "lambda" || name == "lebesgue") return LossKind::lebesgue;
  if (name == "gamma" || name == "exp_decay") return LossKind::exp_decay;
  throw std::invalid_argument("unknown loss kind: " + std::string(name));
}

/// Quadrature weights w_j, j = 0..N-1, of the time measure on the grid.
inline std::vector<double> measure_weights(const LossSpec& spec, std::size_t intervals) {
  spec.validate();
  std::vector<double> w(intervals, 0.0);
  switch (spec.kind) {
    case LossKind::delta:
      w[0] = 1.0;
      break;
    case LossKind::lebesgue:
      for (double& x : w) x = 1.0 / static_cast<double>(intervals);
      break;
    case LossKind::exp_decay: {
      // (1 - e^{-gamma}) / (1 - e^{-gamma N}), written with expm1 for small gamma.
      const double norm = std::expm1(-spec.gamma) / std::expm1(-spec.gamma * static_cast<double>(intervals));
      for (std::size_t j = 0; j < intervals; ++j) w[j] = norm * std::exp(-spec.gamma * static_cast<double>(j));
      break;
    }
  }
  return w;
}

/// Trial maps (t, x) -> y and (t, x) -> z, e.g. BoundNetworks or an analytic solution.
template <class T>
concept TrialMaps = requires(const T& trial, double t, ad::Var x) {
  { trial.v(t, x) } -> std::convertible_to<ad::Var>;
  { trial.u(t, x) } -> std::convertible_to<ad::Var>;
};

/// Trial maps backed by a problem's analytic solution.
struct AnalyticTrial {
  const AnalyticSolution* solution;

  explicit AnalyticTrial(const FBSDEProblem& problem) : solution(problem.analytic ? &*problem.analytic : nullptr) {
    if (!solution) throw std::invalid_argument("problem " + problem.name + " has no analytic solution");
  }
  ad::Var v(double t, ad::Var x) const { return solution->y(t, x); }
  ad::Var u(double t, ad::Var x) const { return solution->z(t, x); }
};

/// Contiguous block of paths [first, first + count) of a Brownian batch.
struct PathRange {
  std::size_t first = 0;
  std::size_t count = 0;
};

/// Tape-recorded surrogate trajectories. Entry i of each series is a B x k
/// matrix over the paths of the rollout.
struct RolloutBatch {
  TimeGrid grid;
  std::vector<ad::Var> x;          // N+1 nodes, B x n
  std::vector<ad::Var> y;          // N+1 nodes, B x m
  std::vector<ad::Var> z;          // N+1 nodes, B x (m*d)
  std::vector<ad::Var> f;          // N nodes (0..N-1), B x m
  std::vector<ad::Var> increments; // N nodes, B x d, constants
  ad::Var terminal;                // B x m, g(X_N)
  std::size_t paths = 0;
};

/// Euler-Maruyama rollout of the forward surrogate driven by the trial maps.
template <TrialMaps Trial>
RolloutBatch rollout(ad::Tape& tape, const FBSDEProblem& problem, const Trial& trial, const BrownianBatch& bm,
                     PathRange range) {
  const TimeGrid& grid = bm.grid();
  if (bm.dim() != problem.d) throw ShapeError("rollout: Brownian dimension differs from problem d");
  if (std::abs(grid.horizon() - problem.horizon) > 1e-12 * problem.horizon) {
    throw ShapeError("rollout: grid horizon differs from problem horizon");
  }
  if (range.count == 0 || range.first + range.count > bm.paths()) throw ShapeError("rollout: path range out of bounds");

  const std::size_t steps = grid.intervals();
  const double dt = grid.step();
  const auto rows = static_cast<ad::Index>(range.count);
  const auto n = static_cast<ad::Index>(problem.n);
  const auto d = static_cast<ad::Index>(problem.d);

  RolloutBatch out{grid, {}, {}, {}, {}, {}, {}, range.count};
  out.x.reserve(steps + 1);
  out.x.push_back(tape.constant(problem.x0.transpose().replicate(rows, 1)));

  for (std::size_t i = 0;; ++i) {
    const double t = grid[i];
    const ad::Var xi = out.x.back();
    out.y.push_back(trial.v(t, xi));
    out.z.push_back(trial.u(t, xi));
    if (static_cast<std::size_t>(out.y.back().cols()) != problem.m ||
        static_cast<std::size_t>(out.z.back().cols()) != problem.m * problem.d) {
      throw ShapeError("rollout: trial maps do not match problem dimensions");
    }
    if (i == steps) break;

    const ad::Var b = problem.drift(t, xi, out.y.back(), out.z.back());
    const ad::Var s = problem.diffusion(t, xi, out.y.back(), out.z.back());
    out.f.push_back(problem.generator(t, xi, out.y.back(), out.z.back()));
    const ad::Var dw = tape.constant(bm.increments(i, range.first, range.count));
    out.increments.push_back(dw);

    const ad::Var next = xi + b * dt + ad::batched_matvec(s, dw, n, d);
    if (!next.value().allFinite()) throw DivergenceError("rollout: non-finite forward state", i + 1);
    out.x.push_back(next);
  }
  out.terminal = problem.terminal(out.x.back());
  if (!out.terminal.value().allFinite()) throw DivergenceError("rollout: non-finite terminal value", steps);
  return out;
}

template <TrialMaps Trial>
RolloutBatch rollout(ad::Tape& tape, const FBSDEProblem& problem, const Trial& trial, const BrownianBatch& bm) {
  return rollout(tape, problem, trial, bm, PathRange{0, bm.paths()});
}

/// Discrete residuals R_j = y_j - (g(X_N) + dt * sum_{i>=j} f_i - sum_{i>=j} z_i dW_i), j = 0..N-1,
/// each B x m. Built backward so that the whole set costs O(N).
inline std::vector<ad::Var> residuals(const RolloutBatch& batch, const FBSDEProblem& problem) {
  const std::size_t steps = batch.grid.intervals();
  if (batch.y.size() != steps + 1 || batch.f.size() != steps || batch.increments.size() != steps) {
    throw ShapeError("residuals: rollout batch does not match its grid");
  }
  const double dt = batch.grid.step();
  const auto m = static_cast<ad::Index>(problem.m);
  const auto d = static_cast<ad::Index>(problem.d);
  std::vector<ad::Var> r(steps);
  ad::Var tail = batch.terminal;
  for (std::size_t j = steps; j-- > 0;) {
    tail = tail + batch.f[j] * dt - ad::batched_matvec(batch.z[j], batch.increments[j], m, d);
    r[j] = batch.y[j] - tail;
  }
  return r;
}

/// Measure-weighted squared residual of each path: B x 1.
inline ad::Var bml_per_path(const RolloutBatch& batch, const FBSDEProblem& problem, const LossSpec& spec) {
  const std::vector<double> w = measure_weights(spec, batch.grid.intervals());
  const std::vector<ad::Var> r = residuals(batch, problem);
  ad::Var total = ad::sum_cols(ad::square(r[0])) * w[0];
  for (std::size_t j = 1; j < r.size(); ++j) {
    if (w[j] == 0.0) continue;
    total = total + ad::sum_cols(ad::square(r[j])) * w[j];
  }
  return total;
}

/// Monte Carlo estimate of the backward measurability loss: 1 x 1, tape-recorded.
inline ad::Var bml(const RolloutBatch& batch, const FBSDEProblem& problem, const LossSpec& spec) {
  return ad::mean(bml_per_path(batch, problem, spec));
}

/// A pair of processes sampled on a grid: per node a B x m matrix (y) and a
/// B x (m*d) matrix (z, row-major m x d per row).
struct SampledPair {
  std::vector<Eigen::MatrixXd> y;
  std::vector<Eigen::MatrixXd> z;

  static SampledPair from_rollout(const RolloutBatch& batch) {
    SampledPair s;
    for (const ad::Var& v : batch.y) s.y.push_back(v.value());
    for (const ad::Var& v : batch.z) s.z.push_back(v.value());
    return s;
  }
};

/// Per-path terms of dist_mu: sum_j w_j (|y_j - Y_j|^2 + dt * sum_{i>=j} |z_i - Z_i|^2).
inline Eigen::VectorXd dist_mu_per_path(const SampledPair& trial, const SampledPair& reference, const TimeGrid& grid,
                                        const LossSpec& spec) {
  const std::size_t steps = grid.intervals();
  if (trial.y.size() < steps + 1 || trial.z.size() < steps || reference.y.size() != trial.y.size() ||
      reference.z.size() != trial.z.size()) {
    throw ShapeError("dist_mu: sampled pairs do not cover the grid");
  }
  const Eigen::Index paths = trial.y[0].rows();
  for (std::size_t i = 0; i <= steps; ++i) {
    if (trial.y[i].rows() != paths || trial.y[i].rows() != reference.y[i].rows() ||
        trial.y[i].cols() != reference.y[i].cols() || trial.z[i].rows() != reference.z[i].rows() ||
        trial.z[i].cols() != reference.z[i].cols()) {
      throw ShapeError("dist_mu: trial and reference shapes differ at node " + std::to_string(i));
    }
  }
  const std::vector<double> w = measure_weights(spec, steps);
  const double dt = grid.step();
  Eigen::VectorXd z_tail = Eigen::VectorXd::Zero(paths);
  Eigen::VectorXd total = Eigen::VectorXd::Zero(paths);
  for (std::size_t j = steps; j-- > 0;) {
    z_tail += dt * (trial.z[j] - reference.z[j]).rowwise().squaredNorm();
    if (w[j] == 0.0) continue;
    total += w[j] * ((trial.y[j] - reference.y[j]).rowwise().squaredNorm() + z_tail);
  }
  return total;
}

/// Discretized pseudometric dist_mu between two sampled process pairs.
inline double dist_mu(const SampledPair& trial, const SampledPair& reference, const TimeGrid& grid,
                      const LossSpec& spec) {
  return dist_mu_per_path(trial, reference, grid, spec).mean();
}

}  // namespace fbsde
