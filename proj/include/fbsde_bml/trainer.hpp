#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "fbsde_bml/adam.hpp"
#include "fbsde_bml/autodiff.hpp"
#include "fbsde_bml/errors.hpp"
#include "fbsde_bml/network.hpp"
#include "fbsde_bml/problems.hpp"
#include "fbsde_bml/random.hpp"
#include "fbsde_bml/rollout.hpp"
#include "fbsde_bml/timegrid.hpp"

namespace fbsde {

/// Paths per tape. Fixed so that the loss and gradient reduction order does
/// not depend on the number of worker threads.
inline constexpr std::size_t kChunkPaths = 256;

struct TrainConfig {
  std::string problem_name;
  LossSpec loss;
  std::size_t batch_size = 0;      // M
  std::size_t intervals = 0;       // N
  std::size_t hidden_layers = 2;
  std::size_t hidden_width = 8;
  double lr = 1e-3;
  std::size_t max_steps = 2000;
  double tolerance = 0.0;          // stop once loss < tolerance; 0 disables
  std::uint64_t seed = 0;
  std::size_t record_every = 10;
  std::size_t threads = 1;         // 0 = hardware concurrency

  void validate() const {
    loss.validate();
    if (batch_size == 0 || intervals == 0 || hidden_layers == 0 || hidden_width == 0) {
      throw std::invalid_argument("TrainConfig: batch size, intervals and network sizes must be positive");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("TrainConfig: learning rate must be >= 0");
    if (tolerance < 0.0) throw std::invalid_argument("TrainConfig: tolerance must be >= 0");
    if (record_every == 0) throw std::invalid_argument("TrainConfig: record_every must be positive");
  }
};

/// Benchmark settings per (problem, loss): M, N, network shape and learning rate.
inline TrainConfig table1_config(ProblemId id, LossKind kind) {
  TrainConfig c;
  c.problem_name = std::string(problem_name(id));
  c.loss = LossSpec{kind, 0.05};
  switch (id) {
    case ProblemId::fusincos:
      c.batch_size = 4096, c.intervals = 25, c.hidden_layers = 2, c.hidden_width = 8, c.lr = 1e-3;
      break;
    case ProblemId::longsin:
      c.batch_size = 1024, c.intervals = 50, c.hidden_layers = 3, c.hidden_width = 32, c.lr = 1e-3;
      break;
    case ProblemId::lq5:
      c.batch_size = 64, c.intervals = 25, c.hidden_layers = 2, c.hidden_width = 16, c.lr = 1e-3;
      break;
    case ProblemId::lq100:
      c.batch_size = 64, c.intervals = 25, c.hidden_layers = 2, c.hidden_width = 16;
      c.lr = kind == LossKind::delta ? 5e-4 : 2e-3;
      break;
    case ProblemId::linear_fixture:
      c.batch_size = 256, c.intervals = 25, c.hidden_layers = 2, c.hidden_width = 8, c.lr = 1e-3;
      break;
  }
  return c;
}

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested != 0) return requested;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// ||est - ref||_2 / ||ref||_2.
inline double relative_error(const Eigen::VectorXd& estimate, const Eigen::VectorXd& reference) {
  if (estimate.size() != reference.size()) throw ShapeError("relative_error: vectors differ in length");
  const double norm = reference.norm();
  if (norm == 0.0) throw std::invalid_argument("relative_error: reference has zero norm");
  return (estimate - reference).norm() / norm;
}

inline std::optional<double> relative_error_vs(const FBSDEProblem& problem, const Eigen::VectorXd& y0) {
  if (!problem.reference_y0 || problem.reference_y0->norm() == 0.0) return std::nullopt;
  return relative_error(y0, *problem.reference_y0);
}

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

/// Loss and d(loss)/d(theta) over a Brownian batch. Paths are processed in
/// chunks of kChunkPaths on separate tapes; chunk results are reduced in
/// chunk order.
inline LossAndGradient loss_and_gradient(const FBSDEProblem& problem, const NetworkParams& params,
                                         const BrownianBatch& bm, const LossSpec& spec, std::size_t threads = 1) {
  const std::size_t paths = bm.paths();
  const std::size_t chunks = (paths + kChunkPaths - 1) / kChunkPaths;
  std::vector<LossAndGradient> partial(chunks);
  std::vector<std::exception_ptr> errors(chunks);

  auto run_chunk = [&](std::size_t c) {
    try {
      const std::size_t first = c * kChunkPaths;
      const std::size_t count = std::min(kChunkPaths, paths - first);
      ad::Tape tape;
      const BoundNetworks nets(tape, params);
      const RolloutBatch batch = rollout(tape, problem, nets, bm, PathRange{first, count});
      const ad::Var loss = ad::sum(bml_per_path(batch, problem, spec)) * (1.0 / static_cast<double>(paths));
      tape.backward(loss);
      partial[c].loss = loss.value()(0, 0);
      partial[c].gradient = nets.gradient(tape);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };

  const std::size_t workers = std::min(resolve_threads(threads), chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < chunks; c = next++) run_chunk(c);
      });
    }
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  LossAndGradient total{0.0, std::vector<double>(params.theta.size(), 0.0)};
  for (const LossAndGradient& p : partial) {
    total.loss += p.loss;
    for (std::size_t k = 0; k < total.gradient.size(); ++k) total.gradient[k] += p.gradient[k];
  }
  return total;
}

enum class StopReason { max_steps, tolerance, divergence };

inline std::string_view stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::max_steps: return "max_steps";
    case StopReason::tolerance: return "tolerance";
    case StopReason::divergence: return "divergence";
  }
  return "";
}

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;               // pre-update loss at this step
  Eigen::VectorXd y0;              // v(0, x0) before the update
  std::optional<double> rel_err;
};

struct TrainingRecord {
  std::vector<CurvePoint> curve;
  std::size_t steps_completed = 0;
  std::optional<double> final_loss;
  Eigen::VectorXd final_y0;
  std::optional<double> final_rel_err;
  StopReason stop_reason = StopReason::max_steps;
  std::string divergence_message;
  double final_lr = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  NetworkParams params;
  TrainingRecord record;
};

/// Seed of the Brownian batch drawn at training step k.
inline std::uint64_t step_seed(std::uint64_t seed, std::size_t step) {
  return derive_seed(derive_seed(seed, 0x7374657073ULL), step);
}

/// Resample, roll out, evaluate the loss, take one Adam step; repeat.
///
/// On a non-finite state, loss or gradient the previous update is undone and
/// replayed once with half the learning rate; a second failure stops the run
/// with the last parameters whose loss was finite.
inline TrainResult train(const FBSDEProblem& problem, const TrainConfig& config) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const TimeGrid grid(problem.horizon, config.intervals);
  const NetworkArch arch =
      NetworkArch::for_problem(problem.n, problem.m, problem.d, config.hidden_layers, config.hidden_width);

  TrainResult result{init_network(arch, config.seed), {}};
  NetworkParams& params = result.params;
  TrainingRecord& record = result.record;
  AdamState state(params.theta.size());
  double lr = config.lr;
  bool halved = false;

  struct Snapshot {
    std::vector<double> theta;
    AdamState state;
    std::vector<double> gradient;
  };
  std::optional<Snapshot> before_last_update;

  for (std::size_t step = 0; step < config.max_steps;) {
    const BrownianBatch bm = sample_brownian(grid, config.batch_size, problem.d, step_seed(config.seed, step));
    LossAndGradient eval;
    try {
      eval = loss_and_gradient(problem, params, bm, config.loss, config.threads);
      if (!std::isfinite(eval.loss)) throw DivergenceError("non-finite loss", step);
      for (double g : eval.gradient) {
        if (!std::isfinite(g)) throw DivergenceError("non-finite gradient", step);
      }
    } catch (const DivergenceError& e) {
      if (!halved && before_last_update) {
        halved = true;
        lr *= 0.5;
        params.theta = before_last_update->theta;
        state = before_last_update->state;
        adam_step(params.theta, before_last_update->gradient, state, lr);
        continue;
      }
      if (before_last_update) params.theta = before_last_update->theta;
      record.stop_reason = StopReason::divergence;
      record.divergence_message = e.what();
      break;
    }

    record.final_loss = eval.loss;
    if (step % config.record_every == 0 || step + 1 == config.max_steps) {
      CurvePoint point{step, eval.loss, forward_v(params, 0.0, problem.x0), std::nullopt};
      point.rel_err = relative_error_vs(problem, point.y0);
      record.curve.push_back(std::move(point));
    }
    if (config.tolerance > 0.0 && eval.loss < config.tolerance) {
      record.stop_reason = StopReason::tolerance;
      break;
    }
    before_last_update = Snapshot{params.theta, state, eval.gradient};
    adam_step(params.theta, eval.gradient, state, lr);
    ++step;
    record.steps_completed = step;
  }

  record.final_y0 = forward_v(params, 0.0, problem.x0);
  record.final_rel_err = relative_error_vs(problem, record.final_y0);
  record.final_lr = lr;
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

/// Sampled (X, Y, Z) on every node of a fresh Brownian batch.
struct SolutionPaths {
  TimeGrid grid;
  std::vector<Eigen::MatrixXd> x;  // N+1 nodes, M' x n
  std::vector<Eigen::MatrixXd> y;  // N+1 nodes, M' x m
  std::vector<Eigen::MatrixXd> z;  // N+1 nodes, M' x (m*d), row-major m x d
};

inline SolutionPaths export_solution(const FBSDEProblem& problem, const NetworkParams& params, std::size_t paths,
                                     std::size_t intervals, std::uint64_t seed) {
  const TimeGrid grid(problem.horizon, intervals);
  const BrownianBatch bm = sample_brownian(grid, paths, problem.d, seed);
  SolutionPaths out{grid, {}, {}, {}};
  const auto rows = static_cast<Eigen::Index>(paths);
  for (std::size_t i = 0; i <= intervals; ++i) {
    out.x.emplace_back(rows, static_cast<Eigen::Index>(problem.n));
    out.y.emplace_back(rows, static_cast<Eigen::Index>(problem.m));
    out.z.emplace_back(rows, static_cast<Eigen::Index>(problem.m * problem.d));
  }
  for (std::size_t first = 0; first < paths; first += kChunkPaths) {
    const std::size_t count = std::min(kChunkPaths, paths - first);
    ad::Tape tape;
    const BoundNetworks nets(tape, params);
    const RolloutBatch batch = rollout(tape, problem, nets, bm, PathRange{first, count});
    const auto r0 = static_cast<Eigen::Index>(first), rc = static_cast<Eigen::Index>(count);
    for (std::size_t i = 0; i <= intervals; ++i) {
      out.x[i].middleRows(r0, rc) = batch.x[i].value();
      out.y[i].middleRows(r0, rc) = batch.y[i].value();
      out.z[i].middleRows(r0, rc) = batch.z[i].value();
    }
  }
  return out;
}

/// Spread of the Y0 estimate inside a window of recorded steps, compared with
/// its step-to-step noise.
struct StabilizationReport {
  std::size_t samples = 0;
  double max_deviation = 0.0;  // max_k ||y0_k - mean||
  double noise_floor = 0.0;    // RMS of ||y0_{k+1} - y0_k|| over consecutive records
  double ratio() const { return noise_floor > 0.0 ? max_deviation / noise_floor : (max_deviation > 0.0 ? INFINITY : 0.0); }
};

inline StabilizationReport y0_stabilization(const TrainingRecord& record, std::size_t first_step,
                                            std::size_t last_step) {
  std::vector<const Eigen::VectorXd*> window;
  for (const CurvePoint& p : record.curve) {
    if (p.step >= first_step && p.step <= last_step) window.push_back(&p.y0);
  }
  StabilizationReport report;
  report.samples = window.size();
  if (window.size() < 2) return report;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(window.front()->size());
  for (const auto* y : window) mean += *y;
  mean /= static_cast<double>(window.size());
  double sq = 0.0;
  for (std::size_t k = 0; k < window.size(); ++k) {
    report.max_deviation = std::max(report.max_deviation, (*window[k] - mean).norm());
    if (k + 1 < window.size()) sq += (*window[k + 1] - *window[k]).squaredNorm();
  }
  report.noise_floor = std::sqrt(sq / static_cast<double>(window.size() - 1));
  return report;
}

}  // namespace fbsde
