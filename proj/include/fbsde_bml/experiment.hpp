#pragma once

// Experiment runner: resolves a run configuration, trains, and writes
//   manifest.json  resolved configuration and provenance
//   curve.csv      step,loss,y0_norm,rel_err (one row per recorded step)
//   summary.json   final loss, Y0, relative error, stop reason, timing
//   params.ckpt    trained parameters (see network.hpp for the format)
//   paths.csv      optional sample paths of (X, Y, Z)

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "fbsde_bml/problems.hpp"
#include "fbsde_bml/rollout.hpp"
#include "fbsde_bml/trainer.hpp"

namespace fbsde::cli {

inline constexpr const char* kToolName = "fbsde_bml";
inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kDiverged = 1, kBadArguments = 2, kRuntimeError = 3 };

/// Everything that determines a run's numbers. Thread count is excluded on purpose:
/// results do not depend on it.
struct RunSpec {
  ProblemId problem = ProblemId::fusincos;
  TrainConfig train;
  std::size_t dump_paths = 0;
};

/// Table-1 defaults for the example, overridden by any explicitly given value.
struct Overrides {
  std::optional<double> gamma;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> intervals;
  std::optional<std::size_t> layers;
  std::optional<std::size_t> width;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> record_every;
  std::optional<double> tolerance;
};

inline RunSpec resolve_run(ProblemId id, LossKind kind, const Overrides& o) {
  RunSpec run;
  run.problem = id;
  run.train = table1_config(id, kind);
  TrainConfig& c = run.train;
  c.max_steps = 2000;
  c.record_every = 10;
  if (o.gamma) c.loss.gamma = *o.gamma;
  if (o.steps) c.max_steps = *o.steps;
  if (o.batch) c.batch_size = *o.batch;
  if (o.intervals) c.intervals = *o.intervals;
  if (o.layers) c.hidden_layers = *o.layers;
  if (o.width) c.hidden_width = *o.width;
  if (o.lr) c.lr = *o.lr;
  if (o.seed) c.seed = *o.seed;
  if (o.record_every) c.record_every = *o.record_every;
  if (o.tolerance) c.tolerance = *o.tolerance;
  return run;
}

/// FBSDE_BML_THREADS caps worker threads; unset or 0 means hardware concurrency.
inline std::size_t threads_from_env() {
  const char* raw = std::getenv("FBSDE_BML_THREADS");
  if (raw == nullptr || *raw == '\0') return 0;
  try {
    return static_cast<std::size_t>(std::stoul(raw));
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string("FBSDE_BML_THREADS is not a non-negative integer: ") + raw);
  }
}

/// Keeps freed tape memory in the heap between chunks instead of returning it
/// to the kernel; avoids page-fault churn on every training step.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
#endif
}

inline std::string format_double(double x) {
  std::ostringstream s;
  s << std::setprecision(17) << x;
  return s.str();
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// 64-bit FNV-1a, hex-encoded.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json to_json(const Eigen::VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline nlohmann::json config_json(const RunSpec& run) {
  const TrainConfig& c = run.train;
  return nlohmann::json{
      {"example", std::string(problem_name(run.problem))},
      {"loss", std::string(loss_name(c.loss.kind))},
      {"gamma", c.loss.gamma},
      {"steps", c.max_steps},
      {"batch", c.batch_size},
      {"intervals", c.intervals},
      {"layers", c.hidden_layers},
      {"width", c.hidden_width},
      {"lr", c.lr},
      {"seed", c.seed},
      {"record_every", c.record_every},
      {"tolerance", c.tolerance},
      {"dump_paths", run.dump_paths},
  };
}

inline RunSpec run_from_config_json(const nlohmann::json& j) {
  RunSpec run;
  run.problem = parse_problem(j.at("example").get<std::string>());
  TrainConfig& c = run.train;
  c.problem_name = std::string(problem_name(run.problem));
  c.loss = LossSpec{parse_loss(j.at("loss").get<std::string>()), j.at("gamma").get<double>()};
  c.max_steps = j.at("steps").get<std::size_t>();
  c.batch_size = j.at("batch").get<std::size_t>();
  c.intervals = j.at("intervals").get<std::size_t>();
  c.hidden_layers = j.at("layers").get<std::size_t>();
  c.hidden_width = j.at("width").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.record_every = j.at("record_every").get<std::size_t>();
  c.tolerance = j.at("tolerance").get<double>();
  run.dump_paths = j.value("dump_paths", std::size_t{0});
  return run;
}

inline nlohmann::json problem_json(const FBSDEProblem& p) {
  nlohmann::json j{{"name", p.name}, {"n", p.n}, {"m", p.m}, {"d", p.d}, {"T", p.horizon}, {"x0", to_json(p.x0)}};
  j["reference_y0"] = p.reference_y0 ? to_json(*p.reference_y0) : nlohmann::json(nullptr);
  j["has_analytic"] = p.analytic.has_value();
  return j;
}

inline std::string manifest_hash(const RunSpec& run, const FBSDEProblem& problem) {
  const nlohmann::json identity{{"config", config_json(run)}, {"problem", problem_json(problem)}};
  return fnv1a_hex(identity.dump());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline void write_curve_csv(const std::filesystem::path& path, const TrainingRecord& record) {
  std::ostringstream s;
  s << "step,loss,y0_norm,rel_err\n";
  for (const CurvePoint& p : record.curve) {
    s << p.step << ',' << format_double(p.loss) << ',' << format_double(p.y0.norm()) << ','
      << (p.rel_err ? format_double(*p.rel_err) : std::string()) << '\n';
  }
  write_text(path, s.str());
}

inline std::string z_column(std::size_t i, std::size_t k, std::size_t m, std::size_t d) {
  if (m < 10 && d < 10) return "Z_" + std::to_string(i) + std::to_string(k);
  return "Z_" + std::to_string(i) + "_" + std::to_string(k);
}

inline void write_paths_csv(const std::filesystem::path& path, const FBSDEProblem& problem,
                            const SolutionPaths& paths) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "path,node,t";
  for (std::size_t i = 1; i <= problem.n; ++i) out << ",X_" << i;
  for (std::size_t i = 1; i <= problem.m; ++i) out << ",Y_" << i;
  for (std::size_t i = 1; i <= problem.m; ++i)
    for (std::size_t k = 1; k <= problem.d; ++k) out << ',' << z_column(i, k, problem.m, problem.d);
  out << '\n' << std::setprecision(17);
  const Eigen::Index count = paths.x.front().rows();
  for (Eigen::Index r = 0; r < count; ++r) {
    for (std::size_t node = 0; node < paths.x.size(); ++node) {
      out << r << ',' << node << ',' << paths.grid[node];
      for (Eigen::Index c = 0; c < paths.x[node].cols(); ++c) out << ',' << paths.x[node](r, c);
      for (Eigen::Index c = 0; c < paths.y[node].cols(); ++c) out << ',' << paths.y[node](r, c);
      for (Eigen::Index c = 0; c < paths.z[node].cols(); ++c) out << ',' << paths.z[node](r, c);
      out << '\n';
    }
  }
}

struct RunOutcome {
  TrainResult result;
  nlohmann::json summary;
  int exit_code = kOk;
};

/// Trains one configuration and writes its artifacts into `out_dir`.
inline RunOutcome execute_run(const RunSpec& run, const std::filesystem::path& out_dir, std::size_t threads,
                              std::ostream& log) {
  const FBSDEProblem problem = builtin_problem(run.problem);
  std::filesystem::create_directories(out_dir);

  nlohmann::json manifest{{"tool", kToolName},
                          {"version", kToolVersion},
                          {"timestamp", utc_timestamp()},
                          {"output_dir", out_dir.string()},
                          {"config", config_json(run)},
                          {"problem", problem_json(problem)}};
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");

  TrainConfig config = run.train;
  config.threads = threads;
  RunOutcome outcome{train(problem, config), {}, kOk};
  const TrainingRecord& rec = outcome.result.record;

  write_curve_csv(out_dir / "curve.csv", rec);
  save_checkpoint((out_dir / "params.ckpt").string(), Checkpoint{outcome.result.params, config.seed, rec.steps_completed});
  if (run.dump_paths > 0 && rec.stop_reason != StopReason::divergence) {
    const SolutionPaths paths = export_solution(problem, outcome.result.params, run.dump_paths, config.intervals,
                                                derive_seed(config.seed, 0x6578706f7274ULL));
    write_paths_csv(out_dir / "paths.csv", problem, paths);
  }

  nlohmann::json& s = outcome.summary;
  s["example"] = std::string(problem_name(run.problem));
  s["loss"] = std::string(loss_name(config.loss.kind));
  s["final_loss"] = rec.final_loss ? nlohmann::json(*rec.final_loss) : nlohmann::json(nullptr);
  s["final_y0"] = to_json(rec.final_y0);
  s["relative_error"] = rec.final_rel_err ? nlohmann::json(*rec.final_rel_err) : nlohmann::json(nullptr);
  s["stop_reason"] = std::string(stop_reason_name(rec.stop_reason));
  s["steps_completed"] = rec.steps_completed;
  s["final_lr"] = rec.final_lr;
  s["wall_seconds"] = rec.wall_seconds;
  s["manifest_hash"] = manifest_hash(run, problem);
  if (!rec.divergence_message.empty()) s["divergence"] = rec.divergence_message;
  write_text(out_dir / "summary.json", s.dump(2) + "\n");

  log << problem.name << " " << loss_name(config.loss.kind) << ": Y0 = [";
  for (Eigen::Index i = 0; i < rec.final_y0.size() && i < 5; ++i) log << (i ? ", " : "") << rec.final_y0(i);
  if (rec.final_y0.size() > 5) log << ", ...";
  log << "]";
  if (rec.final_rel_err) log << "  relative error = " << *rec.final_rel_err;
  log << "  (" << stop_reason_name(rec.stop_reason) << ", " << rec.wall_seconds << " s)\n";

  outcome.exit_code = rec.stop_reason == StopReason::divergence ? kDiverged : kOk;
  return outcome;
}

struct BenchmarkCell {
  ProblemId problem;
  LossKind loss;
  double y0;
  double rel_err;
};

/// Published Y0 estimates and relative errors for the twelve benchmark cells.
inline std::vector<BenchmarkCell> table2_cells() {
  using P = ProblemId;
  using L = LossKind;
  return {
      {P::fusincos, L::delta, 0.8443, 0.0033},   {P::fusincos, L::lebesgue, 0.8352, 0.0075},
      {P::fusincos, L::exp_decay, 0.8396, 0.0024}, {P::longsin, L::delta, 8.2888, 0.171},
      {P::longsin, L::lebesgue, 9.9921, 0.0008},   {P::longsin, L::exp_decay, 9.9232, 0.0076},
      {P::lq5, L::delta, -0.9589, 0.0021},         {P::lq5, L::lebesgue, -0.9632, 0.0068},
      {P::lq5, L::exp_decay, -0.9627, 0.0062},     {P::lq100, L::delta, -0.9593, 0.0025},
      {P::lq100, L::lebesgue, -0.9558, 0.0008},    {P::lq100, L::exp_decay, -0.9603, 0.0037},
  };
}

/// Default step budget per benchmark cell; the 100-dimensional case gets more.
inline std::size_t suite_steps(ProblemId id) { return id == ProblemId::lq100 ? 4000 : 2000; }

/// Runs all twelve cells and writes table2.csv next to the per-cell directories.
inline int run_suite(const std::string& suite, const std::filesystem::path& out_dir, const Overrides& overrides,
                     std::size_t threads, std::ostream& log) {
  if (suite != "table2") throw std::invalid_argument("unknown suite: " + suite);
  std::filesystem::create_directories(out_dir);
  std::ostringstream table;
  table << "example,loss,predicted_y0,rel_err,paper_y0,paper_rel_err,status\n";
  bool all_ok = true;
  for (const BenchmarkCell& cell : table2_cells()) {
    Overrides o = overrides;
    if (!o.steps) o.steps = suite_steps(cell.problem);
    const RunSpec run = resolve_run(cell.problem, cell.loss, o);
    const std::string name = std::string(problem_name(cell.problem)) + "_" + std::string(loss_name(cell.loss));
    std::string predicted, rel, status;
    try {
      const RunOutcome out = execute_run(run, out_dir / name, threads, log);
      const TrainingRecord& rec = out.result.record;
      predicted = format_double(rec.final_y0.mean());
      rel = rec.final_rel_err ? format_double(*rec.final_rel_err) : "";
      status = out.exit_code == kOk ? "ok" : "failed";
    } catch (const std::exception& e) {
      log << name << ": " << e.what() << "\n";
      status = "failed";
    }
    all_ok = all_ok && status == "ok";
    table << problem_name(cell.problem) << ',' << loss_name(cell.loss) << ',' << predicted << ',' << rel << ','
          << format_double(cell.y0) << ',' << format_double(cell.rel_err) << ',' << status << '\n';
  }
  write_text(out_dir / "table2.csv", table.str());
  return all_ok ? kOk : kDiverged;
}

/// Entry point shared by the executable and the tests. `args` excludes the program name.
inline int run_cli(std::vector<std::string> args, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Solve coupled FBSDEs by minimizing the backward measurability loss"};
  app.name(kToolName);
  std::string example, loss = "lambda", suite, out_dir, manifest_path;
  Overrides o;
  std::size_t dump_paths = 0;

  app.add_option("--example", example, "Benchmark problem")
      ->check(CLI::IsMember({"fusincos", "longsin", "lq5", "lq100", "linear"}));
  app.add_option("--loss", loss, "Time measure of the loss")->check(CLI::IsMember({"delta", "lambda", "gamma"}));
  app.add_option("--gamma", o.gamma, "Decay rate of the gamma measure (default 0.05)")->check(CLI::PositiveNumber);
  app.add_option("--steps", o.steps, "Gradient steps (default 2000)");
  app.add_option("--batch", o.batch, "Monte Carlo paths per step")->check(CLI::PositiveNumber);
  app.add_option("--intervals", o.intervals, "Time intervals N")->check(CLI::PositiveNumber);
  app.add_option("--layers", o.layers, "Hidden layers per network")->check(CLI::PositiveNumber);
  app.add_option("--width", o.width, "Neurons per hidden layer")->check(CLI::PositiveNumber);
  app.add_option("--lr", o.lr, "Adam step size")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", o.seed, "Random seed (default 0)");
  app.add_option("--tolerance", o.tolerance, "Stop once the loss drops below this value (default 0: off)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--record-every", o.record_every, "Curve sampling interval in steps (default 10)")
      ->check(CLI::PositiveNumber);
  app.add_option("--dump-paths", dump_paths, "Sample paths to export after training (default 0)");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--suite", suite, "Run a benchmark suite instead of one example")->check(CLI::IsMember({"table2"}));
  app.add_option("--from-manifest", manifest_path, "Re-run the configuration stored in a manifest.json")
      ->check(CLI::ExistingFile);

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, log, err);
    return code == 0 ? kOk : kBadArguments;
  }

  try {
    const std::size_t threads = threads_from_env();
    const int selected = int(!example.empty()) + int(!suite.empty()) + int(!manifest_path.empty());
    if (selected != 1) {
      err << "exactly one of --example, --suite or --from-manifest is required\n";
      return kBadArguments;
    }
    if (!suite.empty()) {
      return run_suite(suite, out_dir.empty() ? "runs/" + suite : out_dir, o, threads, log);
    }
    RunSpec run;
    if (!manifest_path.empty()) {
      std::ifstream in(manifest_path);
      run = run_from_config_json(nlohmann::json::parse(in).at("config"));
    } else {
      run = resolve_run(parse_problem(example), parse_loss(loss), o);
      run.dump_paths = dump_paths;
    }
    run.train.validate();
    const std::filesystem::path dir =
        out_dir.empty() ? std::filesystem::path("runs") / (std::string(problem_name(run.problem)) + "_" +
                                                            std::string(loss_name(run.train.loss.kind)))
                        : std::filesystem::path(out_dir);
    return execute_run(run, dir, threads, log).exit_code;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kBadArguments;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace fbsde::cli
