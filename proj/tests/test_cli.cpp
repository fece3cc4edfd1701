#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "fbsde_bml/experiment.hpp"

namespace fbsde::cli {
namespace {

namespace fs = std::filesystem;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("fbsde_bml_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    log_.str("");
    err_.str("");
    return run_cli(std::move(args), log_, err_);
  }

  fs::path dir_;
  std::ostringstream log_, err_;
};

TEST_F(CliTest, RejectsBadArguments) {
  EXPECT_EQ(run({}), kBadArguments);
  EXPECT_EQ(run({"--example", "heston"}), kBadArguments);
  EXPECT_EQ(run({"--example", "lq5", "--loss", "beta"}), kBadArguments);
  EXPECT_EQ(run({"--example", "lq5", "--batch", "0"}), kBadArguments);
  EXPECT_EQ(run({"--example", "lq5", "--suite", "table2"}), kBadArguments);
  EXPECT_EQ(run({"--example", "lq5", "--no-such-flag"}), kBadArguments);
  EXPECT_EQ(run({"--from-manifest", (dir_ / "missing.json").string()}), kBadArguments);
  EXPECT_FALSE(fs::exists(dir_));
}

TEST_F(CliTest, HelpExitsCleanly) {
  EXPECT_EQ(run({"--help"}), kOk);
  EXPECT_NE(log_.str().find("--example"), std::string::npos);
}

TEST_F(CliTest, WritesRunArtifacts) {
  ASSERT_EQ(run({"--example", "lq5", "--loss", "gamma", "--steps", "12", "--record-every", "5", "--dump-paths", "3",
                 "--out", dir_.string()}),
            kOk)
      << err_.str();
  for (const char* name : {"manifest.json", "curve.csv", "params.ckpt", "paths.csv", "summary.json"}) {
    EXPECT_TRUE(fs::exists(dir_ / name)) << name;
  }

  std::istringstream curve(read_file(dir_ / "curve.csv"));
  std::string line;
  std::getline(curve, line);
  EXPECT_EQ(line, "step,loss,y0_norm,rel_err");
  std::vector<std::string> steps;
  while (std::getline(curve, line)) steps.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(steps, (std::vector<std::string>{"0", "5", "10", "11"}));

  const auto manifest = nlohmann::json::parse(read_file(dir_ / "manifest.json"));
  EXPECT_EQ(manifest.at("config").at("example"), "lq5");
  EXPECT_EQ(manifest.at("config").at("loss"), "gamma");
  EXPECT_EQ(manifest.at("config").at("batch"), 64);
  EXPECT_TRUE(manifest.contains("timestamp"));

  const auto summary = nlohmann::json::parse(read_file(dir_ / "summary.json"));
  EXPECT_EQ(summary.at("steps_completed"), 12);
  EXPECT_EQ(summary.at("stop_reason"), "max_steps");
  EXPECT_EQ(summary.at("final_y0").size(), 5u);
  EXPECT_TRUE(summary.at("relative_error").is_number());

  std::istringstream paths(read_file(dir_ / "paths.csv"));
  std::getline(paths, line);
  EXPECT_EQ(line, "path,node,t,X_1,X_2,X_3,X_4,X_5,Y_1,Y_2,Y_3,Y_4,Y_5,Z_11,Z_21,Z_31,Z_41,Z_51");
  std::size_t rows = 0;
  while (std::getline(paths, line)) ++rows;
  EXPECT_EQ(rows, 3u * 26u);

  const Checkpoint ckpt = load_checkpoint((dir_ / "params.ckpt").string());
  EXPECT_EQ(ckpt.step, 12u);
  EXPECT_EQ(ckpt.params.arch.hidden_width, 16u);
}

TEST_F(CliTest, ManifestReplayReproducesCurveByteForByte) {
  const fs::path first = dir_ / "first", second = dir_ / "second";
  ASSERT_EQ(run({"--example", "fusincos", "--loss", "delta", "--steps", "6", "--batch", "300", "--record-every", "1",
                 "--seed", "9", "--out", first.string()}),
            kOk);
  ASSERT_EQ(run({"--from-manifest", (first / "manifest.json").string(), "--out", second.string()}), kOk) << err_.str();
  EXPECT_EQ(read_file(first / "curve.csv"), read_file(second / "curve.csv"));
  EXPECT_EQ(read_file(first / "params.ckpt"), read_file(second / "params.ckpt"));
  const auto a = nlohmann::json::parse(read_file(first / "summary.json"));
  const auto b = nlohmann::json::parse(read_file(second / "summary.json"));
  EXPECT_EQ(a.at("manifest_hash"), b.at("manifest_hash"));
}

TEST_F(CliTest, LinearFixtureHasNoRelativeError) {
  ASSERT_EQ(run({"--example", "linear", "--steps", "3", "--out", dir_.string()}), kOk);
  const auto summary = nlohmann::json::parse(read_file(dir_ / "summary.json"));
  EXPECT_TRUE(summary.at("relative_error").is_null());
  std::istringstream curve(read_file(dir_ / "curve.csv"));
  std::string line;
  std::getline(curve, line);
  std::getline(curve, line);
  EXPECT_EQ(line.back(), ',');
}

TEST(ResolveRun, OverridesOnlyWhatIsGiven) {
  Overrides o;
  o.lr = 0.01;
  o.steps = 7;
  const RunSpec run = resolve_run(ProblemId::longsin, LossKind::exp_decay, o);
  EXPECT_EQ(run.train.lr, 0.01);
  EXPECT_EQ(run.train.max_steps, 7u);
  EXPECT_EQ(run.train.batch_size, 1024u);
  EXPECT_EQ(run.train.intervals, 50u);
  EXPECT_EQ(run.train.record_every, 10u);
  EXPECT_EQ(run.train.loss.gamma, 0.05);
  EXPECT_EQ(resolve_run(ProblemId::lq5, LossKind::delta, {}).train.max_steps, 2000u);
}

TEST(ConfigJson, RoundTrips) {
  Overrides o;
  o.gamma = 0.3;
  o.seed = 12;
  RunSpec run = resolve_run(ProblemId::lq100, LossKind::exp_decay, o);
  run.dump_paths = 4;
  const RunSpec back = run_from_config_json(config_json(run));
  EXPECT_EQ(config_json(back), config_json(run));
  EXPECT_EQ(manifest_hash(back, builtin_problem(ProblemId::lq100)), manifest_hash(run, builtin_problem(ProblemId::lq100)));
}

TEST(PathsCsv, WideZColumnsAreSeparated) {
  EXPECT_EQ(z_column(1, 2, 1, 4), "Z_12");
  EXPECT_EQ(z_column(12, 1, 100, 1), "Z_12_1");
}

TEST(Table2, CoversTwelveCells) {
  const auto cells = table2_cells();
  EXPECT_EQ(cells.size(), 12u);
  EXPECT_EQ(suite_steps(ProblemId::lq100), 4000u);
  EXPECT_EQ(suite_steps(ProblemId::fusincos), 2000u);
}

}  // namespace
}  // namespace fbsde::cli
