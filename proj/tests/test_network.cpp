#include <cmath>
#include <cstdio>
#include <filesystem>

#include <gtest/gtest.h>

#include "fbsde_bml/network.hpp"

namespace fbsde {
namespace {

NetworkArch small_arch() { return NetworkArch{2, 2, 8, 1, 1, Activation::tanh}; }

TEST(Network, ParameterCountOfTwoByEightPair) {
  // v: 2->8 (16 weights + 8 biases), 8->8 (64 + 8), 8->1 (8 + 1) = 105; u identical.
  const std::size_t per_net = (16 + 8) + (64 + 8) + (8 + 1);
  EXPECT_EQ(parameter_count(small_arch()), 2 * per_net);
  EXPECT_EQ(init_network(small_arch(), 1).param_count(), 210u);
}

TEST(Network, ParameterCountSumsFanInPlusOneTimesFanOut) {
  const NetworkArch arch = NetworkArch::for_problem(4, 1, 4, 3, 32);
  std::size_t expected = 0;
  for (std::size_t out : {std::size_t{1}, std::size_t{4}}) {
    expected += (5 + 1) * 32 + 2 * (32 + 1) * 32 + (32 + 1) * out;
  }
  EXPECT_EQ(parameter_count(arch), expected);
}

TEST(Network, InitIsDeterministicWithZeroBiasesAndBoundedWeights) {
  const NetworkArch arch = NetworkArch::for_problem(5, 5, 1, 2, 16);
  const NetworkParams a = init_network(arch, 42);
  const NetworkParams b = init_network(arch, 42);
  const NetworkParams c = init_network(arch, 43);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_NE(a.theta, c.theta);
  for (const LayerSlot& s : layer_layout(arch)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
    for (std::size_t k = 0; k < s.fan_in * s.fan_out; ++k) EXPECT_LE(std::abs(a.theta[s.weight_offset + k]), bound);
    for (std::size_t k = 0; k < s.fan_out; ++k) EXPECT_EQ(a.theta[s.bias_offset + k], 0.0);
  }
}

TEST(Network, ZeroWeightsGiveZeroOutput) {
  NetworkParams p = init_network(NetworkArch::for_problem(3, 2, 2, 2, 8), 0);
  std::fill(p.theta.begin(), p.theta.end(), 0.0);
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(3, 0.7);
  EXPECT_TRUE(forward_v(p, 0.3, x).isZero(0.0));
  EXPECT_TRUE(forward_u(p, 0.3, x).isZero(0.0));
}

TEST(Network, OutputsStayFiniteForLargeInputs) {
  const NetworkParams p = init_network(NetworkArch::for_problem(2, 1, 2, 3, 16), 5);
  for (double s : {-1e3, -10.0, 0.0, 10.0, 1e3}) {
    const Eigen::VectorXd x = Eigen::VectorXd::Constant(2, s);
    EXPECT_TRUE(forward_v(p, 1.0, x).allFinite());
    EXPECT_TRUE(forward_u(p, 1.0, x).allFinite());
  }
}

TEST(Network, LastLayerWeightActsLinearly) {
  const NetworkArch arch = small_arch();
  NetworkParams p = init_network(arch, 9);
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 0.4);
  const double t = 0.25;

  // Hidden activation feeding output weight j, computed by hand.
  const std::vector<LayerSlot> slots = layer_layout(arch);
  Eigen::VectorXd h(2);
  h << t, x(0);
  for (int l = 0; l < 2; ++l) {
    const LayerSlot& s = slots[static_cast<std::size_t>(l)];
    Eigen::VectorXd next(s.fan_out);
    for (std::size_t j = 0; j < s.fan_out; ++j) {
      double acc = p.theta[s.bias_offset + j];
      for (std::size_t i = 0; i < s.fan_in; ++i) acc += h(static_cast<Eigen::Index>(i)) * p.theta[s.weight_offset + j * s.fan_in + i];
      next(static_cast<Eigen::Index>(j)) = std::tanh(acc);
    }
    h = next;
  }
  const LayerSlot& out = slots[2];
  const double before = forward_v(p, t, x)(0);
  const double delta = 1e-3;
  const std::size_t j = 5;
  p.theta[out.weight_offset + j] += delta;
  const double after = forward_v(p, t, x)(0);
  EXPECT_NEAR(after - before, delta * h(static_cast<Eigen::Index>(j)), 1e-15);
}

TEST(Network, UOutputReshapesRowMajor) {
  const NetworkArch arch = NetworkArch::for_problem(1, 2, 3, 1, 4);
  const NetworkParams p = init_network(arch, 3);
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, -0.2);
  ad::Tape tape;
  const BoundNetworks nets(tape, p);
  const ad::Matrix flat = nets.u(0.5, tape.constant(x.transpose())).value();
  const Eigen::MatrixXd z = forward_u(p, 0.5, x);
  ASSERT_EQ(z.rows(), 2);
  ASSERT_EQ(z.cols(), 3);
  for (int i = 0; i < 2; ++i)
    for (int k = 0; k < 3; ++k) EXPECT_EQ(z(i, k), flat(0, i * 3 + k));
}

TEST(Network, ForwardIsPure) {
  const NetworkParams p = init_network(small_arch(), 4);
  const NetworkParams copy = p;
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 1.0);
  const double first = forward_v(p, 0.0, x)(0);
  EXPECT_EQ(forward_v(p, 0.0, x)(0), first);
  EXPECT_EQ(p.theta, copy.theta);
}

TEST(Network, RejectsWrongInputLength) {
  const NetworkParams p = init_network(small_arch(), 4);
  EXPECT_THROW(forward_v(p, 0.0, Eigen::VectorXd::Zero(2)), ShapeError);
}

TEST(Network, CheckpointRoundTripIsExact) {
  const NetworkParams p = init_network(NetworkArch::for_problem(4, 1, 4, 3, 32), 77);
  const auto path = std::filesystem::temp_directory_path() / "fbsde_bml_ckpt_test.txt";
  save_checkpoint(path.string(), Checkpoint{p, 77, 123});
  const Checkpoint back = load_checkpoint(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(back.params.arch, p.arch);
  EXPECT_EQ(back.params.theta, p.theta);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.step, 123u);
}

}  // namespace
}  // namespace fbsde
