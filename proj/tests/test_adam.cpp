#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "fbsde_bml/adam.hpp"

namespace fbsde {
namespace {

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<double> theta{0.5, -1.0, 2.0};
  const std::vector<double> before = theta;
  AdamState state(3);
  adam_step(theta, std::vector<double>(3, 0.0), state, 0.01);
  EXPECT_EQ(theta, before);
  EXPECT_EQ(state.step_count, 1u);
}

TEST(Adam, ConstantGradientMovesByLearningRatePerStep) {
  // With a constant gradient g the bias-corrected moments are exactly g and g^2,
  // so each step moves by lr * |g| / (|g| + eps).
  const double lr = 1e-3;
  const std::vector<double> grad{0.3, -2.0, 1e-4};
  std::vector<double> theta{0.0, 0.0, 0.0};
  AdamState state(3);
  for (int step = 0; step < 500; ++step) {
    const std::vector<double> before = theta;
    adam_step(theta, grad, state, lr);
    for (std::size_t k = 0; k < grad.size(); ++k) {
      const double expected = -lr * grad[k] / (std::abs(grad[k]) + state.epsilon);
      EXPECT_NEAR(theta[k] - before[k], expected, 1e-12 * lr);
    }
  }
  EXPECT_EQ(state.step_count, 500u);
}

TEST(Adam, ZeroLearningRateStillAdvancesState) {
  std::vector<double> theta{1.0, 2.0};
  AdamState state(2);
  adam_step(theta, std::vector<double>{0.5, -0.5}, state, 0.0);
  EXPECT_EQ(theta, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(state.step_count, 1u);
  EXPECT_NE(state.first_moment[0], 0.0);
}

TEST(Adam, MatchesHandComputedFirstTwoSteps) {
  std::vector<double> theta{1.0};
  AdamState state(1);
  adam_step(theta, std::vector<double>{2.0}, state, 0.1);
  // m = 0.2, v = 0.004; m_hat = 2, v_hat = 4.
  EXPECT_NEAR(theta[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  adam_step(theta, std::vector<double>{-1.0}, state, 0.1);
  const double m = 0.9 * 0.2 + 0.1 * -1.0;
  const double v = 0.999 * 0.004 + 0.001 * 1.0;
  const double m_hat = m / (1.0 - 0.81);
  const double v_hat = v / (1.0 - 0.999 * 0.999);
  EXPECT_NEAR(theta[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8) - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-14);
}

TEST(Adam, RejectsShapeMismatch) {
  std::vector<double> theta{1.0, 2.0};
  AdamState state(2);
  EXPECT_THROW(adam_step(theta, std::vector<double>{1.0}, state, 0.1), ShapeError);
  AdamState wrong(3);
  EXPECT_THROW(adam_step(theta, std::vector<double>{1.0, 1.0}, wrong, 0.1), ShapeError);
}

TEST(Adam, NonFiniteGradientSignalsDivergenceWithoutSideEffects) {
  std::vector<double> theta{1.0, 2.0};
  AdamState state(2);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adam_step(theta, std::vector<double>{0.1, nan}, state, 0.1), DivergenceError);
  EXPECT_EQ(theta, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(state.step_count, 0u);
  EXPECT_EQ(state.first_moment[0], 0.0);
}

}  // namespace
}  // namespace fbsde
