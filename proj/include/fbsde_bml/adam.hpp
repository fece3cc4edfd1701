#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "fbsde_bml/errors.hpp"

namespace fbsde {

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  explicit AdamState(std::size_t size = 0)
      : first_moment(size, 0.0), second_moment(size, 0.0) {}
};

/// One bias-corrected Adam update of `theta` in place.
/// Rejects non-finite gradients before touching any state.
inline void adam_step(std::span<double> theta, std::span<const double> grad, AdamState& state, double lr) {
  if (theta.size() != grad.size() || theta.size() != state.first_moment.size() ||
      theta.size() != state.second_moment.size()) {
    throw ShapeError("adam_step: parameter, gradient and state sizes differ");
  }
  for (std::size_t k = 0; k < grad.size(); ++k) {
    if (!std::isfinite(grad[k])) throw DivergenceError("adam_step: non-finite gradient", state.step_count + 1);
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < theta.size(); ++k) {
    double& m = state.first_moment[k];
    double& v = state.second_moment[k];
    m = state.beta1 * m + (1.0 - state.beta1) * grad[k];
    v = state.beta2 * v + (1.0 - state.beta2) * grad[k] * grad[k];
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    theta[k] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

}  // namespace fbsde
