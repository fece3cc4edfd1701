#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "fbsde_bml/timegrid.hpp"

namespace fbsde {

/// SplitMix64 output function.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent sub-seed from (seed, index). Used for per-path and
/// per-training-step streams so that no stream depends on another's consumption.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  return mix64(mix64(seed ^ 0x6a09e667f3bcc909ULL) + mix64(index + 0x9e3779b97f4a7c15ULL));
}

/// SplitMix64 stream. Satisfies UniformRandomBitGenerator.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t state) noexcept : state_(state) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

/// Standard normal draws by the Box-Muller transform; caches the second variate.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) noexcept : bits_(seed) {}

  double operator()() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - bits_.uniform();  // (0, 1]
    const double u2 = bits_.uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  SplitMix64 bits_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// M sampled Brownian paths on a grid. Values are stored path-major, then
/// node-major within a path: index (r, i, k) -> (r*(N+1) + i)*d + k.
class BrownianBatch {
 public:
  BrownianBatch(TimeGrid grid, std::size_t paths, std::size_t dim, std::uint64_t seed)
      : grid_(std::move(grid)), paths_(paths), dim_(dim), seed_(seed),
        values_(paths * (grid_.intervals() + 1) * dim, 0.0) {}

  const TimeGrid& grid() const noexcept { return grid_; }
  std::size_t paths() const noexcept { return paths_; }
  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::vector<double>& values() const noexcept { return values_; }

  double operator()(std::size_t path, std::size_t node, std::size_t k) const {
    return values_[index(path, node, k)];
  }

  /// Increments W_{t_{i+1}} - W_{t_i} for paths [first, first+count) as a count x d matrix.
  Eigen::MatrixXd increments(std::size_t node, std::size_t first, std::size_t count) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim_));
    for (std::size_t r = 0; r < count; ++r) {
      for (std::size_t k = 0; k < dim_; ++k) {
        out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) =
            (*this)(first + r, node + 1, k) - (*this)(first + r, node, k);
      }
    }
    return out;
  }

  /// W_{t_i} for paths [first, first+count) as a count x d matrix.
  Eigen::MatrixXd at_node(std::size_t node, std::size_t first, std::size_t count) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim_));
    for (std::size_t r = 0; r < count; ++r) {
      for (std::size_t k = 0; k < dim_; ++k) {
        out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = (*this)(first + r, node, k);
      }
    }
    return out;
  }

  double& mutable_value(std::size_t path, std::size_t node, std::size_t k) {
    return values_[index(path, node, k)];
  }

 private:
  std::size_t index(std::size_t path, std::size_t node, std::size_t k) const noexcept {
    return (path * (grid_.intervals() + 1) + node) * dim_ + k;
  }

  TimeGrid grid_;
  std::size_t paths_;
  std::size_t dim_;
  std::uint64_t seed_;
  std::vector<double> values_;
};

/// Samples M paths of d-dimensional standard Brownian motion on the grid.
/// Path r draws from its own stream keyed by derive_seed(seed, r), so the
/// result is a pure function of (grid, M, d, seed) in any evaluation order.
inline BrownianBatch sample_brownian(const TimeGrid& grid, std::size_t paths, std::size_t dim,
                                     std::uint64_t seed) {
  if (paths == 0) throw std::invalid_argument("sample_brownian: path count must be positive");
  if (dim == 0) throw std::invalid_argument("sample_brownian: dimension must be positive");
  BrownianBatch batch(grid, paths, dim, seed);
  const double scale = std::sqrt(grid.step());
  for (std::size_t r = 0; r < paths; ++r) {
    NormalSampler normal(derive_seed(seed, r));
    for (std::size_t i = 0; i < grid.intervals(); ++i) {
      for (std::size_t k = 0; k < dim; ++k) {
        batch.mutable_value(r, i + 1, k) = batch(r, i, k) + scale * normal();
      }
    }
  }
  return batch;
}

}  // namespace fbsde
