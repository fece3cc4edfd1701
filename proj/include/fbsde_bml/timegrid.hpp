#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace fbsde {

/// Equidistant nodes t_i = i*T/N, i = 0..N.
class TimeGrid {
 public:
  TimeGrid(double horizon, std::size_t intervals) : horizon_(horizon), intervals_(intervals) {
    if (!(horizon > 0.0)) throw std::invalid_argument("TimeGrid: horizon must be positive");
    if (intervals == 0) throw std::invalid_argument("TimeGrid: interval count must be positive");
    nodes_.reserve(intervals + 1);
    for (std::size_t i = 0; i < intervals; ++i) {
      nodes_.push_back(static_cast<double>(i) * horizon / static_cast<double>(intervals));
    }
    nodes_.push_back(horizon);
  }

  double horizon() const noexcept { return horizon_; }
  std::size_t intervals() const noexcept { return intervals_; }
  double step() const noexcept { return horizon_ / static_cast<double>(intervals_); }
  double operator[](std::size_t i) const { return nodes_[i]; }
  const std::vector<double>& nodes() const noexcept { return nodes_; }

  friend bool operator==(const TimeGrid& a, const TimeGrid& b) {
    return a.horizon_ == b.horizon_ && a.intervals_ == b.intervals_;
  }

 private:
  double horizon_;
  std::size_t intervals_;
  std::vector<double> nodes_;
};

inline TimeGrid make_grid(double horizon, std::size_t intervals) { return TimeGrid(horizon, intervals); }

}  // namespace fbsde
