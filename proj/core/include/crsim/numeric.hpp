#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace crsim {

using Vec = Eigen::VectorXd;
/// Row-major sample/embedding matrix: one row per vector.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Floor applied to log-probabilities so that impossible events stay finite.
inline constexpr double kLogZeroFloor = -1e12;

/// Standard normal CDF through erfc; absolute error well below 1e-10.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / M_SQRT2); }

inline double safe_log(double p) {
  if (!(p > 0.0)) return kLogZeroFloor;
  double l = std::log(p);
  return l < kLogZeroFloor ? kLogZeroFloor : l;
}

/// log Phi(x), accurate in the far left tail where Phi underflows.
double log_normal_cdf(double x);

/// Index of the maximum element; lowest index wins ties.
inline std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace crsim
