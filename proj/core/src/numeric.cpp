#include "crsim/numeric.hpp"
#include "crsim/rng.hpp"

#include <cmath>

namespace crsim {

double log_normal_cdf(double x) {
  if (x > -30.0) return safe_log(normal_cdf(x));
  // Asymptotic expansion of the Mills ratio.
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
  const double value = -0.5 * x2 - std::log(-x) - 0.5 * std::log(2.0 * M_PI) + std::log(series);
  return value < kLogZeroFloor ? kLogZeroFloor : value;
}

double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace crsim
