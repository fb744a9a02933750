#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>

namespace phylosmc {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Raised when a computation leaves the finite domain (all-zero weights,
// non-finite gradients, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double log_sum_exp(std::span<const double> xs) {
  double hi = kNegInf;
  for (double x : xs) hi = std::max(hi, x);
  if (hi == kNegInf) return kNegInf;
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

inline double log_mean_exp(std::span<const double> xs) {
  return log_sum_exp(xs) - std::log(static_cast<double>(xs.size()));
}

// Normalized probabilities exp(x_i - logsumexp(x)).
inline void softmax_into(std::span<const double> xs, std::span<double> out) {
  double lse = log_sum_exp(xs);
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = std::exp(xs[i] - lse);
}

// Effective sample size (sum w)^2 / sum w^2 from log-weights.
inline double ess_from_log(std::span<const double> log_weights) {
  if (log_weights.empty()) throw NumericalError("ess: no weights");
  double hi = kNegInf;
  for (double x : log_weights) hi = std::max(hi, x);
  if (hi == kNegInf) throw NumericalError("ess: all weights are zero");
  double s1 = 0.0, s2 = 0.0;
  for (double x : log_weights) {
    double w = std::exp(x - hi);
    s1 += w;
    s2 += w * w;
  }
  return s1 * s1 / s2;
}

}  // namespace phylosmc
