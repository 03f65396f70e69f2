#pragma once

// Step-count sampling and the uniform time partition for the weight-tied loop.

#include <cmath>
#include <random>
#include <vector>

#include "looprec/common.hpp"

namespace looprec {

// t_k = k / K for k = 0..K; endpoints are exactly 0 and 1.
inline std::vector<double> loop_partition(int k) {
  check(k >= 1, cat("loop_partition: k must be >= 1, got ", k));
  std::vector<double> t((size_t)k + 1);
  for (int i = 0; i <= k; ++i) t[(size_t)i] = (double)i / (double)k;
  return t;
}

// Draws K by sampling x ~ Beta(alpha, beta), scaling onto [k_min, k_max] and
// rounding half away from zero. beta == 1 uses the closed-form inverse CDF
// x = u^(1/alpha); otherwise the gamma-ratio construction.
class StepCountSampler {
 public:
  StepCountSampler(double alpha, double beta, int k_min, int k_max, uint64_t seed)
      : alpha_(alpha), beta_(beta), k_min_(k_min), k_max_(k_max), rng_(seed) {
    check(alpha > 0 && beta > 0, cat("step sampler: alpha/beta must be positive, got ", alpha,
                                     ", ", beta));
    check(k_min >= 1 && k_max >= k_min,
          cat("step sampler: need 1 <= k_min <= k_max, got ", k_min, ", ", k_max));
  }

  double sample_x() {
    if (beta_ == 1.0) {
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      return std::pow(u01(rng_), 1.0 / alpha_);
    }
    std::gamma_distribution<double> ga(alpha_, 1.0), gb(beta_, 1.0);
    double a = ga(rng_), b = gb(rng_);
    return a + b > 0 ? a / (a + b) : 0.0;
  }

  int sample_k() {
    double x = sample_x();
    long long k = std::llround(k_min_ + x * (k_max_ - k_min_));
    return (int)std::clamp(k, (long long)k_min_, (long long)k_max_);
  }

  int k_min() const { return k_min_; }
  int k_max() const { return k_max_; }

 private:
  double alpha_, beta_;
  int k_min_, k_max_;
  std::mt19937_64 rng_;
};

}  // namespace looprec
