#pragma once

#include <cmath>

#include "mvss/common.hpp"
#include "mvss/rng.hpp"

namespace mvss {

/* Variance-exploding forward diffusion with a log-linear noise level,
     sigma(t) = exp(log(sigma_min) + (log(sigma_max) - log(sigma_min)) t),
   t in [0,1]. The scale factor alpha_t is identically 1 and the marginal
   covariance is sigma(t)^2 I. */
class NoiseSchedule {
 public:
  NoiseSchedule(double sigma_min, double sigma_max)
      : sigma_min_(sigma_min), sigma_max_(sigma_max) {
    check_domain(sigma_min > 0.0 && sigma_max > 0.0, "NoiseSchedule: sigma bounds must be positive");
    check_domain(sigma_min < sigma_max, "NoiseSchedule: requires sigma_min < sigma_max");
    log_ratio_ = std::log(sigma_max_ / sigma_min_);
  }

  double sigma_min() const { return sigma_min_; }
  double sigma_max() const { return sigma_max_; }

  double sigma(double t) const {
    check_domain(t >= 0.0 && t <= 1.0, "NoiseSchedule::sigma: t outside [0,1]");
    return std::exp(std::log(sigma_min_) + log_ratio_ * t);
  }

  // g(t)^2 = d sigma(t)^2 / dt for the reverse SDE (drift f = 0).
  double g_squared(double t) const { return 2.0 * log_ratio_ * sigma(t) * sigma(t); }

  double log_ratio() const { return log_ratio_; }

 private:
  double sigma_min_;
  double sigma_max_;
  double log_ratio_;
};

// Training-time law for t. Defaults to Beta(3,3).
struct TimeSampler {
  double alpha = 3.0;
  double beta = 3.0;

  double sample(Rng& rng) const { return rng.beta(alpha, beta); }
};

inline VectorXd diffuse(const VectorXd& x0, double t, const NoiseSchedule& schedule, Rng& rng) {
  const double s = schedule.sigma(t);
  return x0 + s * rng.normal_vector(static_cast<int>(x0.size()));
}

// Tweedie's formula: grad log p(x_t) = (E[x0|x_t] - x_t) / sigma_t^2.
inline VectorXd score_from_denoiser(const VectorXd& x0hat, const VectorXd& xt, double sigma_t) {
  check_domain(sigma_t > 0.0, "score_from_denoiser: sigma_t must be positive");
  check_arg(x0hat.size() == xt.size(), "score_from_denoiser: size mismatch");
  return (x0hat - xt) / (sigma_t * sigma_t);
}

}  // namespace mvss
