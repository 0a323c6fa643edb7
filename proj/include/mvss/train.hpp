#pragma once

#include <utility>

#include "mvss/mlp.hpp"
#include "mvss/threading.hpp"

namespace mvss {

struct TrainingConfig {
  int steps_per_lap = 65536;
  int batch_size = 1024;
  double lr_initial = 1e-3;
  double lr_final = 1e-6;
  double clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int threads = 1;
  int chunk = 256;  // fixed reduction granularity, independent of thread count
};

/* Adam accumulators plus the linear learning-rate schedule for one EM lap.
   A fresh state is constructed at every lap boundary (optimizer and schedule
   restart while the model weights carry over). */
template <typename Scalar>
struct TrainState {
  VectorX<Scalar> m;
  VectorX<Scalar> v;
  std::int64_t step = 0;
  TrainingConfig config;

  explicit TrainState(Eigen::Index n_params, TrainingConfig cfg) : config(cfg) {
    m.setZero(n_params);
    v.setZero(n_params);
  }

  double learning_rate(std::int64_t k) const {
    if (config.steps_per_lap <= 1) return config.lr_initial;
    const double f = static_cast<double>(k) / static_cast<double>(config.steps_per_lap - 1);
    return config.lr_initial * (1.0 - f) + config.lr_final * f;
  }

  void apply_gradient(VectorX<Scalar>& params, const VectorX<Scalar>& grad) {
    ++step;
    const double lr = learning_rate(step - 1);
    const Scalar b1 = static_cast<Scalar>(config.adam_beta1);
    const Scalar b2 = static_cast<Scalar>(config.adam_beta2);
    m = b1 * m + (Scalar(1) - b1) * grad;
    v = (b2 * v.array() + (Scalar(1) - b2) * grad.array().square()).matrix();
    const double bc1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(step));
    const Scalar alpha = static_cast<Scalar>(lr / bc1);
    const Scalar denom_scale = static_cast<Scalar>(1.0 / std::sqrt(bc2));
    params.array() -=
        alpha * m.array() / ((v.array().sqrt() * denom_scale) + static_cast<Scalar>(config.adam_eps));
  }
};

// Scales grad in place to norm max_norm when it exceeds it; returns the
// pre-clip norm.
template <typename Scalar>
double clip_gradient_norm(VectorX<Scalar>& grad, double max_norm) {
  const double n = std::sqrt(static_cast<double>(grad.template cast<double>().squaredNorm()));
  if (n > max_norm && n > 0.0) grad *= static_cast<Scalar>(max_norm / n);
  return n;
}

/* Denoising score-matching objective on one batch: for each x0 draw
   t ~ TimeSampler, diffuse to x_t = x0 + sigma(t) eps, and accumulate
   lambda(t) |d(x_t,t) - x0|^2 with lambda = 1/c_out^2. Returns the mean
   loss and its exact parameter gradient. */
template <typename Scalar>
std::pair<double, VectorX<Scalar>> score_matching_loss(const MlpDenoiserT<Scalar>& model,
                                                       const MatrixXd& batch_x0,
                                                       const NoiseSchedule& schedule,
                                                       const TimeSampler& time_sampler, Rng& rng);

/* One M-step: steps_per_lap Adam updates on batches resampled from
   `samples`, with linear LR decay and global gradient-norm clipping.
   sigma_data is re-estimated from the sample RMS at entry. Aborts with
   SolverError on a non-finite loss. Returns the final mean batch loss. */
template <typename Scalar>
double train_lap(TrainState<Scalar>& state, MlpDenoiserT<Scalar>& model, const MatrixXd& samples,
                 Rng& rng);

// Empirical mean/covariance (1/n normalization) with relative diagonal
// jitter 1e-6 tr(cov)/d; requires at least d+1 samples.
GaussianDenoiser fit_gaussian(const MatrixXd& samples);

extern template struct TrainState<double>;
extern template struct TrainState<float>;

}  // namespace mvss
