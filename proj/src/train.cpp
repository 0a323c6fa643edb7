#include "mvss/train.hpp"

#include <cmath>
#include <sstream>

namespace mvss {

template <typename Scalar>
std::pair<double, VectorX<Scalar>> score_matching_loss(const MlpDenoiserT<Scalar>& model,
                                                       const MatrixXd& batch_x0,
                                                       const NoiseSchedule& schedule,
                                                       const TimeSampler& time_sampler, Rng& rng) {
  check_arg(batch_x0.rows() > 0, "score_matching_loss: empty batch");
  check_arg(batch_x0.cols() == model.dim(), "score_matching_loss: dimension mismatch");
  const Eigen::Index n = batch_x0.rows();
  const int d = model.dim();

  VectorXd sigma(n);
  MatrixXd xt(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = time_sampler.sample(rng);
    sigma[i] = schedule.sigma(t);
    for (int j = 0; j < d; ++j) xt(i, j) = batch_x0(i, j) + sigma[i] * rng.normal();
  }

  typename MlpDenoiserT<Scalar>::Workspace ws;
  model.forward(xt.cast<Scalar>(), sigma.cast<Scalar>(), ws);
  VectorX<Scalar> grad = VectorX<Scalar>::Zero(model.parameter_count());
  double loss = model.weighted_loss_and_grad(ws, batch_x0.cast<Scalar>(), &grad);
  loss /= static_cast<double>(n);
  grad *= static_cast<Scalar>(1.0 / static_cast<double>(n));
  return {loss, std::move(grad)};
}

template <typename Scalar>
double train_lap(TrainState<Scalar>& state, MlpDenoiserT<Scalar>& model, const MatrixXd& samples,
                 Rng& rng) {
  const TrainingConfig& cfg = state.config;
  check_arg(samples.rows() > 0, "train_lap: empty sample set");
  check_arg(samples.cols() == model.dim(), "train_lap: dimension mismatch");
  const Eigen::Index n = samples.rows();
  const int d = model.dim();

  const double rms = std::sqrt(samples.array().square().mean());
  model.set_sigma_data(std::max(rms, 1e-8));

  const TimeSampler time_sampler;
  const NoiseSchedule& schedule = model.schedule();

  double loss = 0.0;
  VectorX<Scalar> grad(model.parameter_count());
  MatrixXd x0(cfg.batch_size, d);
  VectorXd sigma(cfg.batch_size);
  MatrixXd xt(cfg.batch_size, d);

  for (int step = 0; step < cfg.steps_per_lap; ++step) {
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Eigen::Index idx = static_cast<Eigen::Index>(rng.uniform() * double(n));
      x0.row(b) = samples.row(std::min(idx, n - 1));
      const double t = time_sampler.sample(rng);
      sigma[b] = schedule.sigma(t);
      for (int j = 0; j < d; ++j) xt(b, j) = x0(b, j) + sigma[b] * rng.normal();
    }

    // Chunked forward/backward with ordered reduction (deterministic under
    // any thread count).
    const int chunk = cfg.chunk;
    const Eigen::Index n_chunks = (cfg.batch_size + chunk - 1) / chunk;
    std::vector<double> chunk_loss(n_chunks, 0.0);
    std::vector<VectorX<Scalar>> chunk_grad(n_chunks);
    parallel_for_chunks(cfg.batch_size, chunk, cfg.threads,
                        [&](std::int64_t begin, std::int64_t end) {
                          const Eigen::Index c = begin / chunk;
                          const Eigen::Index rows = end - begin;
                          typename MlpDenoiserT<Scalar>::Workspace ws;
                          model.forward(xt.middleRows(begin, rows).cast<Scalar>(),
                                        sigma.segment(begin, rows).cast<Scalar>(), ws);
                          chunk_grad[c].setZero(model.parameter_count());
                          chunk_loss[c] = model.weighted_loss_and_grad(
                              ws, x0.middleRows(begin, rows).cast<Scalar>(), &chunk_grad[c]);
                        });
    grad.setZero();
    loss = 0.0;
    for (Eigen::Index c = 0; c < n_chunks; ++c) {
      grad += chunk_grad[c];
      loss += chunk_loss[c];
    }
    grad *= static_cast<Scalar>(1.0 / double(cfg.batch_size));
    loss /= double(cfg.batch_size);

    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "train_lap: non-finite loss at step " << step << " (lr="
          << state.learning_rate(state.step) << ")";
      throw SolverError(msg.str());
    }
    clip_gradient_norm(grad, cfg.clip_norm);
    state.apply_gradient(model.parameters(), grad);
  }
  return loss;
}

GaussianDenoiser fit_gaussian(const MatrixXd& samples) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  check_arg(n >= d + 1, "fit_gaussian: needs at least d+1 samples");
  const VectorXd mean = samples.colwise().mean().transpose();
  MatrixXd centered = samples.rowwise() - mean.transpose();
  MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  const double jitter = 1e-6 * cov.trace() / static_cast<double>(d);
  cov.diagonal().array() += jitter;
  return GaussianDenoiser(mean, cov);
}

template std::pair<double, VectorX<double>> score_matching_loss<double>(
    const MlpDenoiserT<double>&, const MatrixXd&, const NoiseSchedule&, const TimeSampler&, Rng&);
template std::pair<double, VectorX<float>> score_matching_loss<float>(
    const MlpDenoiserT<float>&, const MatrixXd&, const NoiseSchedule&, const TimeSampler&, Rng&);
template double train_lap<double>(TrainState<double>&, MlpDenoiserT<double>&, const MatrixXd&,
                                  Rng&);
template double train_lap<float>(TrainState<float>&, MlpDenoiserT<float>&, const MatrixXd&, Rng&);
template struct TrainState<double>;
template struct TrainState<float>;

}  // namespace mvss
