#include "mvss/gibbs.hpp"

#include <sstream>

namespace mvss {

VectorXd gibbs_residual(const Observation& obs, std::span<const VectorXd> sources, int hold_out) {
  check_arg(sources.size() == obs.mixing.size(), "gibbs_residual: one block per source required");
  check_arg(hold_out >= 0 && hold_out < static_cast<int>(sources.size()),
            "gibbs_residual: hold_out out of range");
  VectorXd r = obs.y;
  for (std::size_t b = 0; b < sources.size(); ++b) {
    if (static_cast<int>(b) == hold_out) continue;
    check_arg(sources[b].size() == obs.mixing[b].cols(), "gibbs_residual: block size mismatch");
    r.noalias() -= obs.mixing[b] * sources[b];
  }
  return r;
}

BatchSampleResult gibbs_sample_batch(std::span<const Observation> obs,
                                     std::span<const Denoiser* const> models,
                                     std::span<const MatrixXd> init_sources,
                                     const NoiseSchedule& schedule, const GibbsConfig& config,
                                     const std::function<Rng(std::int64_t)>& stream_for,
                                     const BatchOptions& options) {
  config.validate();
  check_arg(!obs.empty(), "gibbs_sample_batch: empty batch");
  check_arg(init_sources.size() == models.size(), "gibbs_sample_batch: init block count mismatch");
  const Eigen::Index b_rows = static_cast<Eigen::Index>(obs.size());
  const int n_sources = static_cast<int>(models.size());
  for (const auto& o : obs) o.validate(models);
  for (int s = 0; s < n_sources; ++s) {
    check_arg(init_sources[s].rows() == b_rows && init_sources[s].cols() == models[s]->dim(),
              "gibbs_sample_batch: init source shape mismatch");
  }

  BatchSampleResult result;
  result.ok.assign(b_rows, 1);
  result.fail_step.assign(b_rows, -1);
  result.sources.assign(init_sources.begin(), init_sources.end());

  for (int round = 0; round < config.gibbs_rounds; ++round) {
    for (int held = 0; held < n_sources; ++held) {
      // Residual view for the held-out source.
      std::vector<Observation> residual_obs(b_rows);
      for (Eigen::Index i = 0; i < b_rows; ++i) {
        Observation& ro = residual_obs[i];
        ro.y = obs[i].y;
        for (int b = 0; b < n_sources; ++b) {
          if (b == held) continue;
          ro.y.noalias() -= obs[i].mixing[b] * result.sources[b].row(i).transpose();
        }
        ro.mixing = {obs[i].mixing[held]};
        ro.noise_cov = obs[i].noise_cov;
        ro.view_id = obs[i].view_id;
        ro.sample_id = obs[i].sample_id;
      }

      const Denoiser* held_model[1] = {models[held]};
      auto inner_stream = [&](std::int64_t i) {
        return stream_for(i).substream({0x67626273u, static_cast<std::uint64_t>(round),
                                        static_cast<std::uint64_t>(held)});
      };
      BatchOptions inner_options = options;
      inner_options.diag_round = round;
      inner_options.diag_hold_out = held;
      auto inner = pc_sample_posterior_batch(residual_obs, held_model, schedule, config.inner,
                                             inner_stream, inner_options);
      result.cg_iterations += inner.cg_iterations;
      result.cg_retries += inner.cg_retries;
      for (Eigen::Index i = 0; i < b_rows; ++i) {
        if (!inner.ok[i] && result.ok[i]) {
          result.ok[i] = 0;
          result.fail_step[i] = round * n_sources + held;
        }
        if (inner.ok[i]) result.sources[held].row(i) = inner.sources[0].row(i);
      }
    }
  }
  for (Eigen::Index i = 0; i < b_rows; ++i)
    if (!result.ok[i]) ++result.failures;
  return result;
}

std::vector<VectorXd> gibbs_sample(const Observation& obs,
                                   std::span<const Denoiser* const> models,
                                   std::span<const VectorXd> init_sources,
                                   const NoiseSchedule& schedule, const GibbsConfig& config,
                                   Rng& rng) {
  check_arg(init_sources.size() == models.size(), "gibbs_sample: init block count mismatch");
  std::vector<MatrixXd> init(models.size());
  for (std::size_t s = 0; s < models.size(); ++s) init[s] = init_sources[s].transpose();
  const std::uint64_t sub = rng.raw();
  auto stream_for = [&](std::int64_t) { return Rng(sub); };
  auto result = gibbs_sample_batch({&obs, 1}, models, init, schedule, config, stream_for);
  if (!result.ok[0]) {
    const int n = static_cast<int>(models.size());
    std::ostringstream msg;
    msg << "gibbs_sample: inner sampler failed at round " << result.fail_step[0] / n
        << ", source " << result.fail_step[0] % n << " (view " << obs.view_id << ", sample "
        << obs.sample_id << ")";
    throw SolverError(msg.str());
  }
  std::vector<VectorXd> out(models.size());
  for (std::size_t s = 0; s < models.size(); ++s) out[s] = result.sources[s].row(0).transpose();
  return out;
}

}  // namespace mvss
