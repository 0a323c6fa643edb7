#pragma once

#include "mvss/sampler.hpp"

namespace mvss {

struct GibbsConfig {
  int gibbs_rounds = 64;
  SamplerConfig inner;  // per-source sampler budget (fewer PC steps)

  void validate() const {
    check_arg(gibbs_rounds >= 1, "GibbsConfig: gibbs_rounds must be >= 1");
    inner.validate();
  }
};

// y - sum_{b != hold_out} A^{ab} x^b, the observation seen by the held-out
// source once the others are fixed.
VectorXd gibbs_residual(const Observation& obs, std::span<const VectorXd> sources, int hold_out);

/* Cyclic Gibbs sweep: for each round and each source in order 1..Ns,
   resample that source from a single-source posterior against the residual
   of the others. Each inner chain starts from fresh t=1 noise. */
std::vector<VectorXd> gibbs_sample(const Observation& obs,
                                   std::span<const Denoiser* const> models,
                                   std::span<const VectorXd> init_sources,
                                   const NoiseSchedule& schedule, const GibbsConfig& config,
                                   Rng& rng);

// Batched variant over a block of observations (lockstep inner chains).
BatchSampleResult gibbs_sample_batch(std::span<const Observation> obs,
                                     std::span<const Denoiser* const> models,
                                     std::span<const MatrixXd> init_sources,
                                     const NoiseSchedule& schedule, const GibbsConfig& config,
                                     const std::function<Rng(std::int64_t)>& stream_for,
                                     const BatchOptions& options = {});

}  // namespace mvss
