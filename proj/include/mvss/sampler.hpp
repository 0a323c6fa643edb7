#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mvss/denoiser.hpp"
#include "mvss/rng.hpp"
#include "mvss/sde.hpp"

namespace mvss {

/* One view sample: y = sum_beta A^{ab} x^b + eta, eta ~ N(0, noise_cov),
   with one known mixing matrix per source. */
struct Observation {
  VectorXd y;
  std::vector<MatrixXd> mixing;  // per source, rows(y) x d_beta
  MatrixXd noise_cov;            // rows(y) x rows(y), symmetric PSD
  int view_id = 0;
  std::int64_t sample_id = 0;

  static Observation isotropic(VectorXd y, std::vector<MatrixXd> mixing, double noise_var,
                               int view_id = 0, std::int64_t sample_id = 0);
  void validate(std::span<const Denoiser* const> models) const;
  Eigen::Index obs_dim() const { return y.size(); }
};

// Concatenated diffusion state u_t = [x^1_t, ..., x^{Ns}_t] at time t.
struct JointState {
  std::vector<VectorXd> x;
  double t = 1.0;
  double sigma = 1.0;
};

struct SamplerConfig {
  int pc_steps = 256;
  int corrections_per_step = 1;
  double tau = 0.1;  // Langevin signal-to-noise scale
  int cg_max_iters = 100;
  double cg_tolerance = 1e-10;  // relative residual target
  double cg_regularization = 0.0;
  double cg_denominator_min = 0.0;
  // When set: solve plain first, re-solve with the regularization knobs if
  // the relative residual exceeds this threshold.
  std::optional<double> cg_error_threshold;

  void validate() const {
    check_arg(pc_steps >= 1, "SamplerConfig: pc_steps must be >= 1");
    check_arg(corrections_per_step >= 0, "SamplerConfig: corrections_per_step must be >= 0");
    check_arg(tau > 0.0, "SamplerConfig: tau must be positive");
    check_arg(cg_max_iters >= 1 && cg_tolerance > 0.0, "SamplerConfig: bad CG settings");
    check_arg(cg_regularization >= 0.0 && cg_denominator_min >= 0.0,
              "SamplerConfig: CG knobs must be non-negative");
  }
};

struct CgResult {
  VectorXd x;
  int iterations = 0;
  double residual_norm = 0.0;  // relative to |rhs|
  bool converged = false;
};

/* Plain conjugate gradient on op(x) + cg_regularization x = rhs. Step
   denominators p^T A p are clamped from below by cg_denominator_min when it
   is positive. Non-finite values raise SolverError. */
CgResult conjugate_gradient(const std::function<VectorXd(const VectorXd&)>& op,
                            const VectorXd& rhs, const SamplerConfig& config);

// Sum of per-source Tweedie scores, stacked into the joint vector.
VectorXd joint_prior_score(std::span<const Denoiser* const> models, const JointState& state);

/* Matrix-vector product of the Gaussianized likelihood covariance,
     v -> noise_cov v + sum_b A^{ab} (sigma^2 vjp_b((A^{ab})^T v)),
   evaluated matrix-free via one vector-Jacobian product per source. */
VectorXd apply_likelihood_operator(const Observation& obs,
                                   std::span<const Denoiser* const> models,
                                   const JointState& state, const VectorXd& v);

struct CgStepInfo {
  int iterations = 0;
  double residual = 0.0;
  bool retried = false;
};

/* Likelihood score: solve (noise_cov + sum_b A V_b A^T) w = y - sum_b A E_b
   by matrix-free CG and return the stacked blocks vjp_b((A^{ab})^T w). The
   gradient of the variance term is ignored. */
VectorXd joint_likelihood_score(const Observation& obs, std::span<const Denoiser* const> models,
                                const JointState& state, const SamplerConfig& config,
                                CgStepInfo* info = nullptr);

// Reverse-SDE predictor-corrector draw from the joint posterior; returns the
// per-source t=0 blocks.
std::vector<VectorXd> pc_sample_posterior(const Observation& obs,
                                          std::span<const Denoiser* const> models,
                                          const NoiseSchedule& schedule,
                                          const SamplerConfig& config, Rng& rng);

// Unconditional reverse-SDE draw from one learned prior.
VectorXd pc_sample_prior(const Denoiser& model, const NoiseSchedule& schedule,
                         const SamplerConfig& config, Rng& rng);

/* ---- Batched lockstep engine -------------------------------------------
   All trajectories of a block advance on the shared uniform t-grid so the
   per-source denoiser calls become one batched evaluation per step. Noise
   is drawn from per-observation streams in a fixed order, making results
   independent of how observations are grouped into blocks. */

struct CgDiagnosticsRecord {
  int view_id = 0;
  std::int64_t sample_id = 0;
  int step = 0;
  int iterations = 0;
  double residual = 0.0;
  int round = -1;     // Gibbs round, -1 outside Gibbs
  int hold_out = -1;  // Gibbs hold-out source
};
using DiagnosticsSink = std::function<void(const CgDiagnosticsRecord&)>;

struct BatchOptions {
  bool use_likelihood = true;
  DiagnosticsSink* diagnostics = nullptr;
  int diag_round = -1;
  int diag_hold_out = -1;
};

struct BatchSampleResult {
  std::vector<MatrixXd> sources;     // per source, B x d_beta
  std::vector<std::uint8_t> ok;      // per trajectory
  std::vector<int> fail_step;        // -1 when ok
  std::int64_t cg_iterations = 0;
  std::int64_t cg_retries = 0;
  int failures = 0;
};

BatchSampleResult pc_sample_posterior_batch(std::span<const Observation> obs,
                                            std::span<const Denoiser* const> models,
                                            const NoiseSchedule& schedule,
                                            const SamplerConfig& config,
                                            const std::function<Rng(std::int64_t)>& stream_for,
                                            const BatchOptions& options = {});

MatrixXd pc_sample_prior_batch(const Denoiser& model, std::int64_t n,
                               const NoiseSchedule& schedule, const SamplerConfig& config,
                               const std::function<Rng(std::int64_t)>& stream_for);

}  // namespace mvss
