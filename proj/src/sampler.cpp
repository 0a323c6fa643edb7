#include "mvss/sampler.hpp"

#include <cmath>
#include <sstream>

namespace mvss {

Observation Observation::isotropic(VectorXd y, std::vector<MatrixXd> mixing, double noise_var,
                                   int view_id, std::int64_t sample_id) {
  check_arg(noise_var > 0.0, "Observation: noise variance must be positive");
  Observation obs;
  obs.noise_cov = noise_var * MatrixXd::Identity(y.size(), y.size());
  obs.y = std::move(y);
  obs.mixing = std::move(mixing);
  obs.view_id = view_id;
  obs.sample_id = sample_id;
  return obs;
}

void Observation::validate(std::span<const Denoiser* const> models) const {
  check_arg(!mixing.empty() && mixing.size() == models.size(),
            "Observation: one mixing matrix per source required");
  for (std::size_t b = 0; b < mixing.size(); ++b) {
    check_arg(mixing[b].rows() == y.size(), "Observation: mixing row count mismatch");
    check_arg(mixing[b].cols() == models[b]->dim(), "Observation: mixing column/source mismatch");
  }
  check_arg(noise_cov.rows() == y.size() && noise_cov.cols() == y.size(),
            "Observation: noise covariance shape mismatch");
  check_arg((noise_cov - noise_cov.transpose()).cwiseAbs().maxCoeff() <=
                1e-9 * std::max(1.0, noise_cov.cwiseAbs().maxCoeff()),
            "Observation: noise covariance must be symmetric");
  check_arg(noise_cov.diagonal().minCoeff() > 0.0,
            "Observation: noise covariance needs a positive diagonal");
}

namespace {

void check_state(std::span<const Denoiser* const> models, const JointState& state) {
  check_arg(!models.empty(), "joint sampler: no models");
  check_arg(state.x.size() == models.size(), "JointState: one block per source required");
  for (std::size_t b = 0; b < models.size(); ++b)
    check_arg(state.x[b].size() == models[b]->dim(), "JointState: block dimension mismatch");
  check_domain(state.sigma > 0.0, "JointState: sigma must be positive");
}

std::vector<std::unique_ptr<DenoiseEval>> evaluate_all(std::span<const Denoiser* const> models,
                                                       const JointState& state) {
  std::vector<std::unique_ptr<DenoiseEval>> evals;
  evals.reserve(models.size());
  VectorXd sigma(1);
  sigma[0] = state.sigma;
  for (std::size_t b = 0; b < models.size(); ++b)
    evals.push_back(models[b]->evaluate(state.x[b].transpose(), sigma));
  return evals;
}

Eigen::Index total_dim(std::span<const Denoiser* const> models) {
  Eigen::Index n = 0;
  for (const auto* m : models) n += m->dim();
  return n;
}

}  // namespace

CgResult conjugate_gradient(const std::function<VectorXd(const VectorXd&)>& op,
                            const VectorXd& rhs, const SamplerConfig& config) {
  config.validate();
  CgResult result;
  result.x = VectorXd::Zero(rhs.size());
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) {
    result.converged = true;
    return result;
  }
  VectorXd r = rhs;
  VectorXd p = r;
  double rs = r.squaredNorm();
  const double target = config.cg_tolerance * rhs_norm;

  for (int k = 0; k < config.cg_max_iters; ++k) {
    VectorXd ap = op(p);
    if (config.cg_regularization > 0.0) ap += config.cg_regularization * p;
    double denom = p.dot(ap);
    if (!std::isfinite(denom)) throw SolverError("conjugate_gradient: non-finite denominator");
    if (config.cg_denominator_min > 0.0) denom = std::max(denom, config.cg_denominator_min);
    if (denom <= 0.0) break;  // lost positive-definiteness; return best iterate
    const double alpha = rs / denom;
    result.x += alpha * p;
    r -= alpha * ap;
    if (!r.allFinite()) throw SolverError("conjugate_gradient: non-finite residual");
    const double rs_new = r.squaredNorm();
    result.iterations = k + 1;
    if (std::sqrt(rs_new) <= target) {
      result.converged = true;
      rs = rs_new;
      break;
    }
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  result.residual_norm = r.norm() / rhs_norm;
  return result;
}

VectorXd joint_prior_score(std::span<const Denoiser* const> models, const JointState& state) {
  check_state(models, state);
  auto evals = evaluate_all(models, state);
  VectorXd score(total_dim(models));
  Eigen::Index at = 0;
  const double s2 = state.sigma * state.sigma;
  for (std::size_t b = 0; b < models.size(); ++b) {
    const Eigen::Index d = models[b]->dim();
    score.segment(at, d) = (evals[b]->value().row(0).transpose() - state.x[b]) / s2;
    at += d;
  }
  return score;
}

namespace {

// Shared core for the likelihood operator given precomputed evaluations.
VectorXd likelihood_operator_apply(const Observation& obs,
                                   std::span<const std::unique_ptr<DenoiseEval>> evals,
                                   double sigma, const VectorXd& v) {
  VectorXd out = obs.noise_cov * v;
  const double s2 = sigma * sigma;
  for (std::size_t b = 0; b < obs.mixing.size(); ++b) {
    const MatrixXd& a = obs.mixing[b];
    const VectorXd cot = a.transpose() * v;
    const VectorXd jv = evals[b]->vjp(cot.transpose()).row(0).transpose();
    out.noalias() += s2 * (a * jv);
  }
  return out;
}

}  // namespace

VectorXd apply_likelihood_operator(const Observation& obs,
                                   std::span<const Denoiser* const> models,
                                   const JointState& state, const VectorXd& v) {
  check_state(models, state);
  obs.validate(models);
  check_arg(v.size() == obs.y.size(), "apply_likelihood_operator: vector length mismatch");
  auto evals = evaluate_all(models, state);
  return likelihood_operator_apply(obs, evals, state.sigma, v);
}

VectorXd joint_likelihood_score(const Observation& obs, std::span<const Denoiser* const> models,
                                const JointState& state, const SamplerConfig& config,
                                CgStepInfo* info) {
  check_state(models, state);
  obs.validate(models);
  auto evals = evaluate_all(models, state);

  VectorXd residual = obs.y;
  for (std::size_t b = 0; b < models.size(); ++b)
    residual.noalias() -= obs.mixing[b] * evals[b]->value().row(0).transpose();

  auto op = [&](const VectorXd& v) { return likelihood_operator_apply(obs, evals, state.sigma, v); };

  SamplerConfig pass = config;
  const bool two_pass = config.cg_error_threshold.has_value();
  if (two_pass) {
    pass.cg_regularization = 0.0;
    pass.cg_denominator_min = 0.0;
  }
  CgResult cg;
  try {
    cg = conjugate_gradient(op, residual, pass);
  } catch (const SolverError& e) {
    std::ostringstream msg;
    msg << e.what() << " (view " << obs.view_id << ", sample " << obs.sample_id << ")";
    throw SolverError(msg.str());
  }
  bool retried = false;
  if (two_pass && cg.residual_norm > *config.cg_error_threshold) {
    retried = true;
    cg = conjugate_gradient(op, residual, config);
  }
  if (info != nullptr) {
    info->iterations = cg.iterations;
    info->residual = cg.residual_norm;
    info->retried = retried;
  }

  VectorXd score(total_dim(models));
  Eigen::Index at = 0;
  for (std::size_t b = 0; b < models.size(); ++b) {
    const Eigen::Index d = models[b]->dim();
    const VectorXd cot = obs.mixing[b].transpose() * cg.x;
    score.segment(at, d) = evals[b]->vjp(cot.transpose()).row(0).transpose();
    at += d;
  }
  return score;
}

/* ---- Batched engine ----------------------------------------------------- */

namespace {

struct BatchProblem {
  std::span<const Observation> obs;
  std::span<const Denoiser* const> models;
  std::vector<Eigen::Index> dims;
  Eigen::Index obs_dim = 0;
  bool use_likelihood = false;
};

struct ScoreWork {
  std::vector<MatrixXd> score;  // per source, B x d
  std::int64_t cg_iterations = 0;
  std::int64_t cg_retries = 0;
  std::vector<int> last_cg_iters;     // per row
  std::vector<double> last_cg_resid;  // per row
};

/* Batched CG over B independent d_alpha-sized systems sharing one set of
   denoiser evaluations. Rows freeze once converged. Returns W (B x d_alpha). */
MatrixXd batched_cg(const BatchProblem& pb,
                    std::span<const std::unique_ptr<DenoiseEval>> evals, double sigma,
                    const MatrixXd& rhs, const SamplerConfig& config, double reg, double dmin,
                    std::vector<std::uint8_t>& alive, ScoreWork& work) {
  const Eigen::Index b_rows = rhs.rows();
  const Eigen::Index da = rhs.cols();
  const double s2 = sigma * sigma;

  MatrixXd x = MatrixXd::Zero(b_rows, da);
  MatrixXd r = rhs;
  MatrixXd p = r;
  ArrayXd rs = r.rowwise().squaredNorm().array();
  ArrayXd rhs_norm2 = rs;
  ArrayXd target2 = (config.cg_tolerance * config.cg_tolerance) * rhs_norm2;

  std::vector<std::uint8_t> active(b_rows);
  for (Eigen::Index i = 0; i < b_rows; ++i)
    active[i] = alive[i] && rs[i] > target2[i] && rs[i] > 0.0;
  work.last_cg_iters.assign(b_rows, 0);

  MatrixXd ap(b_rows, da);
  std::vector<MatrixXd> cot(pb.models.size());
  for (int k = 0; k < config.cg_max_iters; ++k) {
    bool any = false;
    for (Eigen::Index i = 0; i < b_rows; ++i) any = any || active[i];
    if (!any) break;

    // ap = noise_cov p + sum_b sigma^2 A_b vjp_b(A_b^T p) (+ reg p)
    for (std::size_t s = 0; s < pb.models.size(); ++s) {
      cot[s].resize(b_rows, pb.dims[s]);
      for (Eigen::Index i = 0; i < b_rows; ++i)
        cot[s].row(i) = p.row(i) * pb.obs[i].mixing[s];
      cot[s] = evals[s]->vjp(cot[s]);
    }
    for (Eigen::Index i = 0; i < b_rows; ++i) {
      ap.row(i) = p.row(i) * pb.obs[i].noise_cov;  // noise_cov symmetric
      for (std::size_t s = 0; s < pb.models.size(); ++s)
        ap.row(i).noalias() += s2 * (cot[s].row(i) * pb.obs[i].mixing[s].transpose());
    }
    if (reg > 0.0) ap += reg * p;

    for (Eigen::Index i = 0; i < b_rows; ++i) {
      if (!active[i]) continue;
      double denom = p.row(i).dot(ap.row(i));
      if (!std::isfinite(denom)) {
        active[i] = 0;
        alive[i] = 0;
        continue;
      }
      if (dmin > 0.0) denom = std::max(denom, dmin);
      if (denom <= 0.0) {
        active[i] = 0;
        continue;
      }
      const double alpha = rs[i] / denom;
      x.row(i) += alpha * p.row(i);
      r.row(i) -= alpha * ap.row(i);
      const double rs_new = r.row(i).squaredNorm();
      if (!std::isfinite(rs_new)) {
        active[i] = 0;
        alive[i] = 0;
        continue;
      }
      work.last_cg_iters[i] = k + 1;
      if (rs_new <= target2[i]) {
        active[i] = 0;
      } else {
        p.row(i) = r.row(i) + (rs_new / rs[i]) * p.row(i);
      }
      rs[i] = rs_new;
    }
  }
  work.last_cg_resid.assign(b_rows, 0.0);
  for (Eigen::Index i = 0; i < b_rows; ++i) {
    work.cg_iterations += work.last_cg_iters[i];
    work.last_cg_resid[i] =
        rhs_norm2[i] > 0.0 ? std::sqrt(rs[i]) / std::sqrt(rhs_norm2[i]) : 0.0;
  }
  return x;
}

/* Posterior (or prior) score for a whole block at shared noise level sigma. */
void batch_score(const BatchProblem& pb, const std::vector<MatrixXd>& state, double sigma,
                 const SamplerConfig& config, std::vector<std::uint8_t>& alive, ScoreWork& work) {
  const Eigen::Index b_rows = state[0].rows();
  const double s2 = sigma * sigma;
  const VectorXd sig = VectorXd::Constant(b_rows, sigma);

  std::vector<std::unique_ptr<DenoiseEval>> evals(pb.models.size());
  for (std::size_t s = 0; s < pb.models.size(); ++s)
    evals[s] = pb.models[s]->evaluate(state[s], sig);

  work.score.resize(pb.models.size());
  for (std::size_t s = 0; s < pb.models.size(); ++s)
    work.score[s] = (evals[s]->value() - state[s]) / s2;

  if (!pb.use_likelihood) return;

  MatrixXd rhs(b_rows, pb.obs_dim);
  for (Eigen::Index i = 0; i < b_rows; ++i) {
    rhs.row(i) = pb.obs[i].y.transpose();
    for (std::size_t s = 0; s < pb.models.size(); ++s)
      rhs.row(i).noalias() -= evals[s]->value().row(i) * pb.obs[i].mixing[s].transpose();
  }

  const bool two_pass = config.cg_error_threshold.has_value();
  const double reg1 = two_pass ? 0.0 : config.cg_regularization;
  const double dmin1 = two_pass ? 0.0 : config.cg_denominator_min;
  MatrixXd w = batched_cg(pb, evals, sigma, rhs, config, reg1, dmin1, alive, work);

  if (two_pass) {
    for (Eigen::Index i = 0; i < b_rows; ++i) {
      if (!alive[i] || work.last_cg_resid[i] <= *config.cg_error_threshold) continue;
      ++work.cg_retries;
      // Re-solve this row alone with the regularization knobs enabled.
      JointState st;
      st.sigma = sigma;
      st.t = 0.0;
      st.x.resize(pb.models.size());
      for (std::size_t s = 0; s < pb.models.size(); ++s) st.x[s] = state[s].row(i).transpose();
      auto row_evals = evaluate_all(pb.models, st);
      auto op = [&](const VectorXd& v) {
        return likelihood_operator_apply(pb.obs[i], row_evals, sigma, v);
      };
      const CgResult cg = conjugate_gradient(op, rhs.row(i).transpose(), config);
      w.row(i) = cg.x.transpose();
      work.last_cg_iters[i] += cg.iterations;
      work.last_cg_resid[i] = cg.residual_norm;
      work.cg_iterations += cg.iterations;
    }
  }

  std::vector<MatrixXd> cot(pb.models.size());
  for (std::size_t s = 0; s < pb.models.size(); ++s) {
    cot[s].resize(b_rows, pb.dims[s]);
    for (Eigen::Index i = 0; i < b_rows; ++i)
      cot[s].row(i) = w.row(i) * pb.obs[i].mixing[s];
    work.score[s] += evals[s]->vjp(cot[s]);
  }
}

}  // namespace

BatchSampleResult pc_sample_posterior_batch(std::span<const Observation> obs,
                                            std::span<const Denoiser* const> models,
                                            const NoiseSchedule& schedule,
                                            const SamplerConfig& config,
                                            const std::function<Rng(std::int64_t)>& stream_for,
                                            const BatchOptions& options) {
  config.validate();
  check_arg(!models.empty(), "pc_sample_posterior_batch: no models");
  const bool posterior = options.use_likelihood && !obs.empty();
  if (!obs.empty())
    for (const auto& o : obs) o.validate(models);

  BatchProblem pb;
  pb.obs = obs;
  pb.models = models;
  pb.use_likelihood = posterior;
  for (const auto* m : models) pb.dims.push_back(m->dim());
  pb.obs_dim = obs.empty() ? 0 : obs[0].y.size();
  if (!obs.empty())
    for (const auto& o : obs)
      check_arg(o.y.size() == pb.obs_dim, "pc_sample_posterior_batch: mixed view dimensions");

  const Eigen::Index b_rows = obs.empty() ? 0 : static_cast<Eigen::Index>(obs.size());
  check_arg(b_rows > 0, "pc_sample_posterior_batch: empty batch");

  std::vector<Rng> rngs;
  rngs.reserve(b_rows);
  for (Eigen::Index i = 0; i < b_rows; ++i) rngs.push_back(stream_for(i));

  BatchSampleResult result;
  result.ok.assign(b_rows, 1);
  result.fail_step.assign(b_rows, -1);
  result.sources.resize(models.size());

  // t = 1 initialization: N(0, sigma_max^2 I) per block.
  std::vector<MatrixXd> state(models.size());
  for (std::size_t s = 0; s < models.size(); ++s) {
    state[s].resize(b_rows, pb.dims[s]);
    for (Eigen::Index i = 0; i < b_rows; ++i)
      for (Eigen::Index j = 0; j < pb.dims[s]; ++j)
        state[s](i, j) = schedule.sigma_max() * rngs[i].normal();
  }

  const int n_steps = config.pc_steps;
  const double dt = 1.0 / n_steps;
  std::vector<std::uint8_t> alive(b_rows, 1);
  ScoreWork work;
  std::vector<MatrixXd> noise(models.size());
  ArrayXd z_norm2(b_rows), s_norm2(b_rows);

  auto draw_noise = [&]() {
    for (std::size_t s = 0; s < models.size(); ++s) {
      noise[s].resize(b_rows, pb.dims[s]);
      for (Eigen::Index i = 0; i < b_rows; ++i)
        for (Eigen::Index j = 0; j < pb.dims[s]; ++j) noise[s](i, j) = rngs[i].normal();
    }
  };

  auto mark_failures = [&](int step) {
    for (Eigen::Index i = 0; i < b_rows; ++i) {
      if (!alive[i]) continue;
      bool finite = true;
      for (std::size_t s = 0; s < models.size() && finite; ++s)
        finite = state[s].row(i).allFinite();
      if (!finite) {
        alive[i] = 0;
        result.ok[i] = 0;
        result.fail_step[i] = step;
      }
    }
  };

  for (int step = 0; step < n_steps; ++step) {
    const double t_hi = 1.0 - static_cast<double>(step) / n_steps;
    const double t_lo = 1.0 - static_cast<double>(step + 1) / n_steps;

    // Predictor: Euler-Maruyama on the reverse VE SDE at t_hi.
    batch_score(pb, state, schedule.sigma(t_hi), config, alive, work);
    const double g2dt = schedule.g_squared(t_hi) * dt;
    draw_noise();
    for (std::size_t s = 0; s < models.size(); ++s)
      state[s] += g2dt * work.score[s] + std::sqrt(g2dt) * noise[s];
    if (options.diagnostics != nullptr && posterior) {
      for (Eigen::Index i = 0; i < b_rows; ++i) {
        CgDiagnosticsRecord rec{obs[i].view_id, obs[i].sample_id, step, work.last_cg_iters[i],
                                work.last_cg_resid[i], options.diag_round, options.diag_hold_out};
        (*options.diagnostics)(rec);
      }
    }

    // Annealed Langevin corrections at the new level.
    const double sigma_lo = schedule.sigma(std::max(t_lo, 0.0));
    for (int c = 0; c < config.corrections_per_step; ++c) {
      batch_score(pb, state, sigma_lo, config, alive, work);
      draw_noise();
      z_norm2.setZero();
      s_norm2.setZero();
      for (std::size_t s = 0; s < models.size(); ++s) {
        z_norm2 += noise[s].rowwise().squaredNorm().array();
        s_norm2 += work.score[s].rowwise().squaredNorm().array();
      }
      for (Eigen::Index i = 0; i < b_rows; ++i) {
        if (!alive[i] || s_norm2[i] <= 0.0 || !std::isfinite(s_norm2[i])) continue;
        const double eps = 2.0 * config.tau * config.tau * z_norm2[i] / s_norm2[i];
        for (std::size_t s = 0; s < models.size(); ++s)
          state[s].row(i) += eps * work.score[s].row(i) + std::sqrt(2.0 * eps) * noise[s].row(i);
      }
    }
    mark_failures(step);
  }

  result.cg_iterations = work.cg_iterations;
  result.cg_retries = work.cg_retries;
  for (std::size_t s = 0; s < models.size(); ++s) result.sources[s] = std::move(state[s]);
  for (Eigen::Index i = 0; i < b_rows; ++i)
    if (!result.ok[i]) ++result.failures;
  return result;
}

MatrixXd pc_sample_prior_batch(const Denoiser& model, std::int64_t n,
                               const NoiseSchedule& schedule, const SamplerConfig& config,
                               const std::function<Rng(std::int64_t)>& stream_for) {
  check_arg(n > 0, "pc_sample_prior_batch: n must be positive");
  // Reuse the posterior engine with the likelihood disabled; observations
  // are placeholders that carry only the batch size.
  const Denoiser* models[1] = {&model};
  std::vector<Observation> dummies(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    dummies[i].y = VectorXd::Zero(1);
    dummies[i].mixing = {MatrixXd::Zero(1, model.dim())};
    dummies[i].noise_cov = MatrixXd::Identity(1, 1);
    dummies[i].sample_id = i;
  }
  BatchOptions options;
  options.use_likelihood = false;
  auto result = pc_sample_posterior_batch(dummies, models, schedule, config, stream_for, options);
  for (std::int64_t i = 0; i < n; ++i)
    if (!result.ok[i]) throw SolverError("pc_sample_prior_batch: non-finite trajectory");
  return std::move(result.sources[0]);
}

std::vector<VectorXd> pc_sample_posterior(const Observation& obs,
                                          std::span<const Denoiser* const> models,
                                          const NoiseSchedule& schedule,
                                          const SamplerConfig& config, Rng& rng) {
  const std::uint64_t sub = rng.raw();
  auto stream_for = [&](std::int64_t) { return Rng(sub); };
  auto result = pc_sample_posterior_batch({&obs, 1}, models, schedule, config, stream_for);
  if (!result.ok[0]) {
    std::ostringstream msg;
    msg << "pc_sample_posterior: non-finite state at step " << result.fail_step[0] << " (view "
        << obs.view_id << ", sample " << obs.sample_id << ")";
    throw SolverError(msg.str());
  }
  std::vector<VectorXd> out(models.size());
  for (std::size_t s = 0; s < models.size(); ++s) out[s] = result.sources[s].row(0).transpose();
  return out;
}

VectorXd pc_sample_prior(const Denoiser& model, const NoiseSchedule& schedule,
                         const SamplerConfig& config, Rng& rng) {
  const std::uint64_t sub = rng.raw();
  auto stream_for = [&](std::int64_t) { return Rng(sub); };
  return pc_sample_prior_batch(model, 1, schedule, config, stream_for).row(0).transpose();
}

}  // namespace mvss
