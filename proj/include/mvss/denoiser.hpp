#pragma once

#include <atomic>
#include <cstdint>
#include <memory>

#include "mvss/common.hpp"

namespace mvss {

/* Tallies of per-sample denoiser work, the compute unit used for budget
   matching between sampling strategies. evaluate() on a B-row batch adds B
   to denoise_evals; each vjp() call on B rows adds B to vjp_evals. */
struct EvalCounters {
  std::uint64_t denoise_evals = 0;
  std::uint64_t vjp_evals = 0;
};

EvalCounters read_eval_counters();
void reset_eval_counters();
namespace detail {
void count_denoise(std::uint64_t n);
void count_vjp(std::uint64_t n);
}  // namespace detail

/* One evaluation of E[x0|x_t] on a batch of states at fixed (per-row) noise
   levels. Keeps whatever intermediate state is needed so that repeated
   vector-Jacobian products against the same states (e.g. CG iterations)
   reuse the forward pass. */
class DenoiseEval {
 public:
  virtual ~DenoiseEval() = default;
  // B x d posterior means, one row per input row.
  virtual const MatrixXd& value() const = 0;
  // Rows v_i^T d(dE/dx)_i for cotangent rows v_i; B x d in, B x d out.
  virtual MatrixXd vjp(const MatrixXd& cotangent) const = 0;
};

// A model of E[x0 | x_t] at noise level sigma.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual int dim() const = 0;
  // xt is B x d, sigma has B entries (all positive).
  virtual std::unique_ptr<DenoiseEval> evaluate(const MatrixXd& xt, const VectorXd& sigma) const = 0;

  MatrixXd denoise(const MatrixXd& xt, const VectorXd& sigma) const {
    return evaluate(xt, sigma)->value();
  }
  VectorXd denoise(const VectorXd& xt, double sigma) const;
  VectorXd vjp(const VectorXd& xt, double sigma, const VectorXd& v) const;
};

/* Analytic denoiser for a Gaussian prior N(mean, cov):
     E[x0|x_t] = mean + cov (cov + sigma^2 I)^{-1} (x_t - mean),
   with Jacobian cov (cov + sigma^2 I)^{-1} (exact, symmetric). Used for
   initialization and as the oracle backend in tests. */
class GaussianDenoiser : public Denoiser {
 public:
  GaussianDenoiser(VectorXd mean, MatrixXd cov);

  int dim() const override { return static_cast<int>(mean_.size()); }
  std::unique_ptr<DenoiseEval> evaluate(const MatrixXd& xt, const VectorXd& sigma) const override;

  const VectorXd& mean() const { return mean_; }
  const MatrixXd& cov() const { return cov_; }

  // cov (cov + sigma^2 I)^{-1}; equals the denoiser Jacobian at level sigma.
  MatrixXd posterior_gain(double sigma) const;

 private:
  VectorXd mean_;
  MatrixXd cov_;
};

}  // namespace mvss
