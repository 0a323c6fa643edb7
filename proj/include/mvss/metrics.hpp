#pragma once

#include "mvss/common.hpp"

namespace mvss {

struct SinkhornConfig {
  double epsilon = 0.01;  // entropic regularization, squared-Euclidean cost units
  int max_iters = 2000;   // fixed-point iterations at the target epsilon
  // Relative tolerance on the (extrapolated) dual value.
  double tolerance = 1e-7;

  void validate() const {
    check_arg(epsilon > 0.0, "SinkhornConfig: epsilon must be positive");
    check_arg(max_iters >= 1 && tolerance > 0.0, "SinkhornConfig: bad iteration settings");
  }
};

struct SinkhornResult {
  double value = 0.0;
  bool converged = true;
  int iterations = 0;
};

/* Debiased entropic optimal transport between empirical measures:
   OT_eps(X,Y) - (OT_eps(X,X) + OT_eps(Y,Y))/2 with squared-Euclidean cost
   and uniform weights, computed by log-domain Sinkhorn iteration with
   epsilon annealing. Rows of X and Y are samples. */
SinkhornResult sinkhorn_divergence(const MatrixXd& x, const MatrixXd& y,
                                   const SinkhornConfig& config, int threads = 1);

// Entropic OT value alone (dual objective at the fixed point).
SinkhornResult sinkhorn_ot(const MatrixXd& x, const MatrixXd& y, const SinkhornConfig& config,
                           int threads = 1);

// 10 log10(peak^2 / MSE); +infinity when MSE is zero.
double psnr(const MatrixXd& truth, const MatrixXd& estimate, double peak);

// Reporting form: +infinity capped at 200 dB.
double psnr_capped(const MatrixXd& truth, const MatrixXd& estimate, double peak);

}  // namespace mvss
