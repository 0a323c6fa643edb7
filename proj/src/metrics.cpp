#include "mvss/metrics.hpp"

#include <cmath>
#include <limits>

#include "mvss/threading.hpp"

namespace mvss {

namespace {

using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;

MatrixXd squared_distances(const MatrixXd& x, const MatrixXd& y) {
  const VectorXd xn = x.rowwise().squaredNorm();
  const VectorXd yn = y.rowwise().squaredNorm();
  MatrixXd c = -2.0 * (x * y.transpose());
  c.colwise() += xn;
  c.rowwise() += yn.transpose();
  return c.cwiseMax(0.0);
}

// out_i = -eps LSE_j((other_j - cost(i,j))/eps + log_w), vectorized per row.
void lse_update(const MatrixXd& cost, bool along_rows, const VectorXd& other, double eps,
                double log_w, VectorXd& out, int threads) {
  const Eigen::Index n = along_rows ? cost.rows() : cost.cols();
  const RowArr other_t = other.transpose().array();
  parallel_for_chunks(n, 128, threads, [&](std::int64_t begin, std::int64_t end) {
    RowArr v;
    for (std::int64_t i = begin; i < end; ++i) {
      if (along_rows)
        v = (other_t - cost.row(i).array()) / eps + log_w;
      else
        v = (other_t - cost.col(i).transpose().array()) / eps + log_w;
      const double m = v.maxCoeff();
      out[i] = -eps * (m + std::log((v - m).exp().sum()));
    }
  });
}

/* Entropic OT between uniform empirical measures, log-domain with epsilon
   annealing. Every exact f update makes the row marginals of the implied
   plan exact, so the dual objective reduces to mean(f) + mean(g) and the
   alternating updates ascend it monotonically. The slow geometric tail at
   small epsilon is handled by Aitken extrapolation: iterate until the
   estimated remaining ascent is below tolerance, then add it back in. */
SinkhornResult sinkhorn_dual(const MatrixXd& cost, const SinkhornConfig& config, int threads) {
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();
  const double log_a = -std::log(double(n));
  const double log_b = -std::log(double(m));
  VectorXd f = VectorXd::Zero(n);
  VectorXd g = VectorXd::Zero(m);

  double eps = std::max(cost.maxCoeff() * 0.5, config.epsilon);
  while (eps > config.epsilon * (1.0 + 1e-12)) {
    for (int it = 0; it < 4; ++it) {
      lse_update(cost, false, f, eps, log_a, g, threads);
      lse_update(cost, true, g, eps, log_b, f, threads);
    }
    eps = std::max(config.epsilon, eps * 0.5);
  }

  SinkhornResult result;
  result.converged = false;
  eps = config.epsilon;
  double value = -std::numeric_limits<double>::infinity();
  double delta_prev = 0.0;
  for (int it = 0; it < config.max_iters; ++it) {
    lse_update(cost, false, f, eps, log_a, g, threads);
    lse_update(cost, true, g, eps, log_b, f, threads);
    result.iterations = it + 1;
    const double v = f.mean() + g.mean();
    const double delta = v - value;
    value = v;
    if (it >= 8) {
      const double scale = std::max(1.0, std::abs(v));
      double remaining = 0.0;
      if (delta_prev > 0.0 && delta > 0.0 && delta < delta_prev) {
        const double rho = std::min(delta / delta_prev, 0.999);
        remaining = delta * rho / (1.0 - rho);
      }
      if (std::abs(delta) + remaining < config.tolerance * scale) {
        value += remaining;
        result.converged = true;
        break;
      }
    }
    delta_prev = delta;
  }
  result.value = value;
  return result;
}

// Self-transport OT_eps(X,X): the fixed point is symmetric (f = g), and the
// damped update converges at an epsilon-independent rate.
SinkhornResult sinkhorn_self(const MatrixXd& cost, const SinkhornConfig& config, int threads) {
  const Eigen::Index n = cost.rows();
  const double log_a = -std::log(double(n));
  VectorXd f = VectorXd::Zero(n);
  VectorXd t(n);

  double eps = std::max(cost.maxCoeff() * 0.5, config.epsilon);
  SinkhornResult result;
  result.converged = false;
  for (;;) {
    const bool final_level = eps <= config.epsilon * (1.0 + 1e-12);
    const int iters = final_level ? config.max_iters : 4;
    for (int it = 0; it < iters; ++it) {
      lse_update(cost, true, f, eps, log_a, t, threads);
      const double delta = (t - f).cwiseAbs().maxCoeff();
      f = 0.5 * (f + t);
      if (final_level) {
        result.iterations += 1;
        if (delta < std::max(config.tolerance * eps, 1e-13)) {
          result.converged = true;
          break;
        }
      }
    }
    if (final_level) break;
    eps = std::max(config.epsilon, eps * 0.5);
  }
  // One exact half-update makes the row marginals exact for the value.
  lse_update(cost, true, f, eps, log_a, t, threads);
  result.value = f.mean() + t.mean();
  return result;
}

}  // namespace

SinkhornResult sinkhorn_ot(const MatrixXd& x, const MatrixXd& y, const SinkhornConfig& config,
                           int threads) {
  config.validate();
  check_arg(x.rows() >= 1 && y.rows() >= 1, "sinkhorn_ot: empty sample set");
  check_arg(x.cols() == y.cols(), "sinkhorn_ot: dimension mismatch");
  const MatrixXd cost = squared_distances(x, y);
  return sinkhorn_dual(cost, config, threads);
}

SinkhornResult sinkhorn_divergence(const MatrixXd& x, const MatrixXd& y,
                                   const SinkhornConfig& config, int threads) {
  config.validate();
  check_arg(x.rows() >= 1 && y.rows() >= 1, "sinkhorn_divergence: empty sample set");
  check_arg(x.cols() == y.cols(), "sinkhorn_divergence: dimension mismatch");
  if (x.rows() == y.rows() && x == y) return {0.0, true, 0};  // debiasing identity
  const SinkhornResult xy = sinkhorn_dual(squared_distances(x, y), config, threads);
  const SinkhornResult xx = sinkhorn_self(squared_distances(x, x), config, threads);
  const SinkhornResult yy = sinkhorn_self(squared_distances(y, y), config, threads);
  SinkhornResult result;
  result.value = xy.value - 0.5 * (xx.value + yy.value);
  result.converged = xy.converged && xx.converged && yy.converged;
  result.iterations = xy.iterations + xx.iterations + yy.iterations;
  return result;
}

double psnr(const MatrixXd& truth, const MatrixXd& estimate, double peak) {
  check_arg(truth.rows() == estimate.rows() && truth.cols() == estimate.cols(),
            "psnr: shape mismatch");
  check_domain(peak > 0.0, "psnr: peak must be positive");
  const double mse = (truth - estimate).array().square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double psnr_capped(const MatrixXd& truth, const MatrixXd& estimate, double peak) {
  return std::min(psnr(truth, estimate, peak), 200.0);
}

}  // namespace mvss
