#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mvss/train.hpp"
#include "test_util.hpp"

using namespace mvss;

namespace {

MatrixXd random_spd(int d, Rng& rng, double ridge = 0.5) {
  MatrixXd a = MatrixXd::NullaryExpr(d, d, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  return (a * a.transpose() / d + ridge * MatrixXd::Identity(d, d)).eval();
}

}  // namespace

TEST_CASE("Gaussian denoiser: prior/likelihood limits") {
  Rng rng(3);
  const int d = 3;
  const VectorXd mu = rng.normal_vector(d);
  const MatrixXd cov = random_spd(d, rng);
  GaussianDenoiser model(mu, cov);
  const VectorXd xt = rng.normal_vector(d);

  CHECK((model.denoise(xt, 1e-8) - xt).norm() < 1e-6);
  CHECK((model.denoise(xt, 1e8) - mu).norm() < 1e-6);
}

TEST_CASE("Gaussian denoiser: isotropic case is xt/2 and matches an MC regression oracle") {
  GaussianDenoiser model(VectorXd::Zero(2), MatrixXd::Identity(2, 2));
  Rng rng(11);
  const VectorXd xt = rng.normal_vector(2);
  CHECK((model.denoise(xt, 1.0) - 0.5 * xt).norm() < 1e-12);

  /* Joint draws (x0, xt = x0 + eps): for jointly Gaussian variables the
     posterior-mean map is linear, so its MC estimate is the least-squares
     slope Cov(x0, xt) Var(xt)^{-1}. */
  const int n = 1000000;
  double sxx = 0.0, sxy = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x0 = rng.normal();
    const double xt1 = x0 + rng.normal();
    sxx += xt1 * xt1;
    sxy += xt1 * x0;
  }
  const double slope = sxy / sxx;
  const double se = std::sqrt(0.5 / sxx);  // residual variance is 1/2
  CHECK(std::abs(slope - 0.5) < 3.0 * se);
}

TEST_CASE("Gaussian denoiser vjp: Jacobian I/2 case and linearity") {
  GaussianDenoiser model(VectorXd::Zero(3), MatrixXd::Identity(3, 3));
  Rng rng(17);
  const VectorXd xt = rng.normal_vector(3);
  const VectorXd v = rng.normal_vector(3);
  CHECK((model.vjp(xt, 1.0, v) - 0.5 * v).norm() < 1e-12);

  GaussianDenoiser aniso(rng.normal_vector(3), random_spd(3, rng));
  const VectorXd v1 = rng.normal_vector(3), v2 = rng.normal_vector(3);
  const double a = 1.7, b = -0.4;
  const VectorXd lhs = aniso.vjp(xt, 0.8, a * v1 + b * v2);
  const VectorXd rhs = a * aniso.vjp(xt, 0.8, v1) + b * aniso.vjp(xt, 0.8, v2);
  CHECK((lhs - rhs).norm() < 1e-12 * std::max(1.0, rhs.norm()));
}

TEST_CASE("Gaussian denoiser: idempotence under a matched prior (MC)") {
  Rng rng(31);
  const int d = 3;
  const VectorXd mu = rng.normal_vector(d);
  const MatrixXd cov = random_spd(d, rng);
  GaussianDenoiser model(mu, cov);
  const double sigma = 0.7;

  MatrixXd marg = cov;
  marg.diagonal().array() += sigma * sigma;
  const Eigen::LLT<MatrixXd> chol(marg);

  const int n = 100000;
  MatrixXd xt(n, d);
  for (int i = 0; i < n; ++i)
    xt.row(i) = (mu + chol.matrixL() * rng.normal_vector(d)).transpose();
  const MatrixXd denoised = model.denoise(xt, VectorXd::Constant(n, sigma));
  for (int j = 0; j < d; ++j) {
    const double mean = denoised.col(j).mean();
    const double sd = std::sqrt((denoised.col(j).array() - mean).square().mean() / n);
    CHECK(std::abs(mean - mu[j]) < 3.0 * sd + 1e-9);
  }
}

TEST_CASE("Gaussian denoiser validates its covariance") {
  MatrixXd bad(2, 2);
  bad << 1.0, 0.5, -0.5, 1.0;  // not symmetric
  CHECK_THROWS_AS(GaussianDenoiser(VectorXd::Zero(2), bad), std::invalid_argument);
  MatrixXd indefinite(2, 2);
  indefinite << 1.0, 2.0, 2.0, 1.0;  // eigenvalues 3, -1
  CHECK_THROWS_AS(GaussianDenoiser(VectorXd::Zero(2), indefinite), std::invalid_argument);
}

TEST_CASE("fit_gaussian: degenerate and closed-form cases") {
  const int d = 3;
  VectorXd c(d);
  c << 1.0, -2.0, 0.5;
  MatrixXd constant = c.transpose().replicate(5, 1);
  GaussianDenoiser fit = fit_gaussian(constant);
  CHECK((fit.mean() - c).norm() < 1e-12);
  CHECK(fit.cov().norm() < 1e-12);  // zero spread: jitter scales with trace

  MatrixXd antipodal(4, d);
  antipodal.setZero();
  antipodal(0, 0) = 1.0;
  antipodal(1, 0) = -1.0;
  antipodal(2, 0) = 1.0;
  antipodal(3, 0) = -1.0;
  fit = fit_gaussian(antipodal);
  const double jitter = 1e-6 / d;  // trace of the sample covariance is 1
  CHECK(fit.mean().norm() < 1e-12);
  CHECK(fit.cov()(0, 0) == doctest::Approx(1.0 + jitter).epsilon(1e-9));
  CHECK(fit.cov()(1, 1) == doctest::Approx(jitter).epsilon(1e-6));
  CHECK(std::abs(fit.cov()(0, 1)) < 1e-12);

  CHECK_THROWS_AS(fit_gaussian(MatrixXd::Zero(d, d)), std::invalid_argument);  // too few
}

TEST_CASE("fit_gaussian: Monte Carlo identification") {
  Rng rng(47);
  const int d = 3;
  const VectorXd mu = rng.normal_vector(d);
  const MatrixXd cov = random_spd(d, rng);
  const Eigen::LLT<MatrixXd> chol(cov);
  const int n = 100000;
  MatrixXd samples(n, d);
  for (int i = 0; i < n; ++i)
    samples.row(i) = (mu + chol.matrixL() * rng.normal_vector(d)).transpose();
  GaussianDenoiser fit = fit_gaussian(samples);
  for (int i = 0; i < d; ++i) {
    CHECK(std::abs(fit.mean()[i] - mu[i]) < 3.0 * std::sqrt(cov(i, i) / n));
    for (int j = 0; j < d; ++j) {
      const double se = std::sqrt((cov(i, i) * cov(j, j) + cov(i, j) * cov(i, j)) / n);
      CHECK(std::abs(fit.cov()(i, j) - cov(i, j)) < 3.0 * se + 1e-5);
    }
  }
}

TEST_CASE("denoiser eval counters track per-sample work") {
  reset_eval_counters();
  GaussianDenoiser model(VectorXd::Zero(2), MatrixXd::Identity(2, 2));
  MatrixXd xt = MatrixXd::Zero(10, 2);
  auto eval = model.evaluate(xt, VectorXd::Constant(10, 1.0));
  eval->vjp(MatrixXd::Ones(10, 2));
  eval->vjp(MatrixXd::Ones(10, 2));
  const EvalCounters counters = read_eval_counters();
  CHECK(counters.denoise_evals == 10);
  CHECK(counters.vjp_evals == 20);
  reset_eval_counters();
}
