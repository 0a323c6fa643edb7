#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mvss/sde.hpp"
#include "test_util.hpp"

using namespace mvss;

TEST_CASE("log-linear schedule hits its endpoints and geometric midpoint") {
  NoiseSchedule sched(1e-3, 10.0);
  CHECK(sched.sigma(0.0) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(sched.sigma(1.0) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(sched.sigma(0.5) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("schedule domain checks") {
  CHECK_THROWS_AS(NoiseSchedule(0.0, 1.0), std::domain_error);
  CHECK_THROWS_AS(NoiseSchedule(1.0, 1.0), std::domain_error);  // degenerate rejected
  CHECK_THROWS_AS(NoiseSchedule(2.0, 1.0), std::domain_error);
  NoiseSchedule sched(1e-3, 10.0);
  CHECK_THROWS_AS(sched.sigma(-0.01), std::domain_error);
  CHECK_THROWS_AS(sched.sigma(1.01), std::domain_error);
}

TEST_CASE("schedule is strictly increasing") {
  NoiseSchedule sched(5e-3, 15.0);
  double prev = 0.0;
  for (int i = 0; i <= 1000; ++i) {
    const double s = sched.sigma(i / 1000.0);
    CHECK(s > prev);
    prev = s;
  }
}

TEST_CASE("diffuse: zero-noise limit and linearity") {
  Rng rng(7);
  const VectorXd x0 = rng.normal_vector(5);
  NoiseSchedule tiny(1e-12, 1.0);
  VectorXd noisy = diffuse(x0, 0.0, tiny, rng);
  CHECK((noisy - x0).norm() < 1e-9);

  NoiseSchedule sched(1e-3, 10.0);
  Rng a(123), b(123);
  const VectorXd eps = a.normal_vector(5);
  const VectorXd draw = diffuse(VectorXd::Zero(5), 1.0, sched, b);
  CHECK((draw - 10.0 * eps).norm() < 1e-12);
}

TEST_CASE("diffuse: Monte Carlo variance oracle") {
  NoiseSchedule sched(1e-3, 10.0);
  const double t = 0.63;
  const double s2 = sched.sigma(t) * sched.sigma(t);
  Rng rng(99);
  const int n = 100000;
  const VectorXd x0 = VectorXd::Ones(1);
  double sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = diffuse(x0, t, sched, rng)[0] - 1.0;
    sum2 += d * d;
  }
  const double var = sum2 / n;
  const double se = s2 * std::sqrt(2.0 / n);
  CHECK(std::abs(var - s2) < 3.0 * se);
}

TEST_CASE("Tweedie conversion: trivial and Gaussian identities") {
  Rng rng(5);
  const VectorXd xt = rng.normal_vector(4);
  CHECK(score_from_denoiser(xt, xt, 0.7).norm() == 0.0);
  CHECK_THROWS_AS(score_from_denoiser(xt, xt, 0.0), std::domain_error);

  // Standard-normal prior in d=1: x0hat = xt/(1+s^2) has score -xt/(1+s^2).
  const double sigma = 0.8;
  const double x = 1.3;
  VectorXd xv(1), x0hat(1);
  xv[0] = x;
  x0hat[0] = x / (1.0 + sigma * sigma);
  const double score = score_from_denoiser(x0hat, xv, sigma)[0];
  CHECK(score == doctest::Approx(-x / (1.0 + sigma * sigma)).epsilon(1e-12));
}

TEST_CASE("Tweedie score matches the exact Gaussian-mixture density gradient") {
  // Two-component prior in d=1; everything below is analytic in closed form.
  const double w[2] = {0.3, 0.7};
  const double mu[2] = {-1.0, 2.0};
  const double s0[2] = {0.5, 1.2};
  const double sigma = 0.9;

  auto log_marginal = [&](double x) {
    double p = 0.0;
    for (int k = 0; k < 2; ++k) {
      const double v = s0[k] * s0[k] + sigma * sigma;
      p += w[k] * std::exp(-0.5 * (x - mu[k]) * (x - mu[k]) / v) / std::sqrt(2 * M_PI * v);
    }
    return std::log(p);
  };
  auto posterior_mean = [&](double x) {
    double num = 0.0, den = 0.0;
    for (int k = 0; k < 2; ++k) {
      const double v = s0[k] * s0[k] + sigma * sigma;
      const double resp =
          w[k] * std::exp(-0.5 * (x - mu[k]) * (x - mu[k]) / v) / std::sqrt(2 * M_PI * v);
      const double cond = (mu[k] * sigma * sigma + x * s0[k] * s0[k]) / v;
      num += resp * cond;
      den += resp;
    }
    return num / den;
  };

  for (double x : {-2.0, -0.3, 0.9, 2.5}) {
    VectorXd xv(1), m(1);
    xv[0] = x;
    m[0] = posterior_mean(x);
    const double got = score_from_denoiser(m, xv, sigma)[0];
    const double h = 1e-5;
    const double fd = (log_marginal(x + h) - log_marginal(x - h)) / (2 * h);
    CHECK(testing::rel_error(got, fd) < 1e-4);
  }
}

TEST_CASE("Tweedie consistency for a full Gaussian prior (closed form both sides)") {
  Rng rng(21);
  const int d = 4;
  MatrixXd a = MatrixXd::NullaryExpr(d, d, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  const MatrixXd cov = a * a.transpose() + MatrixXd::Identity(d, d);
  const VectorXd mu = rng.normal_vector(d);
  const double sigma = 0.6;

  MatrixXd marg = cov;
  marg.diagonal().array() += sigma * sigma;
  const VectorXd xt = rng.normal_vector(d);
  const VectorXd x0hat = mu + cov * marg.ldlt().solve(xt - mu);
  const VectorXd got = score_from_denoiser(x0hat, xt, sigma);
  const VectorXd expected = -marg.ldlt().solve(xt - mu);
  CHECK((got - expected).norm() < 1e-10 * std::max(1.0, expected.norm()));
}

TEST_CASE("Beta(3,3) time sampler: support and Kolmogorov-Smirnov oracle") {
  TimeSampler ts;
  Rng rng(1234);
  const int n = 1000000;
  std::vector<double> draws(n);
  for (int i = 0; i < n; ++i) {
    draws[i] = ts.sample(rng);
    REQUIRE(draws[i] > 0.0);
    REQUIRE(draws[i] < 1.0);
  }
  std::sort(draws.begin(), draws.end());
  // CDF of Beta(3,3): x^3 (10 - 15 x + 6 x^2).
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = draws[i];
    const double cdf = x * x * x * (10.0 - 15.0 * x + 6.0 * x * x);
    ks = std::max(ks, std::abs(cdf - (i + 1.0) / n));
    ks = std::max(ks, std::abs(cdf - double(i) / n));
  }
  CHECK(ks < 0.005);
}
