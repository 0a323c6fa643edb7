#include "mvss/denoiser.hpp"

#include <Eigen/Eigenvalues>
#include <map>
#include <vector>

namespace mvss {

namespace {
std::atomic<std::uint64_t> g_denoise_evals{0};
std::atomic<std::uint64_t> g_vjp_evals{0};
}  // namespace

EvalCounters read_eval_counters() {
  return {g_denoise_evals.load(), g_vjp_evals.load()};
}

void reset_eval_counters() {
  g_denoise_evals.store(0);
  g_vjp_evals.store(0);
}

namespace detail {
void count_denoise(std::uint64_t n) { g_denoise_evals.fetch_add(n); }
void count_vjp(std::uint64_t n) { g_vjp_evals.fetch_add(n); }
}  // namespace detail

VectorXd Denoiser::denoise(const VectorXd& xt, double sigma) const {
  MatrixXd x = xt.transpose();
  VectorXd s(1);
  s[0] = sigma;
  return evaluate(x, s)->value().row(0).transpose();
}

VectorXd Denoiser::vjp(const VectorXd& xt, double sigma, const VectorXd& v) const {
  MatrixXd x = xt.transpose();
  VectorXd s(1);
  s[0] = sigma;
  auto eval = evaluate(x, s);
  return eval->vjp(v.transpose()).row(0).transpose();
}

GaussianDenoiser::GaussianDenoiser(VectorXd mean, MatrixXd cov)
    : mean_(std::move(mean)), cov_(std::move(cov)) {
  check_arg(cov_.rows() == cov_.cols() && cov_.rows() == mean_.size(),
            "GaussianDenoiser: mean/cov shape mismatch");
  const double scale = std::max(1.0, cov_.cwiseAbs().maxCoeff());
  check_arg((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() <= 1e-9 * scale,
            "GaussianDenoiser: covariance must be symmetric");
  cov_ = 0.5 * (cov_ + cov_.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov_, Eigen::EigenvaluesOnly);
  check_arg(es.eigenvalues().minCoeff() >= -1e-10 * scale,
            "GaussianDenoiser: covariance must be positive semidefinite");
}

MatrixXd GaussianDenoiser::posterior_gain(double sigma) const {
  check_domain(sigma > 0.0, "GaussianDenoiser: sigma must be positive");
  MatrixXd m = cov_;
  m.diagonal().array() += sigma * sigma;
  // cov and (cov + s^2 I)^{-1} share an eigenbasis, so the product is symmetric.
  return m.ldlt().solve(cov_);
}

namespace {

class GaussianEval : public DenoiseEval {
 public:
  GaussianEval(const GaussianDenoiser& model, const MatrixXd& xt, const VectorXd& sigma)
      : dim_(model.dim()) {
    check_arg(xt.cols() == dim_, "GaussianDenoiser: state dimension mismatch");
    check_arg(xt.rows() == sigma.size(), "GaussianDenoiser: sigma rows mismatch");
    const Eigen::Index n = xt.rows();
    value_.resize(n, dim_);
    gain_rows_.resize(n);
    // Group identical sigmas so lockstep batches factor the posterior once.
    for (Eigen::Index i = 0; i < n; ++i) {
      auto it = gains_.find(sigma[i]);
      if (it == gains_.end()) it = gains_.emplace(sigma[i], model.posterior_gain(sigma[i])).first;
      gain_rows_[i] = &it->second;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const MatrixXd& k = *gain_rows_[i];
      value_.row(i) = model.mean().transpose() +
                      (xt.row(i) - model.mean().transpose()) * k;  // k symmetric
    }
    detail::count_denoise(static_cast<std::uint64_t>(n));
  }

  const MatrixXd& value() const override { return value_; }

  MatrixXd vjp(const MatrixXd& cotangent) const override {
    check_arg(cotangent.rows() == value_.rows() && cotangent.cols() == dim_,
              "GaussianDenoiser: cotangent shape mismatch");
    MatrixXd out(cotangent.rows(), dim_);
    for (Eigen::Index i = 0; i < cotangent.rows(); ++i)
      out.row(i) = cotangent.row(i) * (*gain_rows_[i]);
    detail::count_vjp(static_cast<std::uint64_t>(cotangent.rows()));
    return out;
  }

 private:
  int dim_;
  MatrixXd value_;
  std::map<double, MatrixXd> gains_;
  std::vector<const MatrixXd*> gain_rows_;
};

}  // namespace

std::unique_ptr<DenoiseEval> GaussianDenoiser::evaluate(const MatrixXd& xt,
                                                        const VectorXd& sigma) const {
  return std::make_unique<GaussianEval>(*this, xt, sigma);
}

}  // namespace mvss
