#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "mvss/common.hpp"
#include "mvss/rng.hpp"

namespace mvss::testing {

// Energy statistic 2 E|X-Y| - E|X-X'| - E|Y-Y'| between sample sets.
inline double energy_statistic(const MatrixXd& x, const MatrixXd& y) {
  auto mean_cross = [](const MatrixXd& a, const MatrixXd& b) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < b.rows(); ++j) s += (a.row(i) - b.row(j)).norm();
    return s / (double(a.rows()) * double(b.rows()));
  };
  return 2.0 * mean_cross(x, y) - mean_cross(x, x) - mean_cross(y, y);
}

/* Permutation two-sample test on the energy statistic. Returns the p-value
   of the observed statistic under random relabelings. */
inline double energy_distance_p_value(const MatrixXd& x, const MatrixXd& y, int n_perm,
                                      std::uint64_t seed) {
  const double observed = energy_statistic(x, y);
  MatrixXd pooled(x.rows() + y.rows(), x.cols());
  pooled << x, y;
  Rng rng(seed);
  std::vector<Eigen::Index> idx(pooled.rows());
  std::iota(idx.begin(), idx.end(), 0);
  int at_least = 0;
  for (int p = 0; p < n_perm; ++p) {
    for (Eigen::Index i = pooled.rows() - 1; i > 0; --i) {
      const auto j = static_cast<Eigen::Index>(rng.uniform() * double(i + 1));
      std::swap(idx[i], idx[std::min(j, i)]);
    }
    MatrixXd px(x.rows(), x.cols()), py(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) px.row(i) = pooled.row(idx[i]);
    for (Eigen::Index i = 0; i < y.rows(); ++i) py.row(i) = pooled.row(idx[x.rows() + i]);
    if (energy_statistic(px, py) >= observed) ++at_least;
  }
  return (at_least + 1.0) / (n_perm + 1.0);
}

// Exact optimal assignment cost (mean over pairs) by brute force; n <= 8.
inline double brute_force_assignment_cost(const MatrixXd& x, const MatrixXd& y) {
  const int n = static_cast<int>(x.rows());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (int i = 0; i < n; ++i) c += (x.row(i) - y.row(perm[i])).squaredNorm();
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / n;
}

inline double rel_error(double got, double want, double floor = 1e-12) {
  return std::abs(got - want) / std::max(std::abs(want), floor);
}

}  // namespace mvss::testing
