#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "mvss/common.hpp"

namespace mvss {

/* Deterministic random stream. Gaussian draws use Box-Muller on top of a
   mt19937_64 core so that sequences are reproducible independent of the
   standard library's distribution implementations. Substreams are derived
   by hashing tags into the base seed, not by splitting generator state, so
   (seed, tags...) always names the same stream regardless of what has been
   drawn elsewhere. */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(mix64(seed ^ 0x6d767373u)) {}

  std::uint64_t raw() { return gen_(); }

  // Uniform on [0,1).
  double uniform() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

  // Uniform on (0,1]; safe under log().
  double uniform_pos() { return (static_cast<double>(raw() >> 11) + 1.0) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  VectorXd normal_vector(int n) {
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  template <typename Derived>
  void fill_normal(Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = normal();
  }

  double gamma(double shape) {
    // Marsaglia-Tsang; shape >= 1 after boosting.
    if (shape < 1.0) {
      const double u = uniform_pos();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

  std::uint64_t seed() const { return seed_; }

  Rng substream(std::initializer_list<std::uint64_t> tags) const {
    std::uint64_t s = seed_;
    for (std::uint64_t t : tags) s = mix64(s ^ mix64(t + 0x9e3779b97f4a7c15ull));
    return Rng(s);
  }

  static std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mvss
