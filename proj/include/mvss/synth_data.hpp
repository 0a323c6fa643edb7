#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mvss/rng.hpp"
#include "mvss/sampler.hpp"

namespace mvss {

/* Random smooth closed curve in R^d: each coordinate is a Fourier series
   over k = 1..n_frequencies with Gaussian coefficients of standard
   deviation k^{-smoothness}, normalized to unit RMS per coordinate. Larger
   smoothness damps high frequencies faster and yields flatter curves. */
struct ManifoldSpec {
  int ambient_dim = 5;
  int smoothness = 3;
  std::uint64_t seed = 0;
  int n_frequencies = 32;

  void validate() const {
    check_arg(ambient_dim >= 1, "ManifoldSpec: ambient_dim must be >= 1");
    check_arg(smoothness >= 1, "ManifoldSpec: smoothness must be >= 1");
    check_arg(n_frequencies >= 1, "ManifoldSpec: n_frequencies must be >= 1");
  }
};

class ManifoldSampler {
 public:
  explicit ManifoldSampler(const ManifoldSpec& spec);

  VectorXd at(double s) const;  // position on the curve, s in [0,1)
  VectorXd sample(Rng& rng) const { return at(rng.uniform()); }
  int dim() const { return static_cast<int>(cos_amp_.rows()); }

 private:
  MatrixXd cos_amp_;  // d x K
  MatrixXd sin_amp_;
};

inline ManifoldSampler generate_manifold_sampler(const ManifoldSpec& spec) {
  return ManifoldSampler(spec);
}

// Mixing matrix with i.i.d. rows uniform on the unit sphere S^{cols-1}.
MatrixXd sample_mixing_matrix(Rng& rng, int rows = 3, int cols = 5);

enum class MixingKind { kContrastive, kMixed, kMixedIndependent };

std::string to_string(MixingKind kind);
MixingKind mixing_kind_from_string(const std::string& s);

/* View construction coefficients c^{ab}:
   contrastive        c = 1 if b <= a else 0   (shared base matrix)
   mixed              c = 1 if b == a else f_mix (shared base matrix)
   mixed-independent  c = 1 everywhere, base matrix redrawn per source. */
struct MixingSpec {
  MixingKind kind = MixingKind::kContrastive;
  int n_views = 3;
  int n_sources = 3;
  double f_mix = 0.0;
  int row_dim = 3;

  void validate() const;
  double coefficient(int view, int source) const;  // zero-based indices
};

struct ViewData {
  int view_id = 0;  // zero-based
  MatrixXd y;       // n x d_alpha
  // Per source: n x (d_alpha * d_beta), each row a row-major flattened A.
  std::vector<MatrixXd> mixing;
  double sigma_y = 0.01;
  bool has_truth = false;
  std::vector<MatrixXd> truth;  // per source, n x d_beta; evaluation only

  Eigen::Index size() const { return y.rows(); }
  Observation observation(Eigen::Index i) const;
  // Guarded accessor: truth never feeds training paths.
  const MatrixXd& true_sources(int source) const;
};

struct Dataset {
  MixingSpec mixing;
  std::vector<int> source_dims;
  std::vector<int> smoothness;
  double sigma_y = 0.01;
  std::uint64_t seed = 0;
  std::vector<ViewData> views;

  int n_sources() const { return mixing.n_sources; }
};

ViewData build_view(const MixingSpec& spec, std::span<const ManifoldSampler> manifolds,
                    Eigen::Index n, double sigma_y, Rng& rng, int view, bool keep_truth = true);

Dataset build_dataset(const MixingSpec& spec, std::span<const ManifoldSpec> manifold_specs,
                      Eigen::Index n_per_view, double sigma_y, std::uint64_t seed);

// One binary file per view: magic, JSON header, little-endian f64 payload.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir, bool allow_truth);

}  // namespace mvss
