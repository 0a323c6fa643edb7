#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "mvss/denoiser.hpp"
#include "mvss/rng.hpp"
#include "mvss/sde.hpp"

namespace mvss {

enum class Conditioning { kConcat, kFilm };
enum class Activation { kSilu, kIdentity };

struct MlpConfig {
  int dim = 5;
  int hidden_width = 256;
  int hidden_layers = 3;
  int embed_features = 64;  // sinusoidal time-embedding width, must be even
  Conditioning conditioning = Conditioning::kConcat;
  Activation activation = Activation::kSilu;
  bool layer_norm = true;

  void validate() const {
    check_arg(dim >= 1 && hidden_width >= 1 && hidden_layers >= 1, "MlpConfig: bad sizes");
    check_arg(embed_features >= 2 && embed_features % 2 == 0,
              "MlpConfig: embed_features must be even and >= 2");
  }
};

/* Trainable denoiser d(x_t, sigma) = c_skip x_t + c_out F(c_in x_t, c_noise)
   with the usual preconditioning constants

     c_skip = sd^2/(s^2+sd^2), c_out = s sd/sqrt(s^2+sd^2),
     c_in = 1/sqrt(s^2+sd^2),  c_noise = log(s)/4,

   where sd is the data RMS estimated from the current training set. F is an
   MLP: hidden layers of dense -> (FiLM) -> activation -> layer norm, then a
   dense output. The time embedding of c_noise is either concatenated to the
   input or injected through per-layer FiLM modulation.

   All gradients are exact reverse-mode, hand-rolled per layer. One forward
   pass caches enough state that any number of vector-Jacobian products
   against the inputs can be taken afterwards. */
template <typename Scalar>
class MlpDenoiserT : public Denoiser {
 public:
  using Mat = MatrixX<Scalar>;
  using Vec = VectorX<Scalar>;
  using Arr = ArrayX<Scalar>;

  MlpDenoiserT(MlpConfig cfg, NoiseSchedule schedule, std::uint64_t init_seed);

  int dim() const override { return cfg_.dim; }
  const MlpConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  Vec& parameters() { return params_; }
  const Vec& parameters() const { return params_; }
  Eigen::Index parameter_count() const { return params_.size(); }

  double sigma_data() const { return sigma_data_; }
  void set_sigma_data(double sd) {
    check_arg(sd > 0.0, "MlpDenoiser: sigma_data must be positive");
    sigma_data_ = sd;
  }

  // Weight-matrix blocks flattened row-major (the checkpoint layout).
  VectorXd export_weights_row_major() const;
  void import_weights_row_major(const VectorXd& flat);

  std::unique_ptr<DenoiseEval> evaluate(const MatrixXd& xt, const VectorXd& sigma) const override;

  struct Workspace {
    Vec sigma;                      // B
    Arr c_in, c_out, c_skip;        // B
    Mat x;                          // B x d raw states
    Mat emb;                        // B x E
    Mat input;                      // B x in_features
    struct Layer {
      Mat z_raw;        // dense output (pre-FiLM), only stored when FiLM is on
      Mat film_scale;   // B x H
      Mat z;            // pre-activation (post-FiLM)
      Mat act;          // post-activation, pre-norm (input of layer norm)
      Mat xhat;         // normalized activations
      Arr inv_std;      // per row
      Mat out;          // layer output (input to the next dense)
    };
    std::vector<Layer> layers;
    Mat raw_out;    // B x d network output F
    Mat denoised;   // B x d
  };

  void forward(const Mat& xt, const Vec& sigma, Workspace& ws) const;

  /* Reverse pass from a cotangent on the denoised output. Returns the
     input-gradient rows v^T dD/dx; when param_grad is non-null also
     accumulates dL/dtheta into it (caller zeroes it first). */
  Mat backward(const Workspace& ws, const Mat& cotangent, Vec* param_grad) const;

  /* Batch loss sum_b |d_b - x0_b|^2 / c_out(s_b)^2 over the rows of a
     previous forward pass (no mean; callers normalize) and, when param_grad
     is non-null, its accumulated parameter gradient. */
  double weighted_loss_and_grad(const Workspace& ws, const Mat& x0, Vec* param_grad) const;

  static Arr silu(const Arr& z) { return z / (1.0 + (-z).exp()); }

 private:
  struct ParamView {
    Eigen::Map<Mat> w;
    Eigen::Map<Vec> b;
  };

  struct Layout {
    struct LayerOffsets {
      Eigen::Index w, b;                  // dense
      Eigen::Index ln_gamma, ln_delta;    // layer norm (if enabled)
      Eigen::Index film_sw, film_sb;      // FiLM scale map (if enabled)
      Eigen::Index film_tw, film_tb;      // FiLM shift map
      Eigen::Index in_features;
    };
    std::vector<LayerOffsets> hidden;
    Eigen::Index out_w, out_b;
    Eigen::Index total;
  };

  void build_layout();
  Mat sinusoidal_embedding(const Arr& c_noise) const;

  MlpConfig cfg_;
  NoiseSchedule schedule_;
  Vec params_;
  Layout layout_;
  double sigma_data_ = 1.0;
  static constexpr double kLnEps = 1e-6;
};

using MlpDenoiser = MlpDenoiserT<double>;
using MlpDenoiserF = MlpDenoiserT<float>;

extern template class MlpDenoiserT<double>;
extern template class MlpDenoiserT<float>;

}  // namespace mvss
