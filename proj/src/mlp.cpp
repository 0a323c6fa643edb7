#include "mvss/mlp.hpp"

namespace mvss {

template <typename Scalar>
MlpDenoiserT<Scalar>::MlpDenoiserT(MlpConfig cfg, NoiseSchedule schedule, std::uint64_t init_seed)
    : cfg_(cfg), schedule_(schedule) {
  cfg_.validate();
  build_layout();
  params_.setZero(layout_.total);

  Rng rng(Rng::mix64(init_seed ^ 0x6d6c70u));
  auto fill_gaussian = [&](Eigen::Index off, Eigen::Index rows, Eigen::Index cols, double std) {
    Eigen::Map<Mat> w(params_.data() + off, rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) w(i, j) = static_cast<Scalar>(std * rng.normal());
  };

  const int h = cfg_.hidden_width;
  for (int l = 0; l < cfg_.hidden_layers; ++l) {
    const auto& off = layout_.hidden[l];
    fill_gaussian(off.w, h, off.in_features, 1.0 / std::sqrt(double(off.in_features)));
    if (cfg_.layer_norm)
      Eigen::Map<Vec>(params_.data() + off.ln_gamma, h).setOnes();
    if (cfg_.conditioning == Conditioning::kFilm) {
      // Zero-initialized FiLM maps with unit scale bias: identity at start.
      Eigen::Map<Vec>(params_.data() + off.film_sb, h).setOnes();
    }
  }
  fill_gaussian(layout_.out_w, cfg_.dim, h, 1.0 / std::sqrt(double(h)));
}

template <typename Scalar>
void MlpDenoiserT<Scalar>::build_layout() {
  const int h = cfg_.hidden_width;
  const int e = cfg_.embed_features;
  const bool film = cfg_.conditioning == Conditioning::kFilm;
  const int d_in0 = film ? cfg_.dim : cfg_.dim + e;

  Eigen::Index at = 0;
  auto take = [&at](Eigen::Index n) {
    const Eigen::Index o = at;
    at += n;
    return o;
  };

  layout_.hidden.clear();
  for (int l = 0; l < cfg_.hidden_layers; ++l) {
    typename Layout::LayerOffsets off{};
    off.in_features = (l == 0) ? d_in0 : h;
    off.w = take(Eigen::Index(h) * off.in_features);
    off.b = take(h);
    if (cfg_.layer_norm) {
      off.ln_gamma = take(h);
      off.ln_delta = take(h);
    }
    if (film) {
      off.film_sw = take(Eigen::Index(h) * e);
      off.film_sb = take(h);
      off.film_tw = take(Eigen::Index(h) * e);
      off.film_tb = take(h);
    }
    layout_.hidden.push_back(off);
  }
  layout_.out_w = take(Eigen::Index(cfg_.dim) * h);
  layout_.out_b = take(cfg_.dim);
  layout_.total = at;
}

template <typename Scalar>
typename MlpDenoiserT<Scalar>::Mat MlpDenoiserT<Scalar>::sinusoidal_embedding(
    const Arr& c_noise) const {
  const int half = cfg_.embed_features / 2;
  const Eigen::Index n = c_noise.size();
  Mat emb(n, cfg_.embed_features);
  const double log_max_period = std::log(1e4);
  for (int k = 0; k < half; ++k) {
    const Scalar freq = static_cast<Scalar>(std::exp(-log_max_period * k / half));
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar u = c_noise[i] * freq;
      emb(i, k) = std::cos(u);
      emb(i, half + k) = std::sin(u);
    }
  }
  return emb;
}

template <typename Scalar>
void MlpDenoiserT<Scalar>::forward(const Mat& xt, const Vec& sigma, Workspace& ws) const {
  check_arg(xt.cols() == cfg_.dim, "MlpDenoiser: state dimension mismatch");
  check_arg(xt.rows() == sigma.size(), "MlpDenoiser: sigma rows mismatch");
  const Eigen::Index n = xt.rows();
  const int h = cfg_.hidden_width;
  const bool film = cfg_.conditioning == Conditioning::kFilm;

  ws.sigma = sigma;
  ws.x = xt;
  const Arr s = sigma.array();
  check_arg((s > Scalar(0)).all(), "MlpDenoiser: sigma must be positive");
  const Scalar sd = static_cast<Scalar>(sigma_data_);
  const Arr denom2 = s * s + sd * sd;
  const Arr denom = denom2.sqrt();
  ws.c_skip = (sd * sd) / denom2;
  ws.c_out = s * sd / denom;
  ws.c_in = denom.inverse();
  const Arr c_noise = s.log() / Scalar(4);
  ws.emb = sinusoidal_embedding(c_noise);

  if (film) {
    ws.input = (xt.array().colwise() * ws.c_in).matrix();
  } else {
    ws.input.resize(n, cfg_.dim + cfg_.embed_features);
    ws.input.leftCols(cfg_.dim) = (xt.array().colwise() * ws.c_in).matrix();
    ws.input.rightCols(cfg_.embed_features) = ws.emb;
  }

  ws.layers.resize(cfg_.hidden_layers);
  const Mat* h_in = &ws.input;
  for (int l = 0; l < cfg_.hidden_layers; ++l) {
    const auto& off = layout_.hidden[l];
    auto& lw = ws.layers[l];
    Eigen::Map<const Mat> w(params_.data() + off.w, h, off.in_features);
    Eigen::Map<const Vec> b(params_.data() + off.b, h);

    lw.z.noalias() = (*h_in) * w.transpose();
    lw.z.rowwise() += b.transpose();

    if (film) {
      Eigen::Map<const Mat> sw(params_.data() + off.film_sw, h, cfg_.embed_features);
      Eigen::Map<const Vec> sb(params_.data() + off.film_sb, h);
      Eigen::Map<const Mat> tw(params_.data() + off.film_tw, h, cfg_.embed_features);
      Eigen::Map<const Vec> tb(params_.data() + off.film_tb, h);
      lw.z_raw = lw.z;
      lw.film_scale.noalias() = ws.emb * sw.transpose();
      lw.film_scale.rowwise() += sb.transpose();
      Mat shift = ws.emb * tw.transpose();
      shift.rowwise() += tb.transpose();
      lw.z = (lw.film_scale.array() * lw.z_raw.array() + shift.array()).matrix();
    }

    if (cfg_.activation == Activation::kSilu) {
      lw.act = (lw.z.array() / (Scalar(1) + (-lw.z.array()).exp())).matrix();
    } else {
      lw.act = lw.z;
    }

    if (cfg_.layer_norm) {
      Eigen::Map<const Vec> gamma(params_.data() + off.ln_gamma, h);
      Eigen::Map<const Vec> delta(params_.data() + off.ln_delta, h);
      const Arr mean = lw.act.rowwise().mean().array();
      Mat centered = (lw.act.array().colwise() - mean).matrix();
      const Arr var = centered.array().square().rowwise().mean();
      lw.inv_std = (var + Scalar(kLnEps)).rsqrt();
      lw.xhat = (centered.array().colwise() * lw.inv_std).matrix();
      lw.out = (lw.xhat.array().rowwise() * gamma.transpose().array()).matrix();
      lw.out.rowwise() += delta.transpose();
    } else {
      lw.out = lw.act;
    }
    h_in = &lw.out;
  }

  Eigen::Map<const Mat> wout(params_.data() + layout_.out_w, cfg_.dim, h);
  Eigen::Map<const Vec> bout(params_.data() + layout_.out_b, cfg_.dim);
  ws.raw_out.noalias() = (*h_in) * wout.transpose();
  ws.raw_out.rowwise() += bout.transpose();

  ws.denoised = (ws.x.array().colwise() * ws.c_skip).matrix() +
                (ws.raw_out.array().colwise() * ws.c_out).matrix();
}

template <typename Scalar>
typename MlpDenoiserT<Scalar>::Mat MlpDenoiserT<Scalar>::backward(const Workspace& ws,
                                                                  const Mat& cotangent,
                                                                  Vec* param_grad) const {
  check_arg(cotangent.rows() == ws.x.rows() && cotangent.cols() == cfg_.dim,
            "MlpDenoiser: cotangent shape mismatch");
  const int h = cfg_.hidden_width;
  const bool film = cfg_.conditioning == Conditioning::kFilm;
  if (param_grad != nullptr)
    check_arg(param_grad->size() == layout_.total, "MlpDenoiser: gradient buffer size mismatch");

  // d(denoised)/d(raw_out) = c_out per row.
  Mat g = (cotangent.array().colwise() * ws.c_out).matrix();

  const Mat& h_last = cfg_.hidden_layers > 0 ? ws.layers.back().out : ws.input;
  Eigen::Map<const Mat> wout(params_.data() + layout_.out_w, cfg_.dim, h);
  if (param_grad != nullptr) {
    Eigen::Map<Mat> dwout(param_grad->data() + layout_.out_w, cfg_.dim, h);
    Eigen::Map<Vec> dbout(param_grad->data() + layout_.out_b, cfg_.dim);
    dwout.noalias() += g.transpose() * h_last;
    dbout += g.colwise().sum().transpose();
  }
  Mat grad = g * wout;  // B x h

  for (int l = cfg_.hidden_layers - 1; l >= 0; --l) {
    const auto& off = layout_.hidden[l];
    const auto& lw = ws.layers[l];

    if (cfg_.layer_norm) {
      Eigen::Map<const Vec> gamma(params_.data() + off.ln_gamma, h);
      if (param_grad != nullptr) {
        Eigen::Map<Vec> dgamma(param_grad->data() + off.ln_gamma, h);
        Eigen::Map<Vec> ddelta(param_grad->data() + off.ln_delta, h);
        dgamma += (grad.array() * lw.xhat.array()).colwise().sum().matrix().transpose();
        ddelta += grad.colwise().sum().transpose();
      }
      Mat gg = (grad.array().rowwise() * gamma.transpose().array()).matrix();
      const Arr m1 = gg.rowwise().mean().array();
      const Arr m2 = (gg.array() * lw.xhat.array()).rowwise().mean();
      grad = (((gg.array().colwise() - m1) - lw.xhat.array().colwise() * m2).colwise() *
              lw.inv_std)
                 .matrix();
    }

    if (cfg_.activation == Activation::kSilu) {
      const auto z = lw.z.array();
      const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> sig =
          (Scalar(1) + (-z).exp()).inverse();
      grad = (grad.array() * sig * (Scalar(1) + z * (Scalar(1) - sig))).matrix();
    }

    if (film) {
      if (param_grad != nullptr) {
        Eigen::Map<Mat> dsw(param_grad->data() + off.film_sw, h, cfg_.embed_features);
        Eigen::Map<Vec> dsb(param_grad->data() + off.film_sb, h);
        Eigen::Map<Mat> dtw(param_grad->data() + off.film_tw, h, cfg_.embed_features);
        Eigen::Map<Vec> dtb(param_grad->data() + off.film_tb, h);
        Mat dscale = (grad.array() * lw.z_raw.array()).matrix();
        dsw.noalias() += dscale.transpose() * ws.emb;
        dsb += dscale.colwise().sum().transpose();
        dtw.noalias() += grad.transpose() * ws.emb;
        dtb += grad.colwise().sum().transpose();
      }
      grad = (grad.array() * lw.film_scale.array()).matrix();
    }

    Eigen::Map<const Mat> w(params_.data() + off.w, h, off.in_features);
    const Mat& h_in = (l == 0) ? ws.input : ws.layers[l - 1].out;
    if (param_grad != nullptr) {
      Eigen::Map<Mat> dw(param_grad->data() + off.w, h, off.in_features);
      Eigen::Map<Vec> db(param_grad->data() + off.b, h);
      dw.noalias() += grad.transpose() * h_in;
      db += grad.colwise().sum().transpose();
    }
    Mat prev = grad * w;
    grad.swap(prev);
  }

  // Input path: through c_in scaling (embedding columns carry no x-gradient)
  // plus the skip connection.
  Mat dx = (grad.leftCols(cfg_.dim).array().colwise() * ws.c_in).matrix();
  dx += (cotangent.array().colwise() * ws.c_skip).matrix();
  return dx;
}

template <typename Scalar>
double MlpDenoiserT<Scalar>::weighted_loss_and_grad(const Workspace& ws, const Mat& x0,
                                                    Vec* param_grad) const {
  check_arg(x0.rows() == ws.x.rows() && x0.cols() == cfg_.dim,
            "MlpDenoiser: target shape mismatch");
  const Eigen::Index n = ws.x.rows();
  Mat residual = ws.denoised - x0;
  const Arr w = ws.c_out.square().inverse();  // lambda(t) = 1/c_out^2
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    loss += static_cast<double>(w[i]) * static_cast<double>(residual.row(i).squaredNorm());
  if (param_grad != nullptr) {
    Mat cot = (residual.array().colwise() * (w * Scalar(2))).matrix();
    backward(ws, cot, param_grad);
  }
  return loss;
}

template <typename Scalar>
VectorXd MlpDenoiserT<Scalar>::export_weights_row_major() const {
  VectorXd out(params_.size());
  Eigen::Index at = 0;
  auto put_matrix = [&](Eigen::Index off, Eigen::Index rows, Eigen::Index cols) {
    Eigen::Map<const Mat> w(params_.data() + off, rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) out[at++] = static_cast<double>(w(i, j));
  };
  auto put_vector = [&](Eigen::Index off, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) out[at++] = static_cast<double>(params_[off + i]);
  };
  const int h = cfg_.hidden_width;
  for (const auto& off : layout_.hidden) {
    put_matrix(off.w, h, off.in_features);
    put_vector(off.b, h);
    if (cfg_.layer_norm) {
      put_vector(off.ln_gamma, h);
      put_vector(off.ln_delta, h);
    }
    if (cfg_.conditioning == Conditioning::kFilm) {
      put_matrix(off.film_sw, h, cfg_.embed_features);
      put_vector(off.film_sb, h);
      put_matrix(off.film_tw, h, cfg_.embed_features);
      put_vector(off.film_tb, h);
    }
  }
  put_matrix(layout_.out_w, cfg_.dim, h);
  put_vector(layout_.out_b, cfg_.dim);
  return out;
}

template <typename Scalar>
void MlpDenoiserT<Scalar>::import_weights_row_major(const VectorXd& flat) {
  check_arg(flat.size() == params_.size(), "MlpDenoiser: weight blob size mismatch");
  Eigen::Index at = 0;
  auto get_matrix = [&](Eigen::Index off, Eigen::Index rows, Eigen::Index cols) {
    Eigen::Map<Mat> w(params_.data() + off, rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) w(i, j) = static_cast<Scalar>(flat[at++]);
  };
  auto get_vector = [&](Eigen::Index off, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) params_[off + i] = static_cast<Scalar>(flat[at++]);
  };
  const int h = cfg_.hidden_width;
  for (const auto& off : layout_.hidden) {
    get_matrix(off.w, h, off.in_features);
    get_vector(off.b, h);
    if (cfg_.layer_norm) {
      get_vector(off.ln_gamma, h);
      get_vector(off.ln_delta, h);
    }
    if (cfg_.conditioning == Conditioning::kFilm) {
      get_matrix(off.film_sw, h, cfg_.embed_features);
      get_vector(off.film_sb, h);
      get_matrix(off.film_tw, h, cfg_.embed_features);
      get_vector(off.film_tb, h);
    }
  }
  get_matrix(layout_.out_w, cfg_.dim, h);
  get_vector(layout_.out_b, cfg_.dim);
}

namespace {

template <typename Scalar>
class MlpEval : public DenoiseEval {
 public:
  MlpEval(const MlpDenoiserT<Scalar>& model, const MatrixXd& xt, const VectorXd& sigma)
      : model_(model) {
    model_.forward(xt.cast<Scalar>(), sigma.cast<Scalar>(), ws_);
    value_ = ws_.denoised.template cast<double>();
    detail::count_denoise(static_cast<std::uint64_t>(xt.rows()));
  }

  const MatrixXd& value() const override { return value_; }

  MatrixXd vjp(const MatrixXd& cotangent) const override {
    detail::count_vjp(static_cast<std::uint64_t>(cotangent.rows()));
    return model_.backward(ws_, cotangent.cast<Scalar>(), nullptr).template cast<double>();
  }

 private:
  const MlpDenoiserT<Scalar>& model_;
  typename MlpDenoiserT<Scalar>::Workspace ws_;
  MatrixXd value_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<DenoiseEval> MlpDenoiserT<Scalar>::evaluate(const MatrixXd& xt,
                                                            const VectorXd& sigma) const {
  return std::make_unique<MlpEval<Scalar>>(*this, xt, sigma);
}

template class MlpDenoiserT<double>;
template class MlpDenoiserT<float>;

}  // namespace mvss
