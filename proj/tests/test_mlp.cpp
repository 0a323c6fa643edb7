#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mvss/serialize.hpp"
#include "mvss/train.hpp"
#include "test_util.hpp"

using namespace mvss;

namespace {

MlpConfig toy_config() {
  MlpConfig cfg;
  cfg.dim = 2;
  cfg.hidden_width = 4;
  cfg.hidden_layers = 2;
  cfg.embed_features = 4;
  return cfg;
}

// Loss of one fixed diffused batch as a function of the parameters alone.
double batch_loss(const MlpDenoiser& model, const MatrixXd& xt, const VectorXd& sigma,
                  const MatrixXd& x0) {
  MlpDenoiser::Workspace ws;
  model.forward(xt, sigma, ws);
  return model.weighted_loss_and_grad(ws, x0, nullptr);
}

}  // namespace

TEST_CASE("training gradient matches central finite differences on every weight") {
  for (Conditioning cond : {Conditioning::kConcat, Conditioning::kFilm}) {
    MlpConfig cfg = toy_config();
    cfg.conditioning = cond;
    NoiseSchedule sched(1e-3, 10.0);
    MlpDenoiser model(cfg, sched, 42);

    Rng rng(7);
    const int n = 6;
    MatrixXd x0(n, cfg.dim), xt(n, cfg.dim);
    VectorXd sigma(n);
    for (int i = 0; i < n; ++i) {
      sigma[i] = sched.sigma(rng.uniform());
      for (int j = 0; j < cfg.dim; ++j) {
        x0(i, j) = rng.normal();
        xt(i, j) = x0(i, j) + sigma[i] * rng.normal();
      }
    }

    MlpDenoiser::Workspace ws;
    model.forward(xt, sigma, ws);
    VectorXd grad = VectorXd::Zero(model.parameter_count());
    model.weighted_loss_and_grad(ws, x0, &grad);

    double max_rel = 0.0;
    for (Eigen::Index k = 0; k < model.parameter_count(); ++k) {
      const double w = model.parameters()[k];
      const double h = 1e-5 * std::max(1.0, std::abs(w));
      model.parameters()[k] = w + h;
      const double up = batch_loss(model, xt, sigma, x0);
      model.parameters()[k] = w - h;
      const double down = batch_loss(model, xt, sigma, x0);
      model.parameters()[k] = w;
      const double fd = (up - down) / (2.0 * h);
      max_rel = std::max(max_rel, std::abs(fd - grad[k]) / std::max(std::abs(fd), 1e-6));
    }
    CHECK(max_rel < 1e-4);
  }
}

TEST_CASE("denoiser vjp matches central finite differences in the inputs") {
  for (Conditioning cond : {Conditioning::kConcat, Conditioning::kFilm}) {
    MlpConfig cfg = toy_config();
    cfg.conditioning = cond;
    NoiseSchedule sched(1e-3, 10.0);
    MlpDenoiser model(cfg, sched, 5);

    Rng rng(13);
    const VectorXd xt = rng.normal_vector(cfg.dim);
    const VectorXd v = rng.normal_vector(cfg.dim);
    const double sigma = 0.37;
    const VectorXd got = model.vjp(xt, sigma, v);

    const double h = 1e-4;
    for (int i = 0; i < cfg.dim; ++i) {
      VectorXd up = xt, down = xt;
      up[i] += h;
      down[i] -= h;
      const double fd = (v.dot(model.denoise(up, sigma)) - v.dot(model.denoise(down, sigma))) /
                        (2.0 * h);
      CHECK(testing::rel_error(got[i], fd, 1e-8) < 1e-3);
    }
  }
}

TEST_CASE("vjp of a linear network equals the composed weight-matrix Jacobian") {
  MlpConfig cfg = toy_config();
  cfg.activation = Activation::kIdentity;
  cfg.layer_norm = false;
  NoiseSchedule sched(1e-3, 10.0);
  MlpDenoiser model(cfg, sched, 9);
  model.set_sigma_data(1.4);

  // Recover the per-layer matrices from the checkpoint layout (row-major
  // blocks in declaration order: W, b per layer, then the output pair).
  const VectorXd flat = model.export_weights_row_major();
  const int h = cfg.hidden_width;
  const int in0 = cfg.dim + cfg.embed_features;
  Eigen::Index at = 0;
  auto take_matrix = [&](int rows, int cols) {
    MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = flat[at++];
    return m;
  };
  const MatrixXd w1 = take_matrix(h, in0);
  at += h;  // b1
  const MatrixXd w2 = take_matrix(h, h);
  at += h;  // b2
  const MatrixXd wout = take_matrix(cfg.dim, h);

  const double sigma = 0.9;
  const double sd = model.sigma_data();
  const double c_skip = sd * sd / (sigma * sigma + sd * sd);
  const double c_out = sigma * sd / std::sqrt(sigma * sigma + sd * sd);
  const double c_in = 1.0 / std::sqrt(sigma * sigma + sd * sd);
  const MatrixXd jac = c_skip * MatrixXd::Identity(cfg.dim, cfg.dim) +
                       c_out * c_in * (wout * w2 * w1.leftCols(cfg.dim));

  Rng rng(3);
  const VectorXd xt = rng.normal_vector(cfg.dim);
  const VectorXd v = rng.normal_vector(cfg.dim);
  const VectorXd got = model.vjp(xt, sigma, v);
  const VectorXd expected = jac.transpose() * v;
  CHECK((got - expected).norm() < 1e-12 * std::max(1.0, expected.norm()));
}

TEST_CASE("vjp linearity holds to machine precision") {
  MlpConfig cfg = toy_config();
  NoiseSchedule sched(1e-3, 10.0);
  MlpDenoiser model(cfg, sched, 21);
  Rng rng(2);
  const VectorXd xt = rng.normal_vector(cfg.dim);
  const VectorXd v1 = rng.normal_vector(cfg.dim), v2 = rng.normal_vector(cfg.dim);
  const VectorXd lhs = model.vjp(xt, 0.5, 2.0 * v1 - 0.3 * v2);
  const VectorXd rhs = 2.0 * model.vjp(xt, 0.5, v1) - 0.3 * model.vjp(xt, 0.5, v2);
  CHECK((lhs - rhs).norm() < 1e-12 * std::max(1.0, rhs.norm()));
}

TEST_CASE("a model that reproduces x0 exactly gives zero loss and zero gradient") {
  MlpConfig cfg = toy_config();
  NoiseSchedule sched(1e-3, 10.0);
  MlpDenoiser model(cfg, sched, 33);
  Rng rng(4);
  MatrixXd xt(5, cfg.dim);
  VectorXd sigma(5);
  for (int i = 0; i < 5; ++i) {
    sigma[i] = sched.sigma(rng.uniform());
    for (int j = 0; j < cfg.dim; ++j) xt(i, j) = rng.normal();
  }
  MlpDenoiser::Workspace ws;
  model.forward(xt, sigma, ws);
  VectorXd grad = VectorXd::Zero(model.parameter_count());
  // Oracle wiring: the target IS the model output, so the residual vanishes
  // and the gradient through the c_out path is identically zero.
  const double loss = model.weighted_loss_and_grad(ws, ws.denoised, &grad);
  CHECK(loss == 0.0);
  CHECK(grad.norm() == 0.0);
}

TEST_CASE("score_matching_loss: contract checks and determinism") {
  MlpConfig cfg = toy_config();
  NoiseSchedule sched(1e-3, 10.0);
  MlpDenoiser model(cfg, sched, 1);
  TimeSampler ts;
  Rng r1(10), r2(10);
  MatrixXd batch = MatrixXd::Random(8, cfg.dim);
  auto [l1, g1] = score_matching_loss(model, batch, sched, ts, r1);
  auto [l2, g2] = score_matching_loss(model, batch, sched, ts, r2);
  CHECK(l1 == l2);
  CHECK((g1 - g2).norm() == 0.0);
  CHECK_THROWS_AS(score_matching_loss(model, MatrixXd(0, cfg.dim), sched, ts, r1),
                  std::invalid_argument);
}

TEST_CASE("training on a fixed batch reduces the loss") {
  MlpConfig cfg;
  cfg.dim = 2;
  cfg.hidden_width = 32;
  cfg.hidden_layers = 2;
  cfg.embed_features = 8;
  NoiseSchedule sched(1e-3, 10.0);
  MlpDenoiser model(cfg, sched, 77);

  // Points on a circle, the 1D-manifold toy in d=2.
  const int n = 256;
  MatrixXd data(n, 2);
  for (int i = 0; i < n; ++i) {
    const double a = 2 * M_PI * i / n;
    data(i, 0) = std::cos(a);
    data(i, 1) = std::sin(a);
  }

  TimeSampler ts;
  Rng eval_rng(55);
  const double loss_before = score_matching_loss(model, data, sched, ts, eval_rng).first;

  TrainingConfig tcfg;
  tcfg.steps_per_lap = 1000;
  tcfg.batch_size = 128;
  tcfg.lr_initial = 1e-3;
  tcfg.lr_final = 1e-4;
  TrainState<double> state(model.parameter_count(), tcfg);
  Rng train_rng(66);
  train_lap(state, model, data, train_rng);

  Rng eval_rng2(55);
  const double loss_after = score_matching_loss(model, data, sched, ts, eval_rng2).first;
  CHECK(loss_after < loss_before);
}

TEST_CASE("train_lap drives the denoiser toward the Gaussian posterior mean") {
  MlpConfig cfg;
  cfg.dim = 2;
  cfg.hidden_width = 64;
  cfg.hidden_layers = 3;
  cfg.embed_features = 16;
  NoiseSchedule sched(1e-3, 10.0);
  MlpDenoiser model(cfg, sched, 3);

  Rng rng(8);
  const int n = 16384;
  MatrixXd data(n, 2);
  for (int i = 0; i < n; ++i)
    data.row(i) = rng.normal_vector(2).transpose();

  TrainingConfig tcfg;
  tcfg.steps_per_lap = 4000;
  tcfg.batch_size = 256;
  tcfg.lr_initial = 1e-3;
  tcfg.lr_final = 1e-5;
  TrainState<double> state(model.parameter_count(), tcfg);
  Rng train_rng(9);
  train_lap(state, model, data, train_rng);

  // For x0 ~ N(0, I): E[x0|xt] = xt/(1+sigma^2).
  double mad = 0.0;
  int count = 0;
  for (double sigma : {0.1, 0.3, 1.0, 3.0}) {
    for (double x : {-1.5, -0.5, 0.5, 1.5}) {
      for (double y : {-1.0, 0.0, 1.0}) {
        VectorXd xt(2);
        xt << x, y;
        const VectorXd got = model.denoise(xt, sigma);
        const VectorXd want = xt / (1.0 + sigma * sigma);
        mad += (got - want).cwiseAbs().sum();
        count += 2;
      }
    }
  }
  CHECK(mad / count < 0.05);
}

TEST_CASE("learning rate endpoints and gradient clipping") {
  TrainingConfig cfg;
  cfg.steps_per_lap = 1000;
  cfg.lr_initial = 1e-3;
  cfg.lr_final = 1e-6;
  TrainState<double> state(4, cfg);
  CHECK(state.learning_rate(0) == 1e-3);
  CHECK(state.learning_rate(cfg.steps_per_lap - 1) == 1e-6);

  VectorXd g(2);
  g << 6.0, 8.0;  // norm 10
  const double pre = clip_gradient_norm(g, 1.0);
  CHECK(pre == doctest::Approx(10.0));
  CHECK(g.norm() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("train_lap aborts on non-finite loss with a diagnostic") {
  MlpConfig cfg = toy_config();
  NoiseSchedule sched(1e-3, 10.0);
  MlpDenoiser model(cfg, sched, 2);
  model.parameters().array() = std::numeric_limits<double>::quiet_NaN();
  TrainingConfig tcfg;
  tcfg.steps_per_lap = 2;
  tcfg.batch_size = 4;
  TrainState<double> state(model.parameter_count(), tcfg);
  Rng rng(1);
  MatrixXd data = MatrixXd::Random(16, cfg.dim);
  CHECK_THROWS_AS(train_lap(state, model, data, rng), SolverError);
}

TEST_CASE("checkpoint round trip preserves the model in both precisions") {
  const auto dir = std::filesystem::temp_directory_path() / "mvss_ckpt_test";
  std::filesystem::create_directories(dir);
  NoiseSchedule sched(5e-3, 15.0);

  MlpConfig cfg = toy_config();
  cfg.conditioning = Conditioning::kFilm;
  MlpDenoiser model(cfg, sched, 123);
  model.set_sigma_data(1.23);
  save_checkpoint(dir / "m.ckpt", model, sched);
  auto loaded = load_checkpoint(dir / "m.ckpt");
  CHECK(loaded.schedule.sigma_min() == sched.sigma_min());
  auto* mlp = dynamic_cast<MlpDenoiser*>(loaded.model.get());
  REQUIRE(mlp != nullptr);
  CHECK((mlp->parameters() - model.parameters()).norm() == 0.0);
  CHECK(mlp->sigma_data() == model.sigma_data());

  MlpDenoiserF fmodel(cfg, sched, 321);
  fmodel.set_sigma_data(0.77);
  save_checkpoint(dir / "f.ckpt", fmodel, sched);
  auto floaded = load_checkpoint(dir / "f.ckpt");
  auto* fmlp = dynamic_cast<MlpDenoiserF*>(floaded.model.get());
  REQUIRE(fmlp != nullptr);
  CHECK((fmlp->parameters() - fmodel.parameters()).norm() == 0.0f);

  GaussianDenoiser g(VectorXd::Ones(3), 2.0 * MatrixXd::Identity(3, 3));
  save_checkpoint(dir / "g.ckpt", g, sched);
  auto gloaded = load_checkpoint(dir / "g.ckpt");
  auto* gg = dynamic_cast<GaussianDenoiser*>(gloaded.model.get());
  REQUIRE(gg != nullptr);
  CHECK((gg->mean() - g.mean()).norm() == 0.0);
  CHECK((gg->cov() - g.cov()).norm() == 0.0);
}

TEST_CASE("float engine agrees with the double engine to single precision") {
  MlpConfig cfg = toy_config();
  NoiseSchedule sched(1e-3, 10.0);
  MlpDenoiser dmodel(cfg, sched, 5150);
  MlpDenoiserF fmodel(cfg, sched, 1);
  fmodel.import_weights_row_major(dmodel.export_weights_row_major());
  fmodel.set_sigma_data(dmodel.sigma_data());

  Rng rng(6);
  MatrixXd xt(32, cfg.dim);
  for (int i = 0; i < 32; ++i) xt.row(i) = rng.normal_vector(cfg.dim).transpose();
  const VectorXd sigma = VectorXd::Constant(32, 0.42);
  const MatrixXd dv = dmodel.denoise(xt, sigma);
  const MatrixXd fv = fmodel.denoise(xt, sigma);
  CHECK((dv - fv).cwiseAbs().maxCoeff() < 1e-5);
}
