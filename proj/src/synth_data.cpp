#include "mvss/synth_data.hpp"

#include <fstream>

#include "json.hpp"

namespace mvss {

using nlohmann::json;

ManifoldSampler::ManifoldSampler(const ManifoldSpec& spec) {
  spec.validate();
  Rng rng(Rng::mix64(spec.seed ^ 0x6d616e69u));
  const int d = spec.ambient_dim;
  const int k_max = spec.n_frequencies;
  cos_amp_.resize(d, k_max);
  sin_amp_.resize(d, k_max);
  for (int j = 0; j < d; ++j) {
    double power = 0.0;
    for (int k = 1; k <= k_max; ++k) {
      const double scale = std::pow(static_cast<double>(k), -double(spec.smoothness));
      cos_amp_(j, k - 1) = scale * rng.normal();
      sin_amp_(j, k - 1) = scale * rng.normal();
      power += cos_amp_(j, k - 1) * cos_amp_(j, k - 1) + sin_amp_(j, k - 1) * sin_amp_(j, k - 1);
    }
    // E_s[x_j(s)^2] = sum_k (a^2 + b^2)/2; scale each coordinate to unit RMS.
    const double rms = std::sqrt(0.5 * power);
    cos_amp_.row(j) /= rms;
    sin_amp_.row(j) /= rms;
  }
}

VectorXd ManifoldSampler::at(double s) const {
  const int d = dim();
  const int k_max = static_cast<int>(cos_amp_.cols());
  VectorXd x = VectorXd::Zero(d);
  for (int k = 1; k <= k_max; ++k) {
    const double a = 6.283185307179586476925286766559 * k * s;
    const double c = std::cos(a);
    const double sn = std::sin(a);
    x += c * cos_amp_.col(k - 1) + sn * sin_amp_.col(k - 1);
  }
  return x;
}

MatrixXd sample_mixing_matrix(Rng& rng, int rows, int cols) {
  MatrixXd a(rows, cols);
  for (int i = 0; i < rows; ++i) {
    VectorXd v = rng.normal_vector(cols);
    double n = v.norm();
    while (n == 0.0) {  // astronomically unlikely; redraw
      v = rng.normal_vector(cols);
      n = v.norm();
    }
    a.row(i) = v.transpose() / n;
  }
  return a;
}

std::string to_string(MixingKind kind) {
  switch (kind) {
    case MixingKind::kContrastive: return "contrastive";
    case MixingKind::kMixed: return "mixed";
    case MixingKind::kMixedIndependent: return "mixed-independent";
  }
  return "unknown";
}

MixingKind mixing_kind_from_string(const std::string& s) {
  if (s == "contrastive") return MixingKind::kContrastive;
  if (s == "mixed") return MixingKind::kMixed;
  if (s == "mixed-independent") return MixingKind::kMixedIndependent;
  throw std::invalid_argument("unknown mixing kind: " + s);
}

void MixingSpec::validate() const {
  check_arg(n_views >= 1 && n_sources >= 1, "MixingSpec: counts must be positive");
  check_arg(row_dim >= 1, "MixingSpec: row_dim must be positive");
  if (kind == MixingKind::kContrastive)
    check_arg(n_views == n_sources, "MixingSpec: contrastive requires n_views == n_sources");
  check_arg(f_mix >= 0.0 && f_mix <= 1.0, "MixingSpec: f_mix must lie in [0,1]");
}

double MixingSpec::coefficient(int view, int source) const {
  switch (kind) {
    case MixingKind::kContrastive: return source <= view ? 1.0 : 0.0;
    case MixingKind::kMixed: return source == view ? 1.0 : f_mix;
    case MixingKind::kMixedIndependent: return 1.0;
  }
  return 0.0;
}

Observation ViewData::observation(Eigen::Index i) const {
  check_arg(i >= 0 && i < size(), "ViewData: sample index out of range");
  Observation obs;
  obs.y = y.row(i).transpose();
  const Eigen::Index da = y.cols();
  obs.mixing.reserve(mixing.size());
  for (const auto& block : mixing) {
    const Eigen::Index db = block.cols() / da;
    MatrixXd a(da, db);
    for (Eigen::Index r = 0; r < da; ++r) a.row(r) = block.row(i).segment(r * db, db);
    obs.mixing.push_back(std::move(a));
  }
  obs.noise_cov = sigma_y * sigma_y * MatrixXd::Identity(da, da);
  obs.view_id = view_id;
  obs.sample_id = i;
  return obs;
}

const MatrixXd& ViewData::true_sources(int source) const {
  check_arg(has_truth, "ViewData: truth not loaded (pass --allow-truth / allow_truth)");
  check_arg(source >= 0 && source < static_cast<int>(truth.size()),
            "ViewData: source index out of range");
  return truth[static_cast<std::size_t>(source)];
}

ViewData build_view(const MixingSpec& spec, std::span<const ManifoldSampler> manifolds,
                    Eigen::Index n, double sigma_y, Rng& rng, int view, bool keep_truth) {
  spec.validate();
  check_arg(static_cast<int>(manifolds.size()) == spec.n_sources,
            "build_view: one manifold per source required");
  check_arg(view >= 0 && view < spec.n_views, "build_view: view index out of range");
  check_arg(n >= 1, "build_view: n must be positive");
  check_arg(sigma_y > 0.0, "build_view: sigma_y must be positive");

  const int da = spec.row_dim;
  const int ns = spec.n_sources;
  ViewData out;
  out.view_id = view;
  out.sigma_y = sigma_y;
  out.y.resize(n, da);
  out.mixing.resize(ns);
  out.truth.resize(ns);
  for (int b = 0; b < ns; ++b) {
    out.mixing[b].resize(n, Eigen::Index(da) * manifolds[b].dim());
    out.truth[b].resize(n, manifolds[b].dim());
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    Rng sub = rng.substream({0x76696577u, static_cast<std::uint64_t>(view),
                             static_cast<std::uint64_t>(i)});
    // Fresh source draws per view; draws are never shared across views.
    std::vector<VectorXd> x(ns);
    for (int b = 0; b < ns; ++b) x[b] = manifolds[b].sample(sub);

    MatrixXd base;
    if (spec.kind != MixingKind::kMixedIndependent)
      base = sample_mixing_matrix(sub, da, manifolds[0].dim());

    VectorXd yi = VectorXd::Zero(da);
    for (int b = 0; b < ns; ++b) {
      MatrixXd a;
      if (spec.kind == MixingKind::kMixedIndependent) {
        a = sample_mixing_matrix(sub, da, manifolds[b].dim());
      } else {
        a = spec.coefficient(view, b) * base;
      }
      yi.noalias() += a * x[b];
      for (int r = 0; r < da; ++r)
        out.mixing[b].row(i).segment(Eigen::Index(r) * manifolds[b].dim(), manifolds[b].dim()) =
            a.row(r);
      out.truth[b].row(i) = x[b].transpose();
    }
    for (int r = 0; r < da; ++r) yi[r] += sigma_y * sub.normal();
    out.y.row(i) = yi.transpose();
  }

  out.has_truth = keep_truth;
  if (!keep_truth) out.truth.clear();
  return out;
}

Dataset build_dataset(const MixingSpec& spec, std::span<const ManifoldSpec> manifold_specs,
                      Eigen::Index n_per_view, double sigma_y, std::uint64_t seed) {
  spec.validate();
  check_arg(static_cast<int>(manifold_specs.size()) == spec.n_sources,
            "build_dataset: one manifold spec per source required");
  Dataset ds;
  ds.mixing = spec;
  ds.sigma_y = sigma_y;
  ds.seed = seed;

  std::vector<ManifoldSampler> manifolds;
  for (int b = 0; b < spec.n_sources; ++b) {
    ManifoldSpec ms = manifold_specs[b];
    ms.seed = Rng::mix64(seed ^ Rng::mix64(0x736f7572u + b));
    manifolds.emplace_back(ms);
    ds.source_dims.push_back(ms.ambient_dim);
    ds.smoothness.push_back(ms.smoothness);
  }

  Rng rng(seed);
  for (int a = 0; a < spec.n_views; ++a)
    ds.views.push_back(build_view(spec, manifolds, n_per_view, sigma_y, rng, a, true));
  return ds;
}

/* ---- Serialization ------------------------------------------------------ */

namespace {

constexpr char kMagic[] = "MVSSDATA1\n";

void write_matrix(std::ofstream& out, const MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
}

MatrixXd read_matrix(std::ifstream& in, Eigen::Index rows, Eigen::Index cols) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      double v;
      in.read(reinterpret_cast<char*>(&v), sizeof(double));
      m(i, j) = v;
    }
  if (!in) throw std::runtime_error("dataset payload truncated");
  return m;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& view : dataset.views) {
    json header;
    header["view_id"] = view.view_id;
    header["n"] = view.size();
    header["d_alpha"] = view.y.cols();
    header["source_dims"] = dataset.source_dims;
    header["smoothness"] = dataset.smoothness;
    header["sigma_y"] = view.sigma_y;
    header["seed"] = dataset.seed;
    header["has_truth"] = view.has_truth;
    header["mixing"] = {{"kind", to_string(dataset.mixing.kind)},
                        {"n_views", dataset.mixing.n_views},
                        {"n_sources", dataset.mixing.n_sources},
                        {"f_mix", dataset.mixing.f_mix},
                        {"row_dim", dataset.mixing.row_dim}};
    const std::string header_str = header.dump();

    const auto path = dir / ("view_" + std::to_string(view.view_id) + ".bin");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(kMagic, sizeof(kMagic) - 1);
    const std::uint64_t len = header_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_str.data(), static_cast<std::streamsize>(len));
    write_matrix(out, view.y);
    for (const auto& block : view.mixing) write_matrix(out, block);
    if (view.has_truth)
      for (const auto& block : view.truth) write_matrix(out, block);
    if (!out) throw std::runtime_error("write failed: " + path.string());
  }
}

Dataset load_dataset(const std::filesystem::path& dir, bool allow_truth) {
  Dataset ds;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("view_", 0) == 0 && entry.path().extension() == ".bin")
      files.push_back(entry.path());
  }
  check_arg(!files.empty(), "load_dataset: no view files in " + dir.string());
  std::sort(files.begin(), files.end());

  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic(sizeof(kMagic) - 1, '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (magic != kMagic) throw std::runtime_error("bad magic in " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("truncated header in " + path.string());
    const json header = json::parse(header_str);

    ViewData view;
    view.view_id = header.at("view_id").get<int>();
    const Eigen::Index n = header.at("n").get<Eigen::Index>();
    const Eigen::Index da = header.at("d_alpha").get<Eigen::Index>();
    const auto dims = header.at("source_dims").get<std::vector<int>>();
    view.sigma_y = header.at("sigma_y").get<double>();
    const bool file_truth = header.at("has_truth").get<bool>();

    view.y = read_matrix(in, n, da);
    for (int d : dims) view.mixing.push_back(read_matrix(in, n, da * d));
    if (file_truth) {
      if (allow_truth) {
        for (int d : dims) view.truth.push_back(read_matrix(in, n, d));
        view.has_truth = true;
      }  // else: truth stays on disk, never in memory
    }

    if (ds.views.empty()) {
      ds.source_dims = dims;
      ds.smoothness = header.at("smoothness").get<std::vector<int>>();
      ds.sigma_y = view.sigma_y;
      ds.seed = header.at("seed").get<std::uint64_t>();
      const auto& mix = header.at("mixing");
      ds.mixing.kind = mixing_kind_from_string(mix.at("kind").get<std::string>());
      ds.mixing.n_views = mix.at("n_views").get<int>();
      ds.mixing.n_sources = mix.at("n_sources").get<int>();
      ds.mixing.f_mix = mix.at("f_mix").get<double>();
      ds.mixing.row_dim = mix.at("row_dim").get<int>();
    }
    ds.views.push_back(std::move(view));
  }
  std::sort(ds.views.begin(), ds.views.end(),
            [](const ViewData& a, const ViewData& b) { return a.view_id < b.view_id; });
  return ds;
}

}  // namespace mvss
