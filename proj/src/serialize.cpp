#include "mvss/serialize.hpp"

#include <fstream>
#include <vector>

#include "json.hpp"

namespace mvss {

using nlohmann::json;

namespace {

constexpr char kCkptMagic[] = "MVSSCKPT1\n";
constexpr char kSampleMagic[] = "MVSSSMPL1\n";

void write_blob(std::ofstream& out, const char* magic, std::size_t magic_len,
                const json& header, const std::vector<const MatrixXd*>& blocks) {
  const std::string header_str = header.dump();
  out.write(magic, static_cast<std::streamsize>(magic_len));
  const std::uint64_t len = header_str.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_str.data(), static_cast<std::streamsize>(len));
  for (const MatrixXd* m : blocks)
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) {
        const double v = (*m)(i, j);
        out.write(reinterpret_cast<const char*>(&v), sizeof(double));
      }
}

json read_header(std::ifstream& in, const char* magic, std::size_t magic_len,
                 const std::string& path) {
  std::string m(magic_len, '\0');
  in.read(m.data(), static_cast<std::streamsize>(magic_len));
  if (!in || m != std::string(magic, magic_len))
    throw std::runtime_error("bad magic in " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated header in " + path);
  return json::parse(header_str);
}

MatrixXd read_block(std::ifstream& in, Eigen::Index rows, Eigen::Index cols,
                    const std::string& path) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      double v;
      in.read(reinterpret_cast<char*>(&v), sizeof(double));
      m(i, j) = v;
    }
  if (!in) throw std::runtime_error("truncated payload in " + path);
  return m;
}

template <typename Scalar>
bool try_save_mlp(std::ofstream& out, const Denoiser& model, const NoiseSchedule& schedule) {
  const auto* mlp = dynamic_cast<const MlpDenoiserT<Scalar>*>(&model);
  if (mlp == nullptr) return false;
  const MlpConfig& cfg = mlp->config();
  json header;
  header["version"] = 1;
  header["kind"] = "mlp";
  header["scalar"] = std::is_same_v<Scalar, float> ? "float32" : "float64";
  header["dim"] = cfg.dim;
  header["hidden_width"] = cfg.hidden_width;
  header["hidden_layers"] = cfg.hidden_layers;
  header["embed_features"] = cfg.embed_features;
  header["conditioning"] = cfg.conditioning == Conditioning::kFilm ? "film" : "concat";
  header["activation"] = cfg.activation == Activation::kIdentity ? "identity" : "silu";
  header["layer_norm"] = cfg.layer_norm;
  header["sigma_data"] = mlp->sigma_data();
  header["schedule"] = {{"sigma_min", schedule.sigma_min()}, {"sigma_max", schedule.sigma_max()}};
  header["param_count"] = mlp->parameter_count();
  header["weight_order"] = "row-major";
  const VectorXd flat = mlp->export_weights_row_major();
  const MatrixXd as_block = flat;
  write_blob(out, kCkptMagic, sizeof(kCkptMagic) - 1, header, {&as_block});
  return true;
}

template <typename Scalar>
std::unique_ptr<Denoiser> make_mlp_from_header(const json& header, const NoiseSchedule& schedule,
                                               const VectorXd& flat) {
  MlpConfig cfg;
  cfg.dim = header.at("dim").get<int>();
  cfg.hidden_width = header.at("hidden_width").get<int>();
  cfg.hidden_layers = header.at("hidden_layers").get<int>();
  cfg.embed_features = header.at("embed_features").get<int>();
  cfg.conditioning = header.at("conditioning").get<std::string>() == "film" ? Conditioning::kFilm
                                                                            : Conditioning::kConcat;
  cfg.activation = header.at("activation").get<std::string>() == "identity"
                       ? Activation::kIdentity
                       : Activation::kSilu;
  cfg.layer_norm = header.at("layer_norm").get<bool>();
  auto model = std::make_unique<MlpDenoiserT<Scalar>>(cfg, schedule, 0);
  model->import_weights_row_major(flat);
  model->set_sigma_data(header.at("sigma_data").get<double>());
  return model;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model,
                     const NoiseSchedule& schedule) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (try_save_mlp<double>(out, model, schedule) || try_save_mlp<float>(out, model, schedule)) {
    if (!out) throw std::runtime_error("write failed: " + path.string());
    return;
  }
  const auto* gaussian = dynamic_cast<const GaussianDenoiser*>(&model);
  check_arg(gaussian != nullptr, "save_checkpoint: unsupported model type");
  json header;
  header["version"] = 1;
  header["kind"] = "gaussian";
  header["dim"] = gaussian->dim();
  header["schedule"] = {{"sigma_min", schedule.sigma_min()}, {"sigma_max", schedule.sigma_max()}};
  const MatrixXd mean = gaussian->mean();
  write_blob(out, kCkptMagic, sizeof(kCkptMagic) - 1, header, {&mean, &gaussian->cov()});
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const json header = read_header(in, kCkptMagic, sizeof(kCkptMagic) - 1, path.string());
  const int version = header.at("version").get<int>();
  check_arg(version == 1, "load_checkpoint: unsupported version");
  LoadedCheckpoint loaded;
  loaded.schedule = NoiseSchedule(header.at("schedule").at("sigma_min").get<double>(),
                                  header.at("schedule").at("sigma_max").get<double>());
  const std::string kind = header.at("kind").get<std::string>();
  if (kind == "mlp") {
    const Eigen::Index n = header.at("param_count").get<Eigen::Index>();
    const VectorXd flat = read_block(in, n, 1, path.string());
    if (header.at("scalar").get<std::string>() == "float32")
      loaded.model = make_mlp_from_header<float>(header, loaded.schedule, flat);
    else
      loaded.model = make_mlp_from_header<double>(header, loaded.schedule, flat);
  } else if (kind == "gaussian") {
    const Eigen::Index d = header.at("dim").get<Eigen::Index>();
    const VectorXd mean = read_block(in, d, 1, path.string());
    const MatrixXd cov = read_block(in, d, d, path.string());
    loaded.model = std::make_unique<GaussianDenoiser>(mean, cov);
  } else {
    throw std::runtime_error("load_checkpoint: unknown kind " + kind);
  }
  return loaded;
}

void save_samples(const std::filesystem::path& path, const std::vector<MatrixXd>& blocks,
                  const std::string& kind, const std::string& provenance) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  json header;
  header["version"] = 1;
  header["kind"] = kind;
  header["provenance"] = provenance;
  json shapes = json::array();
  std::vector<const MatrixXd*> ptrs;
  for (const auto& b : blocks) {
    shapes.push_back({b.rows(), b.cols()});
    ptrs.push_back(&b);
  }
  header["shapes"] = shapes;
  write_blob(out, kSampleMagic, sizeof(kSampleMagic) - 1, header, ptrs);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<MatrixXd> load_samples(const std::filesystem::path& path, std::string* kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const json header = read_header(in, kSampleMagic, sizeof(kSampleMagic) - 1, path.string());
  if (kind != nullptr) *kind = header.at("kind").get<std::string>();
  std::vector<MatrixXd> blocks;
  for (const auto& shape : header.at("shapes"))
    blocks.push_back(read_block(in, shape[0].get<Eigen::Index>(), shape[1].get<Eigen::Index>(),
                                path.string()));
  return blocks;
}

}  // namespace mvss
