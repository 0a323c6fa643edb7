#pragma once

#include <filesystem>
#include <memory>

#include "mvss/mlp.hpp"

namespace mvss {

/* Model checkpoints: magic line, JSON header (versioned, self-describing:
   kind, layer widths, schedule parameters, sigma_data, scalar type), then
   the parameters as row-major little-endian 64-bit floats. */

struct LoadedCheckpoint {
  std::unique_ptr<Denoiser> model;
  NoiseSchedule schedule{1e-3, 10.0};
};

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model,
                     const NoiseSchedule& schedule);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Sample files share the container: JSON header + one f64 matrix per source.
void save_samples(const std::filesystem::path& path, const std::vector<MatrixXd>& blocks,
                  const std::string& kind, const std::string& provenance);
std::vector<MatrixXd> load_samples(const std::filesystem::path& path, std::string* kind = nullptr);

}  // namespace mvss
