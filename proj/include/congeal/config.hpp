#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "congeal/losses.hpp"

namespace congeal {

struct BackendConfig {
  std::string kind = "torchscript";  // torchscript | precomputed | synthetic
  std::string weights;               // torchscript module path
  std::string feature_dir;           // precomputed dump directory
  int64_t descriptor_dim = 384;
  int64_t stride = 4;
  int64_t patch = 8;
};

struct StnConfig {
  int64_t base_channels = 64;
  int64_t max_channels = 512;
  int64_t nonrigid_input_size = 128;
  int64_t coarse_grid = 16;
  double lrelu_slope = 0.2;
  std::vector<double> blur_kernel = {1, 3, 3, 1};
};

struct RunConfig {
  int64_t seed = 0;
  int64_t image_size = 256;
  int64_t atlas_size = 128;
  int64_t epochs = 8000;
  int64_t bootstrap_epochs = 1000;
  double lr_stn = 1e-4;
  double lr_atlas = 8e-4;
  bool allow_flips = false;
  bool gradual_atlas = false;
  bool fixed_atlas = false;
  bool extreme_deformation_mode = false;
  std::string pad_mode = "replicate";  // replicate | zero
  int64_t snapshot_every = 500;
  int64_t threads = 0;  // 0 = library default
  BackendConfig backend;
  StnConfig stn;
  LossWeights loss;

  void validate() const;

  std::string to_json(int indent = 2) const;
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);

  /// Applies dotted-path overrides ("loss.lambda_s=1.0"). Unknown keys or
  /// values that do not parse as the field's type throw ConfigError.
  void apply_overrides(const std::vector<std::string>& overrides);

  /// FNV-1a hash of the canonical JSON dump, hex-encoded.
  std::string hash() const;
};

}  // namespace congeal
