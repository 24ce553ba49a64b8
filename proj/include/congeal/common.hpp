#pragma once

#include <stdexcept>
#include <string>

#include <torch/torch.h>

namespace congeal {

// Thrown for malformed configs, CLI flags, or inputs that violate a
// documented precondition. The CLI maps this to exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown for filesystem/decode failures at runtime. CLI exit code 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint/feature-dump schema mismatches.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// All normalized coordinates live in [-1,1]^2 with (-1,-1) at the top-left.
// Pixel index i on an axis of size n maps to -1 + 2i/(n-1) (corner-aligned),
// so the outermost pixel centers sit exactly at +-1.
inline double pixel_to_norm(double px, int64_t size) {
  return -1.0 + 2.0 * px / static_cast<double>(size - 1);
}

inline double norm_to_pixel(double c, int64_t size) {
  return (c + 1.0) * 0.5 * static_cast<double>(size - 1);
}

// Lattice of normalized coordinates, shape [h, w, 2], channel order (x, y).
inline torch::Tensor coord_lattice(int64_t h, int64_t w,
                                   torch::Dtype dtype = torch::kFloat32) {
  auto opts = torch::TensorOptions().dtype(dtype);
  auto ys = torch::linspace(-1.0, 1.0, h, opts);
  auto xs = torch::linspace(-1.0, 1.0, w, opts);
  auto grids = torch::meshgrid({ys, xs}, "ij");
  return torch::stack({grids[1], grids[0]}, -1);
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace congeal
