#pragma once

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "congeal/atlas.hpp"
#include "congeal/config.hpp"
#include "congeal/stn.hpp"

namespace congeal {

inline constexpr int64_t kCheckpointSchema = 1;

// Everything needed to resume training deterministically. Modules and
// optimizers are loaded in place so parameter identity (and thus optimizer
// state binding) is preserved.
struct CheckpointState {
  RunConfig* config = nullptr;
  Atlas* atlas = nullptr;
  RigidSTN rigid{nullptr};
  NonRigidSTN nonrigid{nullptr};
  torch::optim::Adam* stn_opt = nullptr;
  torch::optim::Adam* atlas_opt = nullptr;  // null in fixed-atlas mode
  int64_t* epoch = nullptr;
  std::vector<int64_t>* orientations = nullptr;
  std::vector<double>* keys_losses = nullptr;
  std::vector<std::string>* image_names = nullptr;
};

/// Single binary archive with an embedded JSON manifest (schema version,
/// epoch, config hash). Round trips are bit-exact for all parameters.
void save_checkpoint(const CheckpointState& state, const std::string& path);

/// Restores into existing objects. Schema-version mismatches and missing
/// fields raise SchemaError naming the field.
void load_checkpoint(CheckpointState& state, const std::string& path);

/// Reads just the config stored in a checkpoint.
RunConfig peek_checkpoint_config(const std::string& path);

}  // namespace congeal
