#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "congeal/atlas.hpp"
#include "congeal/checkpoint.hpp"
#include "congeal/config.hpp"
#include "congeal/features.hpp"
#include "congeal/image_io.hpp"
#include "congeal/losses.hpp"
#include "congeal/mapping.hpp"
#include "congeal/stn.hpp"

namespace congeal {

/// Extreme-deformation overrides: rigidity multiplier assigned 0.25 and
/// lambda_s3 assigned 0.9, everything else unchanged. Idempotent.
LossWeights apply_extreme_mode(LossWeights w);

struct EpochRecord {
  int64_t epoch = 0;
  double total = 0, keys = 0, saliency = 0, reg_mapping = 0, reg_atlas = 0;
};

// Per-image branch losses of the last atlas-updating pass.
struct FlipInfo {
  torch::Tensor losses_original;  // [N]
  torch::Tensor losses_flipped;   // [N]; undefined when flips are off
  std::vector<int64_t> chosen;    // 0 = original, 1 = flipped
};

struct TrainOptions {
  std::string out_dir;      // empty = no artifacts
  std::string resume_path;  // checkpoint to resume from
};

struct TrainResult {
  RigidSTN rigid{nullptr};
  NonRigidSTN nonrigid{nullptr};
  std::vector<int64_t> orientations;
  std::vector<double> per_image_keys;
  std::vector<EpochRecord> history;
};

// Two-phase optimization: epochs < bootstrap_epochs train the rigid STN and
// the atlas with the flow pinned at zero; afterwards each epoch runs two
// full-batch steps - a rigid-only objective updating the rigid STN against a
// frozen atlas, then the composed objective updating the non-rigid STN and
// the atlas with the similarity parameters detached.
class Trainer {
 public:
  Trainer(ImageSet images, std::vector<FeatureSet> features, RunConfig config);

  TrainResult train(const TrainOptions& opts = {});

  /// One full-batch epoch (both phase-2 passes when applicable). Returns the
  /// report of the atlas-updating pass.
  LossReport step_epoch();

  /// Evaluates one objective pass without stepping any optimizer. Diagnostic
  /// surface for the gradient-separation invariants.
  LossReport eval_pass(bool composed, bool atlas_live) {
    return objective_pass(composed, atlas_live);
  }

  int64_t epoch() const { return epoch_; }
  Atlas& atlas() { return atlas_; }
  RigidSTN rigid() { return rigid_; }
  NonRigidSTN nonrigid() { return nonrigid_; }
  const RunConfig& config() const { return cfg_; }
  const std::vector<int64_t>& orientations() const { return orientations_; }
  const std::vector<double>& keys_losses() const { return keys_losses_; }
  const FlipInfo& last_flip_info() const { return flip_info_; }

  void save(const std::string& path);
  void resume(const std::string& path);
  void snapshot(const std::string& out_dir);

 private:
  struct PassResult {
    LossReport report;
  };
  LossReport objective_pass(bool composed, bool atlas_live);

  RunConfig cfg_;
  LossWeights weights_;
  ImageSet set_;
  torch::Tensor images_, flipped_;  // [N,3,S,S]
  torch::Tensor keys_, saliency_;   // [N,D,Ha,Wa], [N,Ha,Wa]
  Atlas atlas_;
  RigidSTN rigid_{nullptr};
  NonRigidSTN nonrigid_{nullptr};
  std::unique_ptr<torch::optim::Adam> stn_opt_, atlas_opt_;
  int64_t epoch_ = 0;
  std::vector<int64_t> orientations_;
  std::vector<double> keys_losses_;
  FlipInfo flip_info_;
  std::vector<EpochRecord> history_;
};

// A trained model ready for the downstream apps: cached per-image mapping
// products under each image's chosen orientation.
struct TrainedRun {
  RunConfig config;
  ImageSet images;
  Atlas atlas;
  RigidSTN rigid{nullptr};
  NonRigidSTN nonrigid{nullptr};
  std::vector<int64_t> orientations;

  std::vector<SimilarityParams> params;
  std::vector<FlowField> flows;
  std::vector<MappingGrid> grids;

  int64_t index_of(const std::string& name) const;
  void build_mappings();

  static TrainedRun from_trainer(Trainer& trainer);
  static TrainedRun from_checkpoint(const std::string& path, ImageSet images);
};

}  // namespace congeal
