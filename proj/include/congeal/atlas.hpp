#pragma once

#include <vector>

#include <torch/torch.h>

#include "congeal/config.hpp"
#include "congeal/features.hpp"

namespace congeal {

// Learnable joint atlas. Saliency is parametrized through a sigmoid of free
// logits so S_A stays strictly inside (0,1) and gradients exist everywhere.
struct Atlas {
  torch::Tensor keys;            // [D,H,W], learnable
  torch::Tensor saliency_logits; // [H,W], learnable
  std::vector<int64_t> active_set;  // images currently updating the atlas
  bool fixed = false;

  torch::Tensor saliency() const { return torch::sigmoid(saliency_logits); }
  int64_t resolution() const { return keys.size(1); }

  std::vector<torch::Tensor> parameters() const {
    return {keys, saliency_logits};
  }
};

/// Fresh atlas: keys ~ N(0, 0.01^2), saliency logits 0 (S_A = 0.5). The
/// active set is all images, or just the seed under gradual population.
Atlas init_atlas(const RunConfig& cfg, const std::vector<FeatureSet>& features);

/// Index of the image most semantically similar to the per-pixel mean key
/// field of the set: argmin of mean cosine distance inside the image's
/// initial-saliency region (S_i >= 0.5; whole image when empty). Ties go to
/// the lowest index.
int64_t select_seed_image(const std::vector<FeatureSet>& features);

/// Gradual population step: appends the inactive image with the lowest
/// current keys loss. No-op when all images are active.
void grow_active_set(Atlas& atlas, const std::vector<double>& per_image_keys_losses);

/// Fixed-atlas mode: keys copied from the seed image, saliency logits set to
/// logit(clamp(S_seed, 1e-4, 1-1e-4)); both frozen afterwards.
void init_fixed_atlas(Atlas& atlas, const FeatureSet& seed);

}  // namespace congeal
