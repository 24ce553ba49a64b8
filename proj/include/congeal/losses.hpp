#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace congeal {

// Every coefficient of the training objective. Defaults are the values used
// for all experiments; extreme-deformation mode rewrites rigidity_multiplier
// and lambda_s3 (see apply_extreme_mode in trainer.hpp).
struct LossWeights {
  double lambda_s = 1.25;    // saliency term
  double lambda_r = 0.025;   // mapping regularization
  double lambda_a = 0.75;    // atlas regularization
  double lambda_l = 0.875;   // L2 part of the keys distance
  double lambda_s1 = 8.0;    // scale
  double lambda_s2 = 80.0;   // flow magnitude
  double lambda_s3 = 3.5;    // global rigidity
  double lambda_p = 0.075;   // sparsity
  double lambda_k = 0.044;   // keys sparsity
  double gamma = 2.0;        // L1 vs smooth-L0 inside saliency sparsity
  double delta_huber = 0.7;
  int64_t delta_local = 1;   // rigidity finite-difference offsets, in pixels
  int64_t delta_global = 20;
  double c = 4000.0;         // global multiplier on the objective
  double rigidity_multiplier = 1.0;
  // Scope of the Sigma S_A normalizer in the keys loss (and local rigidity):
  // true = sum over each image's valid region, false = whole atlas.
  bool normalizer_valid_only = true;

  void validate() const;
};

// Per-image loss value plus a degenerate-input flag (empty saliency region,
// no eligible pixels, ...). Degenerate rows contribute 0.
struct PerImageLoss {
  torch::Tensor values;  // [B], differentiable
  bool degenerate = false;
  int64_t clamped_pixels = 0;  // rigidity only: near-singular Jacobians
};

/// Semantic keys loss (per image): (1/Sigma S_A) * sum over valid atlas
/// pixels of S_A * (lambda_l*||K_i-K_A||^2 + cosine distance). S_A is
/// detached inside; gradients reach the warped keys and K_A only.
PerImageLoss keys_loss(const torch::Tensor& warped_keys,      // [B,D,H,W]
                       const torch::Tensor& atlas_keys,       // [D,H,W]
                       const torch::Tensor& atlas_saliency,   // [H,W]
                       const torch::Tensor& validity,         // [B,H,W] bool
                       double lambda_l, bool valid_only_normalizer);

/// Saliency voting loss (per image): (1/N_A) * sum over valid pixels of the
/// Huber distance between the warped image saliency and S_A.
PerImageLoss saliency_loss(const torch::Tensor& warped_saliency,  // [B,H,W]
                           const torch::Tensor& atlas_saliency,   // [H,W]
                           const torch::Tensor& validity,         // [B,H,W]
                           double delta_huber);

torch::Tensor huber(const torch::Tensor& a, const torch::Tensor& b, double delta);

/// |1 - s|^2 per image.
torch::Tensor scale_loss(const torch::Tensor& scales);  // [B] -> [B]

/// (1/N_A) * sum over valid pixels of ||w||^2 per image.
PerImageLoss mag_loss(const torch::Tensor& flow,       // [B,H,W,2]
                      const torch::Tensor& validity);  // [B,H,W]

/// As-rigid-as-possible penalty on the composed mapping. J is the forward
/// finite difference of the grid over `delta` pixels, expressed in atlas
/// pixel units so the identity mapping gives J = I. A pixel is eligible only
/// if it and both offset neighbours are valid and on the lattice. When
/// `atlas_saliency` is given the per-pixel values are weighted by detached
/// S_A and normalized by its eligible-region sum; otherwise a plain mean.
/// Near-singular pixels (det J^T J < 1e-16) have the inverse term clamped to
/// 1e8 and are counted in clamped_pixels.
PerImageLoss smooth_loss(const torch::Tensor& coords,    // [B,H,W,2]
                         const torch::Tensor& validity,  // [B,H,W]
                         int64_t delta,
                         const std::optional<torch::Tensor>& atlas_saliency,
                         bool valid_only_normalizer = true);

/// Squared norm of the saliency's center of mass over the valid region,
/// coordinates in (-1,1)^2. Validity may be [H,W] or [B,H,W].
PerImageLoss center_loss(const torch::Tensor& atlas_saliency,
                         const torch::Tensor& validity);

/// mean(gamma*|S_A| + Psi0(S_A)) with Psi0(x) = 2*sigmoid(5x) - 1. Global.
torch::Tensor sparsity_saliency(const torch::Tensor& atlas_saliency, double gamma);

/// mean over pixels and channels of (1 - S_A)*|K_A|. Global.
torch::Tensor sparsity_keys(const torch::Tensor& atlas_keys,
                            const torch::Tensor& atlas_saliency);

struct ObjectiveInputs {
  torch::Tensor warped_keys;      // [B,D,H,W]
  torch::Tensor warped_saliency;  // [B,H,W]
  torch::Tensor coords;           // [B,H,W,2] composed mapping grid
  torch::Tensor validity;         // [B,H,W] bool
  torch::Tensor flow;             // [B,H,W,2] dense non-rigid offsets
  torch::Tensor scales;           // [B] similarity scales
  torch::Tensor atlas_keys;       // [D,H,W]
  torch::Tensor atlas_saliency;   // [H,W]
  // Rows allowed to backpropagate into the atlas (flip gating, gradual
  // population). Empty tensor = all rows. Detached-atlas rows still drive
  // the mapping networks.
  torch::Tensor atlas_grad_mask;  // [B] bool, optional
  int64_t n_images = 0;           // N in the paper normalizers (B may be 2N)
};

struct LossReport {
  torch::Tensor total;           // 0-dim, differentiable
  torch::Tensor per_image_keys;  // [B], detached
  double total_value = 0;
  double keys = 0;
  double saliency = 0;
  double scale = 0;
  double mag = 0;
  double smooth_local = 0;
  double smooth_global = 0;
  double center = 0;
  double sparsity_s = 0;
  double sparsity_k = 0;
  double reg_mapping = 0;  // lambda_s1*scale + lambda_s2*mag + smooth
  double reg_atlas = 0;    // center + lambda_p*(sparsity_s + lambda_k*sparsity_k)
  int64_t clamped_jacobians = 0;
  std::vector<std::string> warnings;

  std::string to_json() const;
};

/// Full objective: total = c*(keys + lambda_s*saliency + lambda_r*reg_M +
/// lambda_a*reg_A). Throws IoError naming the first non-finite component.
LossReport total_objective(const ObjectiveInputs& in, const LossWeights& w);

}  // namespace congeal
