#pragma once

#include <vector>

#include <torch/torch.h>

#include "congeal/image_io.hpp"
#include "congeal/mapping.hpp"

namespace congeal {

// Ground-truth generator paired with the synthetic feature backend. Each
// image is a warped rendering of a fixed template whose colors uniquely
// identify template position inside the foreground, so the backend's
// color-keyed descriptors of two images agree exactly at corresponding
// points. G maps image coordinates to template coordinates in the same
// similarity-plus-flow form as the model:
//   G_i(x) = A_i(x + w_i(x)),   I_i(x) = T(G_i(x))
// and mirrored images are rendered as I'(x,y) = I(-x,y).
struct SyntheticSpec {
  int64_t n_images = 8;
  int64_t image_size = 128;
  int64_t seed = 17;
  double max_rotation = 0.25;      // radians
  double max_log_scale = 0.1;
  double max_translation = 0.1;
  double flow_amplitude = 0.03;    // normalized units
  int64_t distractors = 2;
  double noise = 0.01;
  // Images with index >= first_mirrored are rendered mirrored (-1 = none).
  int64_t first_mirrored = -1;
  // Deformation scale for mirrored images (>1 keeps a plain image the seed).
  double mirrored_amplitude_boost = 1.5;
};

struct SyntheticImage {
  torch::Tensor image;      // [3,S,S]
  SimilarityParams gt_sim;  // image->template similarity (batch 1)
  torch::Tensor gt_flow;    // [S,S,2] image-space offsets (before similarity)
  bool mirrored = false;
};

struct SyntheticSet {
  std::vector<SyntheticImage> images;
  torch::Tensor template_rgb;   // [3,S,S]
  torch::Tensor template_mask;  // [S,S] bool foreground

  ImageSet to_image_set() const;

  /// Template coordinate of an image point: G_i(x) (exact, differentiable
  /// form evaluated with bilinear flow lookup).
  torch::Tensor image_to_template(int64_t i, const torch::Tensor& pts) const;

  /// Image coordinate of a template point: G_i^{-1}(c) by Gauss-Newton on
  /// the analytic forward map. Oracle-grade, independent of the model path.
  torch::Tensor template_to_image(int64_t i, const torch::Tensor& pts) const;

  /// Ground-truth correspondence src image -> template -> dst image.
  torch::Tensor correspond(int64_t src, int64_t dst, const torch::Tensor& pts) const;

  /// Ground-truth foreground mask of image i, [S,S] bool.
  torch::Tensor foreground(int64_t i) const;

  /// Template-space keypoints spread over the foreground, [P,2] normalized.
  torch::Tensor template_keypoints(int64_t count) const;
};

SyntheticSet make_synthetic_set(const SyntheticSpec& spec);

}  // namespace congeal
