#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace congeal {

// Global 2D similarity: x' = s*R(theta)*x + t in normalized coordinates.
// Constructed from raw logits so that s > 0 and |theta| < pi always hold.
struct SimilarityParams {
  torch::Tensor theta;  // [B], radians in (-pi, pi)
  torch::Tensor scale;  // [B], positive
  torch::Tensor trans;  // [B,2]

  static SimilarityParams from_logits(const torch::Tensor& logits);  // [B,4]
  static SimilarityParams identity(int64_t b, torch::Dtype dtype = torch::kFloat32);

  /// 2x3 affine matrices [B,2,3] mapping (x,y,1) -> s*R*x + t.
  torch::Tensor matrices() const;

  /// Closed-form inverse as 2x3 affine matrices: scale 1/s, rotation -theta,
  /// translation -(1/s)*R(-theta)*t.
  torch::Tensor inverse_matrices() const;

  int64_t batch() const { return theta.size(0); }
};

// Dense per-pixel offsets in normalized coordinates plus the coarse field
// and learned upsampling weights they came from.
struct FlowField {
  torch::Tensor dense;             // [B,H_A,W_A,2]
  torch::Tensor coarse;            // [B,2,hc,wc]
  torch::Tensor upsample_weights;  // [B,9*f*f,hc,wc] raw logits

  static FlowField zero(int64_t b, int64_t h, int64_t w,
                        torch::Dtype dtype = torch::kFloat32);
};

// Image coordinates of every atlas pixel under a composed mapping.
struct MappingGrid {
  torch::Tensor coords;    // [B,H,W,2] normalized, indexes the source image
  torch::Tensor validity;  // [B,H,W] bool, coords in [-1,1]^2
};

/// Learned convex upsampling of a coarse flow field by an integer factor.
/// Weight logits are softmax-normalized over the 3x3 coarse neighbourhood
/// per sub-pixel position, so every output vector is a convex combination
/// of its neighbourhood (replicate padding at the border).
torch::Tensor convex_upsample(const torch::Tensor& coarse,   // [B,2,hc,wc]
                              const torch::Tensor& weights,  // [B,9*f*f,hc,wc]
                              int64_t factor);

/// coords(x_A) = A_p * (x_A + w(x_A)); horizontal mirror pre-composed on the
/// image side where flip is set. validity = coords in [-1,1]^2.
MappingGrid compose_mapping(const SimilarityParams& p, const FlowField& f,
                            const torch::Tensor& flip,  // [B] bool (or empty)
                            int64_t atlas_h, int64_t atlas_w);

/// Bilinear backward warp of `field` ([B,C,h,w]) at grid.coords. Samples at
/// invalid pixels are exactly zero.
torch::Tensor backward_warp(const torch::Tensor& field, const MappingGrid& grid);

/// Applies 2x3 affine matrices to points [B,P,2].
torch::Tensor apply_affine(const torch::Tensor& mats, const torch::Tensor& points);

/// Nearest-neighbour inverse of a mapping grid: for each query image point
/// returns the (x,y) normalized atlas coordinate of the valid atlas pixel
/// whose coords lie closest (ties: first in row-major order). Throws when
/// the grid has no valid pixel.
torch::Tensor invert_flow_nn(const MappingGrid& grid,       // single image
                             const torch::Tensor& queries); // [P,2] -> [P,2]

enum class MapDirection { kAtlasToImage, kImageToAtlas };

struct MappedPoints {
  torch::Tensor points;         // [P,2]
  torch::Tensor out_of_bounds;  // [P] bool: input point outside [-1,1]^2
};

/// Point transport for a single image. Atlas->image bilinearly samples the
/// mapping grid; image->atlas applies the closed-form rigid inverse then the
/// nearest-neighbour flow inverse.
MappedPoints map_points(const torch::Tensor& points, MapDirection dir,
                        const SimilarityParams& p, const FlowField& f,
                        bool flip, int64_t atlas_h, int64_t atlas_w);

/// Forward-splats an atlas-space RGBA layer into image space along the grid.
/// The grid and layer are supersampled x4 before splatting; accumulated
/// bilinear weights are normalized and zero-weight pixels get alpha 0.
torch::Tensor forward_splat(const torch::Tensor& rgba,  // [C,h,w] atlas space
                            const MappingGrid& grid,    // single image
                            int64_t out_h, int64_t out_w);

}  // namespace congeal
