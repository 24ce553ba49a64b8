#pragma once

#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "congeal/config.hpp"
#include "congeal/image_io.hpp"

namespace congeal {

// Per-image semantic descriptors at atlas resolution plus the initial
// (noisy) saliency mask they came with.
struct FeatureSet {
  torch::Tensor keys;      // [D,H_A,W_A] float32, finite
  torch::Tensor saliency;  // [H_A,W_A] float32 in [0,1]
  std::string name;
};

// Raw backend output on the extractor's native token grid.
struct RawFeatures {
  torch::Tensor keys;       // [D,Hr,Wr]
  torch::Tensor attention;  // [Hr,Wr] class-token attention, head-averaged
};

class FeatureBackend {
 public:
  virtual ~FeatureBackend() = default;
  virtual std::string id() const = 0;
  virtual int64_t descriptor_dim() const = 0;
  virtual int64_t stride() const = 0;
  /// Deterministic descriptor extraction from a [3,S,S] image in [0,1].
  virtual RawFeatures extract(const torch::Tensor& image) const = 0;
};

/// Backend wrapping a TorchScript module that maps [1,3,S,S] in [0,1] to
/// (keys [1,D,Hr,Wr], attention [1,1,Hr,Wr]). Throws ConfigError with a
/// pointer to precomputed-feature mode when the weights file is missing.
std::unique_ptr<FeatureBackend> make_torchscript_backend(const BackendConfig& cfg);

/// Procedural oracle backend: descriptors are radial-basis responses of the
/// pixel color against fixed color prototypes, so warped images yield
/// correspondingly warped descriptor fields. See synthetic.hpp for the
/// matching ground-truth set generator.
std::unique_ptr<FeatureBackend> make_synthetic_backend(const BackendConfig& cfg);

std::unique_ptr<FeatureBackend> make_backend(const RunConfig& cfg);

/// Last-layer key descriptors on the backend's native grid.
RawFeatures extract_keys(const FeatureBackend& backend, const torch::Tensor& image,
                         int64_t expected_size);

/// Bilinear upsampling (corner-aligned) of a raw key grid to atlas
/// resolution. The raw grid must not exceed the atlas resolution.
torch::Tensor upsample_to_atlas(const torch::Tensor& raw_keys, int64_t atlas_h,
                                int64_t atlas_w);

struct SaliencyEstimate {
  std::vector<torch::Tensor> masks;  // per image [H_A,W_A] in [0,1]
  bool degenerate = false;           // fell back to all-ones masks
};

/// Initial saliency from joint k-means (k=10) over the pooled raw keys of
/// the whole set: clusters whose mean class-token attention exceeds the
/// median cluster attention vote as salient; per-pixel mask = soft
/// membership-weighted sum of cluster votes, 3x3 box blurred, upsampled to
/// atlas resolution. Degenerate clustering falls back to all-ones masks.
SaliencyEstimate estimate_initial_saliency(const std::vector<RawFeatures>& raw,
                                           int64_t atlas_size, int64_t seed,
                                           int64_t k = 10);

/// Full pipeline: extract, upsample, cluster. Image names come from the set.
std::vector<FeatureSet> build_feature_sets(const FeatureBackend& backend,
                                           const ImageSet& images,
                                           int64_t atlas_size, int64_t seed);

/// Feature dump: per image <name>.keys.f32 (raw grid, row-major float32) and
/// <name>.saliency.f32 (atlas resolution), plus manifest.json.
void save_precomputed_features(const std::string& dir,
                               const std::vector<std::string>& names,
                               const std::vector<RawFeatures>& raw,
                               const std::vector<torch::Tensor>& saliency,
                               const std::string& backend_id, int64_t stride,
                               int64_t descriptor_dim);

/// Loads a feature dump; downstream behavior is identical to live
/// extraction. Missing or shape-mismatched files raise per-file errors.
std::vector<FeatureSet> load_precomputed_features(const std::string& dir,
                                                  const std::vector<std::string>& names,
                                                  int64_t atlas_size,
                                                  int64_t expected_dim);

}  // namespace congeal
