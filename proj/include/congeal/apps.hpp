#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "congeal/annotations.hpp"
#include "congeal/trainer.hpp"

namespace congeal {

struct EditLayer {
  torch::Tensor rgba;  // [4,h,w] at atlas resolution (or integer multiple)
  bool premultiplied = false;
};

EditLayer load_edit_layer(const std::string& png_path, bool premultiplied = false);

/// Forward-splats the atlas-space edit into every image and alpha-blends:
/// out = a*edit_rgb + (1-a)*image.
std::vector<torch::Tensor> propagate_edit(const TrainedRun& run,
                                          const EditLayer& edit);

/// Lifts an edit drawn in one image's frame into atlas space (backward warp
/// along that image's mapping grid) and propagates it to every image.
std::vector<torch::Tensor> edit_via_image(const TrainedRun& run,
                                          int64_t source_index,
                                          const EditLayer& edit_in_source);

struct TransferResult {
  torch::Tensor points;         // [P,2] predicted keypoints, target original frame
  torch::Tensor out_of_bounds;  // [P] bool
};

/// Keypoint transfer A -> atlas -> B. Input/output coordinates live in the
/// original image frames; pad_info handles the working-frame conversion.
TransferResult transfer_keypoints(const TrainedRun& run, int64_t src,
                                  int64_t tgt, const torch::Tensor& keypoints_a);

struct PckResult {
  struct Pair {
    std::string source, target;
    int64_t correct = 0, total = 0;
  };
  std::vector<Pair> pairs;
  double pck = 0;  // aggregate percentage
  double alpha = 0;
  std::string mode;
  bool macro_average = false;

  std::string to_json() const;
};

/// PCK-Transfer: a keypoint counts as correct iff its prediction lands
/// within alpha*max(h,w) of ground truth, with (h,w) the target bounding box
/// (mode "bbox") or the target original image size (mode "image").
/// Out-of-bounds predictions count as incorrect. Aggregation is a
/// micro-average over all keypoints unless macro_average is set.
PckResult evaluate_pck(const TrainedRun& run, const KeypointAnnotations& ann,
                       double alpha = 0.1, bool macro_average = false);

/// Writes congealed/<name>.png, congealed/average.png, atlas/saliency.png,
/// atlas/keys.f32 (+ saliency.f32), masks/<name>_{soft,mask}.png.
void export_visuals(const TrainedRun& run, const std::string& out_dir);

}  // namespace congeal
