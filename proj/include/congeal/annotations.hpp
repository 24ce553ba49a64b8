#pragma once

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace congeal {

struct KeypointPair {
  std::string source, target;
  torch::Tensor src_points;  // [P,2] pixel coords in the source original frame
  torch::Tensor tgt_points;  // [P,2] pixel coords in the target original frame
  std::optional<std::array<double, 4>> bbox;  // target object box: x,y,w,h
};

struct KeypointAnnotations {
  std::vector<KeypointPair> pairs;
  std::string threshold_mode = "image";  // "bbox" | "image"
};

/// JSON annotation file:
/// {"threshold_mode": "bbox",
///  "pairs": [{"source": "a", "target": "b",
///             "src_keypoints": [[x,y],...], "tgt_keypoints": [[x,y],...],
///             "bbox": [x,y,w,h]}, ...]}
/// Keypoint lists of a pair must have equal length.
KeypointAnnotations load_annotations(const std::string& path);

void save_annotations(const KeypointAnnotations& ann, const std::string& path);

}  // namespace congeal
