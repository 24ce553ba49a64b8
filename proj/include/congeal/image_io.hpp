#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

namespace congeal {

// Record of the border padding and resize applied to one input image,
// sufficient to map coordinates between the original and working frames
// exactly. Coordinates convert by the pure size ratio:
//   working = (original + pad) * target / padded_size.
struct PadInfo {
  int64_t orig_w = 0, orig_h = 0;
  int64_t pad_left = 0, pad_top = 0;
  int64_t padded = 0;  // square size after padding
  int64_t target = 0;  // working resolution

  /// Original-frame pixel coords -> working-frame pixel coords, [P,2].
  torch::Tensor to_working(const torch::Tensor& pts) const;
  /// Working-frame pixel coords -> original-frame pixel coords, [P,2].
  torch::Tensor to_original(const torch::Tensor& pts) const;
};

struct ImageSet {
  torch::Tensor images;  // [N,3,S,S] float32 in [0,1]
  std::vector<std::string> names;
  std::vector<PadInfo> pad_info;

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

/// Loads >= 2 images, border-pads non-square ones to square (edge
/// replication by default, zero fill with pad_mode="zero") and resizes to
/// target_size. Unreadable files are reported together in one error.
ImageSet load_image_set(const std::vector<std::string>& paths,
                        int64_t target_size = 256,
                        const std::string& pad_mode = "replicate");

/// Applies the load_image_set preprocessing to one decoded image.
std::pair<torch::Tensor, PadInfo> preprocess_image(const torch::Tensor& rgb,
                                                   int64_t target_size,
                                                   const std::string& pad_mode);

/// PNG/JPEG decode to [3,H,W] float32 RGB in [0,1].
torch::Tensor read_image(const std::string& path);

/// Writes [3,H,W] (RGB) or [1,H,W]/[H,W] (gray) in [0,1] as 8-bit PNG.
void write_image(const std::string& path, const torch::Tensor& image);

/// Sorted list of *.png/*.jpg/*.jpeg paths under a directory.
std::vector<std::string> list_images(const std::string& dir);

}  // namespace congeal
