#include "congeal/atlas.hpp"

#include "congeal/common.hpp"

namespace congeal {

Atlas init_atlas(const RunConfig& cfg, const std::vector<FeatureSet>& features) {
  check(!features.empty(), "init_atlas needs feature sets");
  const int64_t d = features[0].keys.size(0);
  const int64_t res = cfg.atlas_size;

  Atlas atlas;
  atlas.keys = (torch::randn({d, res, res}) * 0.01).set_requires_grad(true);
  atlas.saliency_logits = torch::zeros({res, res}).set_requires_grad(true);

  if (cfg.gradual_atlas || cfg.fixed_atlas) {
    atlas.active_set = {select_seed_image(features)};
  } else {
    for (size_t i = 0; i < features.size(); ++i)
      atlas.active_set.push_back(static_cast<int64_t>(i));
  }
  if (cfg.fixed_atlas) {
    init_fixed_atlas(atlas, features[static_cast<size_t>(atlas.active_set[0])]);
    // The mappings of every image still train against the frozen atlas.
    atlas.active_set.clear();
    for (size_t i = 0; i < features.size(); ++i)
      atlas.active_set.push_back(static_cast<int64_t>(i));
  }
  return atlas;
}

int64_t select_seed_image(const std::vector<FeatureSet>& features) {
  check(!features.empty(), "select_seed_image: empty set");
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> keys;
  for (const auto& f : features) keys.push_back(f.keys);
  auto mean_field = torch::stack(keys).mean(0);  // [D,H,W]

  double best = std::numeric_limits<double>::infinity();
  int64_t best_idx = 0;
  for (size_t i = 0; i < features.size(); ++i) {
    auto cos = torch::nn::functional::cosine_similarity(
        features[i].keys, mean_field,
        torch::nn::functional::CosineSimilarityFuncOptions().dim(0).eps(1e-8));
    auto dist = 1.0 - cos;  // [H,W]
    auto region = features[i].saliency >= 0.5;
    double v;
    if (region.any().item<bool>())
      v = dist.index({region}).mean().item<double>();
    else
      v = dist.mean().item<double>();
    if (v < best) {  // strict: ties keep the lowest index
      best = v;
      best_idx = static_cast<int64_t>(i);
    }
  }
  return best_idx;
}

void grow_active_set(Atlas& atlas, const std::vector<double>& per_image_keys_losses) {
  const int64_t n = static_cast<int64_t>(per_image_keys_losses.size());
  if (static_cast<int64_t>(atlas.active_set.size()) >= n) return;

  double best = std::numeric_limits<double>::infinity();
  int64_t best_idx = -1;
  for (int64_t i = 0; i < n; ++i) {
    if (std::find(atlas.active_set.begin(), atlas.active_set.end(), i) !=
        atlas.active_set.end())
      continue;
    if (per_image_keys_losses[i] < best) {
      best = per_image_keys_losses[i];
      best_idx = i;
    }
  }
  if (best_idx >= 0) atlas.active_set.push_back(best_idx);
}

void init_fixed_atlas(Atlas& atlas, const FeatureSet& seed) {
  torch::NoGradGuard ng;
  atlas.keys.copy_(seed.keys);
  auto s = seed.saliency.clamp(1e-4, 1.0 - 1e-4);
  atlas.saliency_logits.copy_(torch::log(s) - torch::log1p(-s));
  atlas.keys.set_requires_grad(false);
  atlas.saliency_logits.set_requires_grad(false);
  atlas.fixed = true;
}

}  // namespace congeal
