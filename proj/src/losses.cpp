#include "congeal/losses.hpp"

#include <cmath>
#include <sstream>

#include "congeal/common.hpp"

namespace congeal {

namespace {

constexpr double kEps = 1e-8;
constexpr double kDetFloor = 1e-16;
constexpr double kInvClamp = 1e8;

torch::Tensor valid_mask(const torch::Tensor& validity, torch::Dtype dtype) {
  return validity.to(dtype);
}

}  // namespace

void LossWeights::validate() const {
  const double vals[] = {lambda_s,  lambda_r, lambda_a, lambda_l, lambda_s1,
                         lambda_s2, lambda_s3, lambda_p, lambda_k, gamma,
                         delta_huber, c, rigidity_multiplier};
  for (double v : vals)
    check(v >= 0.0, "loss weights must be non-negative");
  check(delta_local > 0 && delta_global > 0, "rigidity offsets must be positive");
}

PerImageLoss keys_loss(const torch::Tensor& warped_keys,
                       const torch::Tensor& atlas_keys,
                       const torch::Tensor& atlas_saliency,
                       const torch::Tensor& validity, double lambda_l,
                       bool valid_only_normalizer) {
  const auto dtype = warped_keys.scalar_type();
  auto sa = atlas_saliency.detach();
  auto vm = valid_mask(validity, dtype);  // [B,H,W]

  auto ka = atlas_keys.unsqueeze(0);  // [1,D,H,W]
  auto l2 = (warped_keys - ka).pow(2).sum(1);  // [B,H,W]
  auto cos = torch::nn::functional::cosine_similarity(
      warped_keys, ka.expand_as(warped_keys),
      torch::nn::functional::CosineSimilarityFuncOptions().dim(1).eps(kEps));
  auto dist = lambda_l * l2 + (1.0 - cos);

  auto weighted = sa.unsqueeze(0) * vm;          // [B,H,W]
  auto num = (weighted * dist).sum({1, 2});      // [B]
  torch::Tensor den;
  if (valid_only_normalizer) {
    den = weighted.sum({1, 2});
  } else {
    den = sa.sum().expand({warped_keys.size(0)});
  }
  auto ok = den > kEps;
  PerImageLoss out;
  out.values = torch::where(ok, num / den.clamp_min(kEps), torch::zeros_like(num));
  out.degenerate = !ok.all().item<bool>();
  return out;
}

torch::Tensor huber(const torch::Tensor& a, const torch::Tensor& b, double delta) {
  auto diff = a - b;
  auto ad = diff.abs();
  return torch::where(ad < delta, 0.5 * diff * diff, delta * (ad - 0.5 * delta));
}

PerImageLoss saliency_loss(const torch::Tensor& warped_saliency,
                           const torch::Tensor& atlas_saliency,
                           const torch::Tensor& validity, double delta_huber) {
  const auto dtype = warped_saliency.scalar_type();
  auto vm = valid_mask(validity, dtype);
  auto rho = huber(warped_saliency, atlas_saliency.unsqueeze(0).expand_as(warped_saliency),
                   delta_huber);
  const double n_a = static_cast<double>(atlas_saliency.numel());
  PerImageLoss out;
  out.values = (rho * vm).sum({1, 2}) / n_a;
  return out;
}

torch::Tensor scale_loss(const torch::Tensor& scales) {
  return (1.0 - scales).pow(2);
}

PerImageLoss mag_loss(const torch::Tensor& flow, const torch::Tensor& validity) {
  const auto dtype = flow.scalar_type();
  auto vm = valid_mask(validity, dtype);
  const double n_a = static_cast<double>(flow.size(1) * flow.size(2));
  PerImageLoss out;
  out.values = (flow.pow(2).sum(-1) * vm).sum({1, 2}) / n_a;
  return out;
}

PerImageLoss smooth_loss(const torch::Tensor& coords, const torch::Tensor& validity,
                         int64_t delta,
                         const std::optional<torch::Tensor>& atlas_saliency,
                         bool valid_only_normalizer) {
  const auto dtype = coords.scalar_type();
  const int64_t h = coords.size(1), w = coords.size(2);
  check(delta < h && delta < w, "rigidity offset exceeds atlas size");

  using torch::indexing::Slice;
  auto base = coords.index({Slice(), Slice(0, h - delta), Slice(0, w - delta)});
  auto right = coords.index({Slice(), Slice(0, h - delta), Slice(delta, w)});
  auto down = coords.index({Slice(), Slice(delta, h), Slice(0, w - delta)});

  // Forward differences in atlas-pixel units: identity mapping => J = I.
  auto j1 = (right - base) * (static_cast<double>(w - 1) / (2.0 * delta));
  auto j2 = (down - base) * (static_cast<double>(h - 1) / (2.0 * delta));

  auto a = (j1 * j1).sum(-1);
  auto b = (j1 * j2).sum(-1);
  auto d = (j2 * j2).sum(-1);
  auto fro = (a * a + 2.0 * b * b + d * d).clamp_min(1e-30).sqrt();
  // For 2x2 symmetric M, ||adj(M)||_F = ||M||_F, so ||M^-1||_F = ||M||_F/det.
  auto det = a * d - b * b;
  auto singular = det < kDetFloor;
  auto inv = torch::where(singular, torch::full_like(fro, kInvClamp),
                          fro / det.clamp_min(kDetFloor));
  auto phi = fro + inv;

  auto elig = validity.index({Slice(), Slice(0, h - delta), Slice(0, w - delta)}) &
              validity.index({Slice(), Slice(0, h - delta), Slice(delta, w)}) &
              validity.index({Slice(), Slice(delta, h), Slice(0, w - delta)});
  auto em = elig.to(dtype);

  torch::Tensor weight = em;
  if (atlas_saliency) {
    auto sa = atlas_saliency->detach().index({Slice(0, h - delta), Slice(0, w - delta)});
    weight = sa.unsqueeze(0) * em;
  }
  torch::Tensor den;
  if (atlas_saliency && !valid_only_normalizer) {
    den = atlas_saliency->detach().sum().expand({coords.size(0)});
  } else {
    den = weight.sum({1, 2});
  }

  auto num = (weight * phi).sum({1, 2});
  auto ok = den > kEps;
  PerImageLoss out;
  out.values = torch::where(ok, num / den.clamp_min(kEps), torch::zeros_like(num));
  out.degenerate = !ok.all().item<bool>();
  out.clamped_pixels = (singular & elig).sum().item<int64_t>();
  return out;
}

PerImageLoss center_loss(const torch::Tensor& atlas_saliency,
                         const torch::Tensor& validity) {
  const auto dtype = atlas_saliency.scalar_type();
  auto v = validity.dim() == 2 ? validity.unsqueeze(0) : validity;
  auto vm = v.to(dtype);  // [B,H,W]
  auto xy = coord_lattice(atlas_saliency.size(0), atlas_saliency.size(1), dtype)
                .to(atlas_saliency.device());  // [H,W,2]
  auto m = atlas_saliency.unsqueeze(0) * vm;   // [B,H,W]
  auto mass = m.sum({1, 2});                   // [B]
  auto com = (m.unsqueeze(-1) * xy.unsqueeze(0)).sum({1, 2});  // [B,2]
  auto ok = mass > kEps;
  auto val = com.pow(2).sum(-1) / mass.clamp_min(kEps).pow(2);
  PerImageLoss out;
  out.values = torch::where(ok, val, torch::zeros_like(val));
  out.degenerate = !ok.all().item<bool>();
  return out;
}

torch::Tensor sparsity_saliency(const torch::Tensor& atlas_saliency, double gamma) {
  auto psi0 = 2.0 * torch::sigmoid(5.0 * atlas_saliency) - 1.0;
  return (gamma * atlas_saliency.abs() + psi0).mean();
}

torch::Tensor sparsity_keys(const torch::Tensor& atlas_keys,
                            const torch::Tensor& atlas_saliency) {
  return ((1.0 - atlas_saliency.unsqueeze(0)) * atlas_keys.abs()).mean();
}

namespace {

// Evaluates the atlas-dependent per-image terms with per-row control over
// whether gradients may flow into the atlas. Rows with gate=false see
// detached atlas tensors; their values are identical, only the graph differs.
struct GatedAtlasTerms {
  torch::Tensor keys;      // [B]
  torch::Tensor saliency;  // [B]
  torch::Tensor center;    // [B]
  bool keys_degenerate = false;
  bool center_degenerate = false;
};

GatedAtlasTerms gated_terms(const ObjectiveInputs& in, const LossWeights& w) {
  const int64_t b = in.warped_keys.size(0);
  auto gate = in.atlas_grad_mask.defined() && in.atlas_grad_mask.numel() > 0
                  ? in.atlas_grad_mask.to(torch::kBool)
                  : torch::ones({b}, torch::kBool);

  GatedAtlasTerms out;
  auto opts = torch::TensorOptions().dtype(in.warped_keys.scalar_type());
  out.keys = torch::zeros({b}, opts);
  out.saliency = torch::zeros({b}, opts);
  out.center = torch::zeros({b}, opts);

  for (bool live : {true, false}) {
    auto idx = torch::nonzero(gate == live).squeeze(-1);
    if (idx.numel() == 0) continue;
    auto ka = live ? in.atlas_keys : in.atlas_keys.detach();
    auto sa = live ? in.atlas_saliency : in.atlas_saliency.detach();
    auto wk = in.warped_keys.index_select(0, idx);
    auto ws = in.warped_saliency.index_select(0, idx);
    auto vd = in.validity.index_select(0, idx);

    auto k = keys_loss(wk, ka, sa, vd, w.lambda_l, w.normalizer_valid_only);
    auto s = saliency_loss(ws, sa, vd, w.delta_huber);
    auto c = center_loss(sa, vd);
    out.keys_degenerate |= k.degenerate;
    out.center_degenerate |= c.degenerate;
    out.keys = out.keys.index_add(0, idx, k.values);
    out.saliency = out.saliency.index_add(0, idx, s.values);
    out.center = out.center.index_add(0, idx, c.values);
  }
  return out;
}

double checked(const torch::Tensor& t, const char* name) {
  double v = t.item<double>();
  if (!std::isfinite(v))
    throw IoError(std::string("non-finite loss component: ") + name);
  return v;
}

}  // namespace

LossReport total_objective(const ObjectiveInputs& in, const LossWeights& w) {
  check(in.n_images > 0, "objective requires n_images > 0");
  const double n = static_cast<double>(in.n_images);

  auto atlas_terms = gated_terms(in, w);
  auto sm_local = smooth_loss(in.coords, in.validity, w.delta_local,
                              in.atlas_saliency, w.normalizer_valid_only);
  auto sm_global = smooth_loss(in.coords, in.validity, w.delta_global, std::nullopt);
  auto mag = mag_loss(in.flow, in.validity);
  auto scale = scale_loss(in.scales);

  auto keys_t = atlas_terms.keys.sum() / n;
  auto sal_t = atlas_terms.saliency.sum() / n;
  auto center_t = atlas_terms.center.sum() / n;
  auto sm_local_t = sm_local.values.sum() / n;
  auto sm_global_t = sm_global.values.sum() / n;
  auto mag_t = mag.values.sum() / n;
  auto scale_t = scale.sum() / n;
  auto spars_s = sparsity_saliency(in.atlas_saliency, w.gamma);
  auto spars_k = sparsity_keys(in.atlas_keys, in.atlas_saliency);

  auto smooth_t = w.rigidity_multiplier * (sm_local_t + w.lambda_s3 * sm_global_t);
  auto reg_m = w.lambda_s1 * scale_t + w.lambda_s2 * mag_t + smooth_t;
  auto reg_a = center_t + w.lambda_p * (spars_s + w.lambda_k * spars_k);
  auto total = w.c * (keys_t + w.lambda_s * sal_t + w.lambda_r * reg_m + w.lambda_a * reg_a);

  LossReport r;
  r.keys = checked(keys_t, "keys");
  r.saliency = checked(sal_t, "saliency");
  r.scale = checked(scale_t, "scale");
  r.mag = checked(mag_t, "mag");
  r.smooth_local = checked(sm_local_t, "smooth_local");
  r.smooth_global = checked(sm_global_t, "smooth_global");
  r.center = checked(center_t, "center");
  r.sparsity_s = checked(spars_s, "sparsity_saliency");
  r.sparsity_k = checked(spars_k, "sparsity_keys");
  r.reg_mapping = checked(reg_m, "reg_mapping");
  r.reg_atlas = checked(reg_a, "reg_atlas");
  r.total_value = checked(total, "total");
  r.total = total;
  r.per_image_keys = atlas_terms.keys.detach();
  r.clamped_jacobians = sm_local.clamped_pixels + sm_global.clamped_pixels;
  if (atlas_terms.keys_degenerate)
    r.warnings.push_back("keys loss: empty atlas saliency in some valid region");
  if (sm_local.degenerate)
    r.warnings.push_back("local rigidity: empty eligible region");
  return r;
}

std::string LossReport::to_json() const {
  std::ostringstream os;
  os.precision(10);
  os << "{\"total\":" << total_value << ",\"keys\":" << keys
     << ",\"saliency\":" << saliency << ",\"scale\":" << scale
     << ",\"mag\":" << mag << ",\"smooth_local\":" << smooth_local
     << ",\"smooth_global\":" << smooth_global << ",\"center\":" << center
     << ",\"sparsity_saliency\":" << sparsity_s
     << ",\"sparsity_keys\":" << sparsity_k
     << ",\"reg_mapping\":" << reg_mapping << ",\"reg_atlas\":" << reg_atlas
     << ",\"clamped_jacobians\":" << clamped_jacobians << "}";
  return os.str();
}

}  // namespace congeal
