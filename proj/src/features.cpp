#include "congeal/features.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>
#include <torch/script.h>

#include "congeal/common.hpp"

namespace congeal {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

int64_t token_grid(int64_t image, int64_t patch, int64_t stride) {
  return (image - patch) / stride + 1;
}

class TorchScriptBackend final : public FeatureBackend {
 public:
  explicit TorchScriptBackend(const BackendConfig& cfg) : cfg_(cfg) {
    if (cfg.weights.empty() || !fs::exists(cfg.weights))
      throw ConfigError(
          "feature backend weights not found at '" + cfg.weights +
          "'; either point backend.weights at a TorchScript export or use "
          "backend.kind=precomputed with a feature dump from extract-features");
    module_ = torch::jit::load(cfg.weights);
    module_.eval();
  }

  std::string id() const override { return "torchscript:" + cfg_.weights; }
  int64_t descriptor_dim() const override { return cfg_.descriptor_dim; }
  int64_t stride() const override { return cfg_.stride; }

  RawFeatures extract(const torch::Tensor& image) const override {
    torch::NoGradGuard ng;
    auto out = const_cast<torch::jit::Module&>(module_)
                   .forward({image.unsqueeze(0)})
                   .toTuple();
    RawFeatures r;
    r.keys = out->elements()[0].toTensor().squeeze(0).to(torch::kFloat32);
    r.attention = out->elements()[1].toTensor().squeeze(0).squeeze(0).to(torch::kFloat32);
    check(r.keys.size(0) == cfg_.descriptor_dim,
          "backend returned descriptor dim " + std::to_string(r.keys.size(0)) +
              ", expected " + std::to_string(cfg_.descriptor_dim));
    return r;
  }

 private:
  BackendConfig cfg_;
  torch::jit::Module module_;
};

// Descriptors are RBF responses of the pixel color to fixed prototypes; the
// prototypes are a fixed function of D only, so any two renderings of the
// same scene produce identical fields.
class SyntheticBackend final : public FeatureBackend {
 public:
  explicit SyntheticBackend(const BackendConfig& cfg) : cfg_(cfg) {
    auto gen = at::detail::createCPUGenerator(12003);
    prototypes_ = torch::rand({cfg.descriptor_dim, 3}, gen,
                              torch::TensorOptions().dtype(torch::kFloat32));
  }

  std::string id() const override { return "synthetic"; }
  int64_t descriptor_dim() const override { return cfg_.descriptor_dim; }
  int64_t stride() const override { return cfg_.stride; }

  RawFeatures extract(const torch::Tensor& image) const override {
    torch::NoGradGuard ng;
    const int64_t s = image.size(1);
    const int64_t tokens = token_grid(s, cfg_.patch, cfg_.stride);
    // Sample colors at token centers, as a patch extractor would.
    auto centers = torch::arange(tokens, torch::kFloat32) * cfg_.stride +
                   (cfg_.patch - 1) / 2.0;
    auto norm = (centers * 2.0 / (s - 1)) - 1.0;
    auto gy = norm.view({1, tokens, 1, 1}).expand({1, tokens, tokens, 1});
    auto gx = norm.view({1, 1, tokens, 1}).expand({1, tokens, tokens, 1});
    auto grid = torch::cat({gx, gy}, -1);
    auto colors = F::grid_sample(image.unsqueeze(0), grid,
                                 F::GridSampleFuncOptions()
                                     .mode(torch::kBilinear)
                                     .padding_mode(torch::kBorder)
                                     .align_corners(true))
                      .squeeze(0);  // [3,t,t]

    auto flat = colors.reshape({3, -1}).t();  // [t*t,3]
    auto d2 = torch::cdist(flat, prototypes_).pow(2);
    auto keys = torch::exp(-d2 / (2.0 * 0.03)).t().reshape(
        {cfg_.descriptor_dim, tokens, tokens});

    RawFeatures r;
    r.keys = keys;
    // Attention proxy: color saturation * brightness, high on both the
    // common object and the painted distractors.
    auto maxc = std::get<0>(colors.max(0));
    auto minc = std::get<0>(colors.min(0));
    r.attention = (maxc - minc) * maxc;
    return r;
  }

 private:
  BackendConfig cfg_;
  torch::Tensor prototypes_;
};

}  // namespace

std::unique_ptr<FeatureBackend> make_torchscript_backend(const BackendConfig& cfg) {
  return std::make_unique<TorchScriptBackend>(cfg);
}

std::unique_ptr<FeatureBackend> make_synthetic_backend(const BackendConfig& cfg) {
  return std::make_unique<SyntheticBackend>(cfg);
}

std::unique_ptr<FeatureBackend> make_backend(const RunConfig& cfg) {
  if (cfg.backend.kind == "torchscript") return make_torchscript_backend(cfg.backend);
  if (cfg.backend.kind == "synthetic") return make_synthetic_backend(cfg.backend);
  throw ConfigError("make_backend: precomputed features are loaded with "
                    "load_precomputed_features, not a live backend");
}

RawFeatures extract_keys(const FeatureBackend& backend, const torch::Tensor& image,
                         int64_t expected_size) {
  check(image.dim() == 3 && image.size(0) == 3 &&
            image.size(1) == expected_size && image.size(2) == expected_size,
        "extract_keys expects a [3," + std::to_string(expected_size) + "," +
            std::to_string(expected_size) + "] image");
  auto r = backend.extract(image);
  check(r.keys.isfinite().all().item<bool>(), "backend produced non-finite keys");
  return r;
}

torch::Tensor upsample_to_atlas(const torch::Tensor& raw_keys, int64_t atlas_h,
                                int64_t atlas_w) {
  check(raw_keys.size(1) <= atlas_h && raw_keys.size(2) <= atlas_w,
        "raw key grid larger than atlas resolution");
  if (raw_keys.size(1) == atlas_h && raw_keys.size(2) == atlas_w)
    return raw_keys;
  return F::interpolate(raw_keys.unsqueeze(0),
                        F::InterpolateFuncOptions()
                            .size(std::vector<int64_t>{atlas_h, atlas_w})
                            .mode(torch::kBilinear)
                            .align_corners(true))
      .squeeze(0);
}

namespace {

// Deterministic k-means++ over [P,D] points.
torch::Tensor kmeans(const torch::Tensor& pts, int64_t k, int64_t seed,
                     int64_t iters = 50) {
  auto gen = at::detail::createCPUGenerator(static_cast<uint64_t>(seed));
  const int64_t p = pts.size(0);
  std::vector<torch::Tensor> centers;
  centers.push_back(pts[torch::randint(p, {1}, gen, torch::kLong).item<int64_t>()]);
  for (int64_t i = 1; i < k; ++i) {
    auto c = torch::stack(centers);
    auto d2 = std::get<0>(torch::cdist(pts, c).pow(2).min(1));
    auto total = d2.sum();
    if (total.item<double>() <= 0) {
      centers.push_back(pts[0]);
      continue;
    }
    auto idx = torch::multinomial(d2 / total, 1, false, gen).item<int64_t>();
    centers.push_back(pts[idx]);
  }
  auto c = torch::stack(centers);
  for (int64_t it = 0; it < iters; ++it) {
    auto assign = std::get<1>(torch::cdist(pts, c).min(1));
    auto newc = c.clone();
    for (int64_t j = 0; j < k; ++j) {
      auto sel = (assign == j);
      if (sel.any().item<bool>()) newc[j] = pts.index({sel}).mean(0);
    }
    if ((newc - c).abs().max().item<double>() < 1e-6) {
      c = newc;
      break;
    }
    c = newc;
  }
  return c;
}

}  // namespace

SaliencyEstimate estimate_initial_saliency(const std::vector<RawFeatures>& raw,
                                           int64_t atlas_size, int64_t seed,
                                           int64_t k) {
  check(!raw.empty(), "estimate_initial_saliency: empty feature list");
  const int64_t n = static_cast<int64_t>(raw.size());
  const int64_t hr = raw[0].keys.size(1), wr = raw[0].keys.size(2);

  std::vector<torch::Tensor> key_list, attn_list;
  for (const auto& r : raw) {
    key_list.push_back(r.keys.reshape({r.keys.size(0), -1}).t());
    attn_list.push_back(r.attention.reshape({-1}));
  }
  auto pts = torch::cat(key_list, 0);   // [n*hr*wr, D]
  auto attn = torch::cat(attn_list, 0);

  SaliencyEstimate out;
  auto all_ones = [&] {
    out.degenerate = true;
    for (int64_t i = 0; i < n; ++i)
      out.masks.push_back(torch::ones({atlas_size, atlas_size}, torch::kFloat32));
    TORCH_WARN("initial saliency clustering degenerate; using all-ones masks");
    return out;
  };

  if (pts.std(0).max().item<double>() < 1e-9) return all_ones();

  auto centers = kmeans(pts, k, seed);
  auto d2 = torch::cdist(pts, centers).pow(2);  // [P,k]
  auto assign = std::get<1>(d2.min(1));

  // A single occupied cluster means the vote is meaningless.
  std::vector<int64_t> occupied;
  for (int64_t j = 0; j < k; ++j)
    if ((assign == j).any().item<bool>()) occupied.push_back(j);
  if (occupied.size() < 2) return all_ones();

  auto cluster_attn = torch::zeros({k}, torch::kFloat32);
  for (int64_t j = 0; j < k; ++j) {
    auto sel = (assign == j);
    if (sel.any().item<bool>())
      cluster_attn[j] = attn.index({sel}).mean();
    else
      cluster_attn[j] = -std::numeric_limits<float>::infinity();
  }
  auto occ_attn = torch::stack([&] {
    std::vector<torch::Tensor> v;
    for (auto j : occupied) v.push_back(cluster_attn[j]);
    return v;
  }());
  const double median = occ_attn.median().item<double>();
  auto votes = (cluster_attn > median).to(torch::kFloat32);
  if (votes.sum().item<double>() == 0) return all_ones();

  // Soft membership with a data-driven temperature.
  auto min_d2 = std::get<0>(d2.min(1));
  const double tau2 = std::max(min_d2.mean().item<double>(), 1e-12);
  auto memb = torch::softmax(-d2 / (2.0 * tau2), 1);
  auto soft = (memb * votes.unsqueeze(0)).sum(1).reshape({n, 1, hr, wr});

  auto blur = F::avg_pool2d(soft, F::AvgPool2dFuncOptions(3).stride(1).padding(1)
                                      .count_include_pad(false));
  auto up = F::interpolate(blur, F::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{atlas_size, atlas_size})
                                     .mode(torch::kBilinear)
                                     .align_corners(true))
                .clamp(0, 1);
  for (int64_t i = 0; i < n; ++i) out.masks.push_back(up[i].squeeze(0));
  return out;
}

std::vector<FeatureSet> build_feature_sets(const FeatureBackend& backend,
                                           const ImageSet& images,
                                           int64_t atlas_size, int64_t seed) {
  std::vector<RawFeatures> raw;
  for (int64_t i = 0; i < images.size(); ++i)
    raw.push_back(extract_keys(backend, images.images[i], images.images.size(2)));
  auto sal = estimate_initial_saliency(raw, atlas_size, seed);

  std::vector<FeatureSet> out;
  for (int64_t i = 0; i < images.size(); ++i) {
    FeatureSet f;
    f.keys = upsample_to_atlas(raw[i].keys, atlas_size, atlas_size);
    f.saliency = sal.masks[i];
    f.name = images.names[i];
    out.push_back(std::move(f));
  }
  return out;
}

namespace {

void write_f32(const std::string& path, const torch::Tensor& t) {
  auto c = t.to(torch::kFloat32).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(c.data_ptr<float>()),
            sizeof(float) * c.numel());
}

torch::Tensor read_f32(const std::string& path, const std::vector<int64_t>& shape) {
  int64_t numel = 1;
  for (auto s : shape) numel *= s;
  auto t = torch::empty(shape, torch::kFloat32);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing feature file: " + path);
  in.read(reinterpret_cast<char*>(t.data_ptr<float>()), sizeof(float) * numel);
  if (in.gcount() != static_cast<std::streamsize>(sizeof(float) * numel))
    throw SchemaError("feature file too short: " + path);
  return t;
}

}  // namespace

void save_precomputed_features(const std::string& dir,
                               const std::vector<std::string>& names,
                               const std::vector<RawFeatures>& raw,
                               const std::vector<torch::Tensor>& saliency,
                               const std::string& backend_id, int64_t stride,
                               int64_t descriptor_dim) {
  fs::create_directories(dir);
  json manifest;
  manifest["backend"] = backend_id;
  manifest["stride"] = stride;
  manifest["descriptor_dim"] = descriptor_dim;
  manifest["entries"] = json::array();
  for (size_t i = 0; i < names.size(); ++i) {
    // Stored row-major H x W x D as documented.
    auto hwd = raw[i].keys.permute({1, 2, 0}).contiguous();
    write_f32((fs::path(dir) / (names[i] + ".keys.f32")).string(), hwd);
    write_f32((fs::path(dir) / (names[i] + ".saliency.f32")).string(), saliency[i]);
    manifest["entries"].push_back(
        {{"name", names[i]},
         {"keys_shape", {hwd.size(0), hwd.size(1), hwd.size(2)}},
         {"saliency_shape", {saliency[i].size(0), saliency[i].size(1)}}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << manifest.dump(2) << "\n";
}

std::vector<FeatureSet> load_precomputed_features(const std::string& dir,
                                                  const std::vector<std::string>& names,
                                                  int64_t atlas_size,
                                                  int64_t expected_dim) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError("missing manifest.json in " + dir);
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("bad feature manifest: ") + e.what());
  }
  const int64_t dim = manifest.at("descriptor_dim").get<int64_t>();
  if (dim != expected_dim)
    throw SchemaError("feature dump descriptor_dim " + std::to_string(dim) +
                      " does not match expected " + std::to_string(expected_dim));

  std::map<std::string, json> entries;
  for (const auto& e : manifest.at("entries")) entries[e.at("name")] = e;

  std::vector<FeatureSet> out;
  for (const auto& name : names) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw IoError("feature dump has no entry for image '" + name + "'");
    auto ks = it->second.at("keys_shape").get<std::vector<int64_t>>();
    auto ss = it->second.at("saliency_shape").get<std::vector<int64_t>>();
    if (ks.size() != 3 || ks[2] != expected_dim)
      throw SchemaError("image '" + name + "': keys shape mismatch, expected D=" +
                        std::to_string(expected_dim));
    if (ss.size() != 2 || ss[0] != atlas_size || ss[1] != atlas_size)
      throw SchemaError("image '" + name + "': saliency shape mismatch, expected " +
                        std::to_string(atlas_size) + "x" + std::to_string(atlas_size));
    auto hwd = read_f32((fs::path(dir) / (name + ".keys.f32")).string(), ks);
    auto sal = read_f32((fs::path(dir) / (name + ".saliency.f32")).string(), ss);
    FeatureSet f;
    f.keys = upsample_to_atlas(hwd.permute({2, 0, 1}).contiguous(), atlas_size,
                               atlas_size);
    f.saliency = sal;
    f.name = name;
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace congeal
