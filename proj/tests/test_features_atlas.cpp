#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN

#include <torch/torch.h>

#include "congeal/atlas.hpp"
#include "congeal/features.hpp"
#include "congeal/losses.hpp"
#include "congeal/synthetic.hpp"
#include "test_util.hpp"
#include "congeal_doctest.hpp"

using namespace congeal;
using congeal::testing::TempDir;
using congeal::testing::tiny_config;

TEST_CASE("synthetic backend: shapes, determinism, constant input") {
  BackendConfig bc;
  bc.kind = "synthetic";
  bc.descriptor_dim = 6;
  auto backend = make_synthetic_backend(bc);

  auto img = torch::rand({3, 64, 64});
  auto r1 = extract_keys(*backend, img, 64);
  auto r2 = extract_keys(*backend, img, 64);
  CHECK(r1.keys.equal(r2.keys));  // determinism
  CHECK(r1.keys.size(0) == 6);
  CHECK(r1.keys.size(1) == (64 - 8) / 4 + 1);
  CHECK(r1.attention.sizes() == r1.keys.sizes().slice(1));

  auto constant = torch::full({3, 64, 64}, 0.5f);
  auto rc = backend->extract(constant);
  auto per_channel_std = rc.keys.reshape({6, -1}).std(1);
  CHECK(per_channel_std.max().item<double>() < 1e-6);

  CHECK_THROWS_AS(extract_keys(*backend, torch::rand({3, 32, 64}), 64),
                  ConfigError);
}

TEST_CASE("torchscript backend: missing weights point at precomputed mode") {
  BackendConfig bc;
  bc.kind = "torchscript";
  bc.weights = "/definitely/not/here.pt";
  CHECK_THROWS_WITH_AS(make_torchscript_backend(bc),
                       doctest::Contains("precomputed"), ConfigError);
}

TEST_CASE("upsample_to_atlas: constants, ramps, mean preservation") {
  auto constant = torch::full({4, 9, 9}, 1.7f);
  auto up = upsample_to_atlas(constant, 32, 32);
  CHECK((up - 1.7f).abs().max().item<double>() < 1e-6);

  // linear ramp along x is preserved under corner-aligned bilinear
  auto ramp = torch::linspace(0, 1, 9).view({1, 1, 9}).expand({1, 9, 9});
  auto upr = upsample_to_atlas(ramp.contiguous(), 33, 33);
  auto expect = torch::linspace(0, 1, 33).view({1, 1, 33}).expand({1, 33, 33});
  CHECK((upr - expect).abs().max().item<double>() < 1e-6);

  // 63x63 -> 128x128 keeps channel means within 1%
  torch::manual_seed(8);
  auto raw = torch::rand({4, 63, 63});
  auto up2 = upsample_to_atlas(raw, 128, 128);
  auto m1 = raw.reshape({4, -1}).mean(1);
  auto m2 = up2.reshape({4, -1}).mean(1);
  CHECK(((m2 - m1).abs() / m1).max().item<double>() < 0.01);

  CHECK_THROWS_AS(upsample_to_atlas(torch::rand({4, 65, 65}), 32, 32),
                  ConfigError);
}

TEST_CASE("initial saliency: two well-separated clusters") {
  torch::manual_seed(13);
  const int64_t hr = 16, n = 3, d = 8;
  // foreground = disk around center with keys near mu_f, background near mu_b
  auto mu_f = torch::ones({d}) * 2.0;
  auto mu_b = -torch::ones({d}) * 2.0;
  std::vector<RawFeatures> raw;
  auto lattice = coord_lattice(hr, hr);
  auto fg = lattice.pow(2).sum(-1).sqrt() <= 0.6;
  for (int64_t i = 0; i < n; ++i) {
    auto noise = torch::randn({d, hr, hr}) * 0.05;
    auto keys = torch::where(fg.unsqueeze(0), mu_f.view({d, 1, 1}),
                             mu_b.view({d, 1, 1})) +
                noise;
    RawFeatures r;
    r.keys = keys;
    r.attention = torch::where(fg, torch::full({hr, hr}, 0.9f),
                               torch::full({hr, hr}, 0.05f));
    raw.push_back(r);
  }
  auto est = estimate_initial_saliency(raw, 32, 7);
  CHECK(!est.degenerate);
  auto fg32 = upsample_to_atlas(fg.to(torch::kFloat32).unsqueeze(0), 32, 32)
                  .squeeze(0) > 0.99;
  auto bg32 = upsample_to_atlas(fg.to(torch::kFloat32).unsqueeze(0), 32, 32)
                  .squeeze(0) < 0.01;
  for (const auto& m : est.masks) {
    CHECK(m.index({fg32}).min().item<double>() >= 0.9);
    CHECK(m.index({bg32}).max().item<double>() <= 0.1);
    CHECK(m.min().item<double>() >= 0.0);
    CHECK(m.max().item<double>() <= 1.0);
  }

  // identical images -> identical masks
  std::vector<RawFeatures> same = {raw[0], raw[0]};
  auto est2 = estimate_initial_saliency(same, 32, 7);
  CHECK(est2.masks[0].equal(est2.masks[1]));

  // constant features -> all-ones fallback
  RawFeatures flat;
  flat.keys = torch::ones({d, hr, hr});
  flat.attention = torch::ones({hr, hr});
  auto est3 = estimate_initial_saliency({flat, flat}, 32, 7);
  CHECK(est3.degenerate);
  CHECK(est3.masks[0].min().item<double>() == 1.0);
}

TEST_CASE("precomputed features: round trip and per-file errors") {
  auto cfg = tiny_config();
  auto set = make_synthetic_set({.n_images = 2, .image_size = 64, .seed = 3})
                 .to_image_set();
  auto backend = make_synthetic_backend(cfg.backend);

  std::vector<RawFeatures> raw;
  for (int64_t i = 0; i < set.size(); ++i)
    raw.push_back(extract_keys(*backend, set.images[i], 64));
  auto sal = estimate_initial_saliency(raw, cfg.atlas_size, cfg.seed);

  TempDir tmp("featdump");
  save_precomputed_features(tmp.str(), set.names, raw, sal.masks,
                            backend->id(), backend->stride(),
                            backend->descriptor_dim());

  auto loaded = load_precomputed_features(tmp.str(), set.names, cfg.atlas_size,
                                          cfg.backend.descriptor_dim);
  auto live = build_feature_sets(*backend, set, cfg.atlas_size, cfg.seed);
  for (size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].keys.equal(live[i].keys));  // bit-identical
    CHECK(loaded[i].saliency.equal(live[i].saliency));
  }

  // missing file: error names the image
  std::filesystem::remove(tmp.file(set.names[1] + ".keys.f32"));
  CHECK_THROWS_WITH_AS(load_precomputed_features(tmp.str(), set.names,
                                                 cfg.atlas_size, 6),
                       doctest::Contains(set.names[1]), IoError);

  // wrong descriptor dim: error reports the expectation
  CHECK_THROWS_WITH_AS(load_precomputed_features(tmp.str(), {set.names[0]},
                                                 cfg.atlas_size, 384),
                       doctest::Contains("384"), SchemaError);
}

TEST_CASE("atlas init: statistics, determinism, saliency at 0.5") {
  auto cfg = tiny_config();
  cfg.atlas_size = 64;
  cfg.backend.descriptor_dim = 32;  // D*N_A = 32*4096 > 1e5 samples
  FeatureSet f;
  f.keys = torch::zeros({32, 64, 64});
  f.saliency = torch::ones({64, 64});
  f.name = "x";

  torch::manual_seed(cfg.seed);
  auto a1 = init_atlas(cfg, {f, f});
  CHECK((a1.saliency() - 0.5).abs().max().item<double>() < 1e-7);
  const double std = a1.keys.std().item<double>();
  CHECK(std >= 0.008);
  CHECK(std <= 0.012);
  CHECK(a1.active_set.size() == 2);

  torch::manual_seed(cfg.seed);
  auto a2 = init_atlas(cfg, {f, f});
  CHECK(a2.keys.equal(a1.keys));
}

TEST_CASE("select_seed_image") {
  // identical images tie -> index 0
  FeatureSet f;
  f.keys = torch::rand({4, 16, 16});
  f.saliency = torch::ones({16, 16});
  CHECK(select_seed_image({f, f, f}) == 0);
  CHECK(select_seed_image({f}) == 0);

  // image equal to the mean field wins
  torch::manual_seed(5);
  auto base = torch::rand({4, 16, 16});
  FeatureSet g0, g1, g2;
  auto d0 = torch::randn({4, 16, 16}) * 0.3;
  g0.keys = base + d0;
  g1.keys = base - d0;        // mean of g0,g1,g2 = base
  g2.keys = base;             // exactly the mean field
  g0.saliency = g1.saliency = g2.saliency = torch::ones({16, 16});
  CHECK(select_seed_image({g0, g1, g2}) == 2);

  // empty saliency region falls back to the full image
  FeatureSet h0 = g0, h2 = g2;
  h0.saliency = torch::zeros({16, 16});
  h2.saliency = torch::zeros({16, 16});
  CHECK(select_seed_image({h0, h2}) == 1);
}

TEST_CASE("grow_active_set") {
  Atlas atlas;
  atlas.active_set = {3};
  grow_active_set(atlas, {0.9, 0.2, 0.5, 0.1});
  CHECK(atlas.active_set == std::vector<int64_t>{3, 1});
  grow_active_set(atlas, {0.9, 0.2, 0.5, 0.1});
  CHECK(atlas.active_set == std::vector<int64_t>{3, 1, 2});
  grow_active_set(atlas, {0.9, 0.2, 0.5, 0.1});
  grow_active_set(atlas, {0.9, 0.2, 0.5, 0.1});  // no-op once full
  CHECK(atlas.active_set.size() == 4);
}

TEST_CASE("fixed atlas: self-match, frozen, saliency recovery") {
  auto cfg = tiny_config();
  FeatureSet seed;
  torch::manual_seed(2);
  seed.keys = torch::rand({6, 32, 32});
  seed.saliency = torch::rand({32, 32});
  seed.name = "seed";

  Atlas atlas;
  atlas.keys = torch::zeros({6, 32, 32}).set_requires_grad(true);
  atlas.saliency_logits = torch::zeros({32, 32}).set_requires_grad(true);
  init_fixed_atlas(atlas, seed);

  CHECK(atlas.fixed);
  CHECK(!atlas.keys.requires_grad());
  CHECK(atlas.keys.equal(seed.keys));
  CHECK((atlas.saliency() - seed.saliency.clamp(1e-4, 1 - 1e-4))
            .abs()
            .max()
            .item<double>() < 1e-3);

  // keys loss of the seed under the identity mapping is ~0
  auto v = torch::ones({1, 32, 32}, torch::kBool);
  auto kl = keys_loss(seed.keys.unsqueeze(0), atlas.keys, atlas.saliency(), v,
                      0.875, true);
  CHECK(kl.values.item<double>() < 1e-9);
}
