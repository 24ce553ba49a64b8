#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN

#include <fstream>

#include <torch/torch.h>

#include "congeal/annotations.hpp"
#include "congeal/checkpoint.hpp"
#include "congeal/config.hpp"
#include "congeal/features.hpp"
#include "congeal/image_io.hpp"
#include "congeal/synthetic.hpp"
#include "congeal/trainer.hpp"
#include "test_util.hpp"
#include "congeal_doctest.hpp"

using namespace congeal;
using congeal::testing::TempDir;
using congeal::testing::tiny_config;

namespace {

void write_png(const std::string& path, int64_t h, int64_t w, uint64_t seed) {
  torch::manual_seed(seed);
  write_image(path, torch::rand({3, h, w}));
}

std::vector<FeatureSet> tiny_features(const RunConfig& cfg, const ImageSet& set) {
  auto backend = make_synthetic_backend(cfg.backend);
  return build_feature_sets(*backend, set, cfg.atlas_size, cfg.seed);
}

}  // namespace

TEST_CASE("load_image_set: sizes, padding, errors") {
  TempDir tmp("imageset");
  write_png(tmp.file("a.png"), 40, 40, 1);
  write_png(tmp.file("b.png"), 30, 50, 2);
  write_png(tmp.file("c.jpg"), 64, 32, 3);

  auto set = load_image_set({tmp.file("a.png"), tmp.file("b.png"),
                             tmp.file("c.jpg")},
                            64);
  CHECK(set.size() == 3);
  CHECK(set.images.sizes() == torch::IntArrayRef({3, 3, 64, 64}));
  CHECK(set.names[1] == "b");
  CHECK(set.pad_info[1].pad_top == 10);  // 30x50 -> 50x50
  CHECK(set.pad_info[1].pad_left == 0);
  CHECK(set.pad_info[2].pad_left == 16);  // 64x32 -> 64x64

  CHECK_THROWS_AS(load_image_set({tmp.file("a.png")}, 64), ConfigError);
  CHECK_THROWS_WITH_AS(
      load_image_set({tmp.file("a.png"), tmp.file("missing.png")}, 64),
      doctest::Contains("missing.png"), IoError);
}

TEST_CASE("preprocessing is idempotent at the working size") {
  torch::manual_seed(4);
  auto img = torch::rand({3, 64, 64});
  auto [out, info] = preprocess_image(img, 64, "replicate");
  CHECK(out.equal(img));
  CHECK(info.pad_left == 0);
  CHECK(info.pad_top == 0);

  // one image input twice gives identical arrays
  auto [out2, info2] = preprocess_image(img, 64, "replicate");
  CHECK(out.equal(out2));
}

TEST_CASE("pad_info worked example: 300x200 keypoint to (128,128)") {
  auto img = torch::rand({3, 200, 300});
  auto [out, info] = preprocess_image(img, 256, "replicate");
  CHECK(out.sizes() == torch::IntArrayRef({3, 256, 256}));
  CHECK(info.pad_top == 50);
  CHECK(info.pad_left == 0);

  auto kp = torch::tensor({{150.0f, 100.0f}});
  auto working = info.to_working(kp);
  CHECK(working[0][0].item<double>() == doctest::Approx(128.0).epsilon(1e-9));
  CHECK(working[0][1].item<double>() == doctest::Approx(128.0).epsilon(1e-9));

  // round trip identity within 1e-6 px
  torch::manual_seed(6);
  auto pts = torch::rand({50, 2}) * 199.0;
  auto back = info.to_original(info.to_working(pts));
  CHECK((back - pts).abs().max().item<double>() < 1e-6);
}

TEST_CASE("pad modes: replicate vs zero") {
  auto img = torch::ones({3, 2, 4});
  auto [rep, _i1] = preprocess_image(img, 4, "replicate");
  CHECK(rep.min().item<double>() == doctest::Approx(1.0));
  auto [zero, _i2] = preprocess_image(img, 4, "zero");
  CHECK(zero[0][0][0].item<double>() == doctest::Approx(0.0));
}

TEST_CASE("config: round trip, overrides, unknown keys") {
  RunConfig cfg;
  auto text = cfg.to_json();
  auto back = RunConfig::from_json(text);
  CHECK(back.to_json() == text);
  CHECK(back.hash() == cfg.hash());

  cfg.apply_overrides({"loss.lambda_s=2.5", "atlas_size=64", "allow_flips=true",
                       "backend.kind=synthetic"});
  CHECK(cfg.loss.lambda_s == doctest::Approx(2.5));
  CHECK(cfg.atlas_size == 64);
  CHECK(cfg.allow_flips);
  CHECK(cfg.backend.kind == "synthetic");

  CHECK_THROWS_WITH_AS(cfg.apply_overrides({"no_such_key=1"}),
                       doctest::Contains("no_such_key"), ConfigError);
  CHECK_THROWS_AS(cfg.apply_overrides({"epochs=abc"}), ConfigError);
  CHECK_THROWS_WITH_AS(
      RunConfig::from_json("{\"mystery\": 1}"),
      doctest::Contains("mystery"), ConfigError);

  RunConfig bad;
  bad.atlas_size = 100;  // not a multiple of the coarse grid
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoint: bit-exact round trip and schema errors") {
  auto cfg = tiny_config();
  auto set = make_synthetic_set({.n_images = 2, .image_size = 64, .seed = 5})
                 .to_image_set();
  auto features = tiny_features(cfg, set);

  TempDir tmp("ckpt");
  Trainer a(set, features, cfg);
  a.step_epoch();
  a.step_epoch();
  a.save(tmp.file("state.ckpt"));

  Trainer b(set, features, cfg);
  b.resume(tmp.file("state.ckpt"));
  CHECK(b.epoch() == 2);
  CHECK(b.atlas().keys.equal(a.atlas().keys));
  CHECK(b.atlas().saliency_logits.equal(a.atlas().saliency_logits));
  auto pa = a.rigid()->parameters();
  auto pb = b.rigid()->parameters();
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pb[i].equal(pa[i]));
  auto na = a.nonrigid()->parameters();
  auto nb = b.nonrigid()->parameters();
  for (size_t i = 0; i < na.size(); ++i) CHECK(nb[i].equal(na[i]));

  // missing atlas field -> schema error naming it
  {
    torch::serialize::OutputArchive ar;
    std::string manifest = "{\"schema_version\":1,\"epoch\":0,\"config_hash\":\"x\"}";
    auto mt = torch::empty({static_cast<int64_t>(manifest.size())}, torch::kUInt8);
    std::memcpy(mt.data_ptr<uint8_t>(), manifest.data(), manifest.size());
    ar.write("manifest", mt);
    auto cj = cfg.to_json();
    auto ct = torch::empty({static_cast<int64_t>(cj.size())}, torch::kUInt8);
    std::memcpy(ct.data_ptr<uint8_t>(), cj.data(), cj.size());
    ar.write("config", ct);
    ar.write("epoch", torch::tensor(int64_t{0}));
    ar.save_to(tmp.file("broken.ckpt"));
  }
  Trainer c(set, features, cfg);
  CHECK_THROWS_WITH_AS(c.resume(tmp.file("broken.ckpt")),
                       doctest::Contains("atlas.keys"), SchemaError);

  // schema version mismatch
  {
    torch::serialize::OutputArchive ar;
    std::string manifest = "{\"schema_version\":999,\"epoch\":0,\"config_hash\":\"x\"}";
    auto mt = torch::empty({static_cast<int64_t>(manifest.size())}, torch::kUInt8);
    std::memcpy(mt.data_ptr<uint8_t>(), manifest.data(), manifest.size());
    ar.write("manifest", mt);
    ar.save_to(tmp.file("vers.ckpt"));
  }
  Trainer d(set, features, cfg);
  CHECK_THROWS_WITH_AS(d.resume(tmp.file("vers.ckpt")),
                       doctest::Contains("schema"), SchemaError);
}

TEST_CASE("resumed training equals an uninterrupted run") {
  auto cfg = tiny_config();
  cfg.epochs = 8;
  cfg.bootstrap_epochs = 4;
  auto set = make_synthetic_set({.n_images = 2, .image_size = 64, .seed = 9})
                 .to_image_set();
  auto features = tiny_features(cfg, set);

  Trainer straight(set, features, cfg);
  straight.train();

  TempDir tmp("resume");
  Trainer first(set, features, cfg);
  for (int i = 0; i < 4; ++i) first.step_epoch();
  first.save(tmp.file("mid.ckpt"));

  Trainer second(set, features, cfg);
  TrainOptions opts;
  opts.resume_path = tmp.file("mid.ckpt");
  second.train(opts);

  CHECK(second.atlas().keys.equal(straight.atlas().keys));
  CHECK(second.atlas().saliency_logits.equal(straight.atlas().saliency_logits));
  auto ps = straight.rigid()->parameters();
  auto pr = second.rigid()->parameters();
  for (size_t i = 0; i < ps.size(); ++i) CHECK(pr[i].equal(ps[i]));
}

TEST_CASE("annotations: load, validation") {
  TempDir tmp("ann");
  {
    std::ofstream out(tmp.file("ann.json"));
    out << R"({"threshold_mode": "bbox", "pairs": [
      {"source": "a", "target": "b",
       "src_keypoints": [[1.0, 2.0], [3.0, 4.0]],
       "tgt_keypoints": [[5.0, 6.0], [7.0, 8.0]],
       "bbox": [0, 0, 10, 20]}]})";
  }
  auto ann = load_annotations(tmp.file("ann.json"));
  CHECK(ann.threshold_mode == "bbox");
  CHECK(ann.pairs.size() == 1);
  CHECK(ann.pairs[0].src_points.size(0) == 2);
  CHECK((*ann.pairs[0].bbox)[3] == doctest::Approx(20.0));

  {
    std::ofstream out(tmp.file("bad.json"));
    out << R"({"pairs": [{"source": "a", "target": "b",
       "src_keypoints": [[1, 2]], "tgt_keypoints": []}]})";
  }
  CHECK_THROWS_AS(load_annotations(tmp.file("bad.json")), SchemaError);

  save_annotations(ann, tmp.file("round.json"));
  auto back = load_annotations(tmp.file("round.json"));
  CHECK(back.pairs[0].src_points.equal(ann.pairs[0].src_points));
}
