#include "congeal/checkpoint.hpp"

#include <filesystem>

#include <json.hpp>

#include "congeal/common.hpp"

namespace congeal {

using nlohmann::json;

namespace {

torch::Tensor string_to_tensor(const std::string& s) {
  auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
  std::memcpy(t.data_ptr<uint8_t>(), s.data(), s.size());
  return t;
}

std::string tensor_to_string(const torch::Tensor& t) {
  auto c = t.to(torch::kUInt8).contiguous();
  return std::string(reinterpret_cast<const char*>(c.data_ptr<uint8_t>()),
                     static_cast<size_t>(c.numel()));
}

torch::Tensor require(torch::serialize::InputArchive& ar, const std::string& key) {
  torch::Tensor t;
  if (!ar.try_read(key, t))
    throw SchemaError("checkpoint missing field: " + key);
  return t;
}

torch::Tensor vec_to_tensor(const std::vector<int64_t>& v) {
  return torch::tensor(v, torch::kLong);
}

torch::Tensor vec_to_tensor(const std::vector<double>& v) {
  return torch::tensor(v, torch::kFloat64);
}

}  // namespace

void save_checkpoint(const CheckpointState& s, const std::string& path) {
  torch::serialize::OutputArchive ar;

  json manifest;
  manifest["schema_version"] = kCheckpointSchema;
  manifest["epoch"] = *s.epoch;
  manifest["config_hash"] = s.config->hash();
  ar.write("manifest", string_to_tensor(manifest.dump()));
  ar.write("config", string_to_tensor(s.config->to_json()));
  ar.write("epoch", torch::tensor(*s.epoch, torch::kLong));

  ar.write("atlas.keys", s.atlas->keys.detach());
  ar.write("atlas.saliency_logits", s.atlas->saliency_logits.detach());
  ar.write("atlas.active_set", vec_to_tensor(s.atlas->active_set));
  ar.write("atlas.fixed", torch::tensor(static_cast<int64_t>(s.atlas->fixed)));

  torch::serialize::OutputArchive rigid_ar, nonrigid_ar;
  s.rigid->save(rigid_ar);
  s.nonrigid->save(nonrigid_ar);
  ar.write("rigid_stn", rigid_ar);
  ar.write("nonrigid_stn", nonrigid_ar);

  torch::serialize::OutputArchive stn_opt_ar;
  s.stn_opt->save(stn_opt_ar);
  ar.write("stn_opt", stn_opt_ar);
  if (s.atlas_opt) {
    torch::serialize::OutputArchive atlas_opt_ar;
    s.atlas_opt->save(atlas_opt_ar);
    ar.write("atlas_opt", atlas_opt_ar);
  }

  ar.write("rng_state", at::detail::getDefaultCPUGenerator().get_state());
  ar.write("orientations", vec_to_tensor(*s.orientations));
  ar.write("keys_losses", vec_to_tensor(*s.keys_losses));
  json names = json::array();
  for (const auto& n : *s.image_names) names.push_back(n);
  ar.write("image_names", string_to_tensor(names.dump()));

  std::filesystem::create_directories(
      std::filesystem::path(path).parent_path().empty()
          ? "."
          : std::filesystem::path(path).parent_path().string());
  ar.save_to(path);
}

void load_checkpoint(CheckpointState& s, const std::string& path) {
  if (!std::filesystem::exists(path))
    throw IoError("checkpoint not found: " + path);
  torch::serialize::InputArchive ar;
  ar.load_from(path);

  auto manifest = json::parse(tensor_to_string(require(ar, "manifest")));
  const int64_t schema = manifest.at("schema_version").get<int64_t>();
  if (schema != kCheckpointSchema)
    throw SchemaError("checkpoint schema version " + std::to_string(schema) +
                      " does not match code schema " +
                      std::to_string(kCheckpointSchema));

  *s.config = RunConfig::from_json(tensor_to_string(require(ar, "config")));
  *s.epoch = require(ar, "epoch").item<int64_t>();

  {
    torch::NoGradGuard ng;
    s.atlas->keys.copy_(require(ar, "atlas.keys"));
    s.atlas->saliency_logits.copy_(require(ar, "atlas.saliency_logits"));
  }
  auto active = require(ar, "atlas.active_set");
  s.atlas->active_set.assign(active.data_ptr<int64_t>(),
                             active.data_ptr<int64_t>() + active.numel());
  s.atlas->fixed = require(ar, "atlas.fixed").item<int64_t>() != 0;
  if (s.atlas->fixed) {
    s.atlas->keys.set_requires_grad(false);
    s.atlas->saliency_logits.set_requires_grad(false);
  }

  torch::serialize::InputArchive rigid_ar, nonrigid_ar;
  if (!ar.try_read("rigid_stn", rigid_ar))
    throw SchemaError("checkpoint missing field: rigid_stn");
  s.rigid->load(rigid_ar);
  if (!ar.try_read("nonrigid_stn", nonrigid_ar))
    throw SchemaError("checkpoint missing field: nonrigid_stn");
  s.nonrigid->load(nonrigid_ar);

  if (s.stn_opt) {
    torch::serialize::InputArchive stn_opt_ar;
    if (!ar.try_read("stn_opt", stn_opt_ar))
      throw SchemaError("checkpoint missing field: stn_opt");
    s.stn_opt->load(stn_opt_ar);
  }
  if (s.atlas_opt) {
    torch::serialize::InputArchive atlas_opt_ar;
    if (!ar.try_read("atlas_opt", atlas_opt_ar))
      throw SchemaError("checkpoint missing field: atlas_opt");
    s.atlas_opt->load(atlas_opt_ar);
  }

  auto gen = at::detail::getDefaultCPUGenerator();
  gen.set_state(require(ar, "rng_state"));

  auto orient = require(ar, "orientations");
  s.orientations->assign(orient.data_ptr<int64_t>(),
                         orient.data_ptr<int64_t>() + orient.numel());
  auto kl = require(ar, "keys_losses");
  s.keys_losses->assign(kl.data_ptr<double>(),
                        kl.data_ptr<double>() + kl.numel());
  auto names = json::parse(tensor_to_string(require(ar, "image_names")));
  s.image_names->clear();
  for (const auto& n : names) s.image_names->push_back(n.get<std::string>());
}

RunConfig peek_checkpoint_config(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw IoError("checkpoint not found: " + path);
  torch::serialize::InputArchive ar;
  ar.load_from(path);
  return RunConfig::from_json(tensor_to_string(require(ar, "config")));
}

}  // namespace congeal
