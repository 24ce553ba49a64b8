#include "congeal/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "congeal/common.hpp"

namespace congeal {

using nlohmann::json;

namespace {

json to_json_obj(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["image_size"] = c.image_size;
  j["atlas_size"] = c.atlas_size;
  j["epochs"] = c.epochs;
  j["bootstrap_epochs"] = c.bootstrap_epochs;
  j["lr_stn"] = c.lr_stn;
  j["lr_atlas"] = c.lr_atlas;
  j["allow_flips"] = c.allow_flips;
  j["gradual_atlas"] = c.gradual_atlas;
  j["fixed_atlas"] = c.fixed_atlas;
  j["extreme_deformation_mode"] = c.extreme_deformation_mode;
  j["pad_mode"] = c.pad_mode;
  j["snapshot_every"] = c.snapshot_every;
  j["threads"] = c.threads;
  j["backend"] = {{"kind", c.backend.kind},
                  {"weights", c.backend.weights},
                  {"feature_dir", c.backend.feature_dir},
                  {"descriptor_dim", c.backend.descriptor_dim},
                  {"stride", c.backend.stride},
                  {"patch", c.backend.patch}};
  j["stn"] = {{"base_channels", c.stn.base_channels},
              {"max_channels", c.stn.max_channels},
              {"nonrigid_input_size", c.stn.nonrigid_input_size},
              {"coarse_grid", c.stn.coarse_grid},
              {"lrelu_slope", c.stn.lrelu_slope},
              {"blur_kernel", c.stn.blur_kernel}};
  const auto& w = c.loss;
  j["loss"] = {{"lambda_s", w.lambda_s},
               {"lambda_r", w.lambda_r},
               {"lambda_a", w.lambda_a},
               {"lambda_l", w.lambda_l},
               {"lambda_s1", w.lambda_s1},
               {"lambda_s2", w.lambda_s2},
               {"lambda_s3", w.lambda_s3},
               {"lambda_p", w.lambda_p},
               {"lambda_k", w.lambda_k},
               {"gamma", w.gamma},
               {"delta_huber", w.delta_huber},
               {"delta_local", w.delta_local},
               {"delta_global", w.delta_global},
               {"c", w.c},
               {"rigidity_multiplier", w.rigidity_multiplier},
               {"normalizer_valid_only", w.normalizer_valid_only}};
  return j;
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

void check_known_keys(const json& j, const std::vector<std::string>& known,
                      const std::string& scope) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("unknown config key: " + scope + it.key());
  }
}

RunConfig from_json_obj(const json& j) {
  RunConfig c;
  check_known_keys(j, {"seed", "image_size", "atlas_size", "epochs",
                       "bootstrap_epochs", "lr_stn", "lr_atlas", "allow_flips",
                       "gradual_atlas", "fixed_atlas", "extreme_deformation_mode",
                       "pad_mode", "snapshot_every", "threads", "backend", "stn",
                       "loss"},
                   "");
  read_field(j, "seed", c.seed);
  read_field(j, "image_size", c.image_size);
  read_field(j, "atlas_size", c.atlas_size);
  read_field(j, "epochs", c.epochs);
  read_field(j, "bootstrap_epochs", c.bootstrap_epochs);
  read_field(j, "lr_stn", c.lr_stn);
  read_field(j, "lr_atlas", c.lr_atlas);
  read_field(j, "allow_flips", c.allow_flips);
  read_field(j, "gradual_atlas", c.gradual_atlas);
  read_field(j, "fixed_atlas", c.fixed_atlas);
  read_field(j, "extreme_deformation_mode", c.extreme_deformation_mode);
  read_field(j, "pad_mode", c.pad_mode);
  read_field(j, "snapshot_every", c.snapshot_every);
  read_field(j, "threads", c.threads);
  if (j.contains("backend")) {
    const auto& b = j.at("backend");
    check_known_keys(b, {"kind", "weights", "feature_dir", "descriptor_dim",
                         "stride", "patch"},
                     "backend.");
    read_field(b, "kind", c.backend.kind);
    read_field(b, "weights", c.backend.weights);
    read_field(b, "feature_dir", c.backend.feature_dir);
    read_field(b, "descriptor_dim", c.backend.descriptor_dim);
    read_field(b, "stride", c.backend.stride);
    read_field(b, "patch", c.backend.patch);
  }
  if (j.contains("stn")) {
    const auto& s = j.at("stn");
    check_known_keys(s, {"base_channels", "max_channels", "nonrigid_input_size",
                         "coarse_grid", "lrelu_slope", "blur_kernel"},
                     "stn.");
    read_field(s, "base_channels", c.stn.base_channels);
    read_field(s, "max_channels", c.stn.max_channels);
    read_field(s, "nonrigid_input_size", c.stn.nonrigid_input_size);
    read_field(s, "coarse_grid", c.stn.coarse_grid);
    read_field(s, "lrelu_slope", c.stn.lrelu_slope);
    read_field(s, "blur_kernel", c.stn.blur_kernel);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    check_known_keys(l, {"lambda_s", "lambda_r", "lambda_a", "lambda_l",
                         "lambda_s1", "lambda_s2", "lambda_s3", "lambda_p",
                         "lambda_k", "gamma", "delta_huber", "delta_local",
                         "delta_global", "c", "rigidity_multiplier",
                         "normalizer_valid_only"},
                     "loss.");
    auto& w = c.loss;
    read_field(l, "lambda_s", w.lambda_s);
    read_field(l, "lambda_r", w.lambda_r);
    read_field(l, "lambda_a", w.lambda_a);
    read_field(l, "lambda_l", w.lambda_l);
    read_field(l, "lambda_s1", w.lambda_s1);
    read_field(l, "lambda_s2", w.lambda_s2);
    read_field(l, "lambda_s3", w.lambda_s3);
    read_field(l, "lambda_p", w.lambda_p);
    read_field(l, "lambda_k", w.lambda_k);
    read_field(l, "gamma", w.gamma);
    read_field(l, "delta_huber", w.delta_huber);
    read_field(l, "delta_local", w.delta_local);
    read_field(l, "delta_global", w.delta_global);
    read_field(l, "c", w.c);
    read_field(l, "rigidity_multiplier", w.rigidity_multiplier);
    read_field(l, "normalizer_valid_only", w.normalizer_valid_only);
  }
  return c;
}

}  // namespace

void RunConfig::validate() const {
  loss.validate();
  check(image_size >= 32, "image_size too small");
  check(atlas_size > 0 && atlas_size % stn.coarse_grid == 0,
        "atlas_size must be a positive multiple of the coarse flow grid");
  check(epochs >= 0 && bootstrap_epochs >= 0, "epoch counts must be >= 0");
  check(lr_stn > 0 && lr_atlas > 0, "learning rates must be positive");
  check(pad_mode == "replicate" || pad_mode == "zero",
        "pad_mode must be 'replicate' or 'zero'");
  check(backend.kind == "torchscript" || backend.kind == "precomputed" ||
            backend.kind == "synthetic",
        "backend.kind must be torchscript | precomputed | synthetic");
  check(backend.descriptor_dim > 0, "descriptor_dim must be positive");
  check(stn.base_channels > 0 && stn.max_channels >= stn.base_channels,
        "invalid stn channel widths");
  check(stn.nonrigid_input_size >= stn.coarse_grid * 4,
        "nonrigid_input_size too small for the coarse grid");
}

std::string RunConfig::to_json(int indent) const {
  return to_json_obj(*this).dump(indent);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return from_json_obj(j);
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void RunConfig::apply_overrides(const std::vector<std::string>& overrides) {
  if (overrides.empty()) return;
  json j = to_json_obj(*this);
  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must be key=value: " + ov);
    const std::string path = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);

    json* node = &j;
    std::string part, rest = path;
    while (true) {
      auto dot = rest.find('.');
      part = rest.substr(0, dot);
      if (!node->contains(part))
        throw ConfigError("unknown config key: " + path);
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      rest = rest.substr(dot + 1);
    }
    // Type-check the override against the existing field.
    try {
      if (node->is_string()) {
        *node = value;
      } else if (node->is_boolean()) {
        if (value == "true" || value == "1") *node = true;
        else if (value == "false" || value == "0") *node = false;
        else throw ConfigError("expected boolean for " + path + ", got " + value);
      } else if (node->is_number_integer()) {
        *node = static_cast<int64_t>(std::stoll(value));
      } else if (node->is_number_float()) {
        *node = std::stod(value);
      } else if (node->is_array()) {
        *node = json::parse(value);
      } else {
        throw ConfigError("cannot override structured key: " + path);
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("bad value for " + path + ": " + value);
    } catch (const json::exception& e) {
      throw ConfigError("bad value for " + path + ": " + e.what());
    }
  }
  *this = from_json_obj(j);
}

std::string RunConfig::hash() const {
  const std::string s = to_json_obj(*this).dump();
  uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace congeal
