#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "congeal/apps.hpp"
#include "congeal/common.hpp"
#include "congeal/features.hpp"
#include "congeal/trainer.hpp"

namespace fs = std::filesystem;
using namespace congeal;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  bool show_config = false;
};

void add_config_flags(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "run config (JSON)");
  cmd->add_option("--set", args.overrides,
                  "config override as dotted key=value (repeatable)");
  cmd->add_flag("--show-config", args.show_config,
                "print the merged config and exit");
}

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) cfg = RunConfig::load(args.config_path);
  cfg.apply_overrides(args.overrides);
  if (cfg.backend.weights.empty()) {
    if (const char* env = std::getenv("CONGEAL_BACKEND_WEIGHTS"))
      cfg.backend.weights = env;
  }
  cfg.validate();
  return cfg;
}

std::vector<std::string> resolve_image_paths(const std::string& dir,
                                             std::vector<std::string> files) {
  if (!dir.empty()) {
    auto listed = list_images(dir);
    files.insert(files.end(), listed.begin(), listed.end());
  }
  if (files.empty()) throw ConfigError("no input images given (--images/--image)");
  return files;
}

std::vector<FeatureSet> resolve_features(const RunConfig& cfg,
                                         const ImageSet& images,
                                         const std::string& feature_dir) {
  std::string dir = feature_dir.empty() ? cfg.backend.feature_dir : feature_dir;
  if (cfg.backend.kind == "precomputed" || !dir.empty()) {
    if (dir.empty())
      throw ConfigError("backend.kind=precomputed requires backend.feature_dir");
    return load_precomputed_features(dir, images.names, cfg.atlas_size,
                                     cfg.backend.descriptor_dim);
  }
  auto backend = make_backend(cfg);
  return build_feature_sets(*backend, images, cfg.atlas_size, cfg.seed);
}

int run_cli(int argc, char** argv) {
  CLI::App app{"joint image congealing: learn a feature atlas and dense "
               "mappings for a small image set"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "optimize atlas and mappings");
  CommonArgs train_args;
  std::string train_dir, train_out = "run", train_features, train_resume;
  std::vector<std::string> train_files;
  add_config_flags(train_cmd, train_args);
  train_cmd->add_option("--images", train_dir, "directory of input images");
  train_cmd->add_option("--image", train_files, "explicit image path (repeatable)");
  train_cmd->add_option("--features", train_features, "precomputed feature dir");
  train_cmd->add_option("--out", train_out, "run output directory");
  train_cmd->add_option("--resume", train_resume, "checkpoint to resume from");

  // eval-pck
  auto* eval_cmd = app.add_subcommand("eval-pck", "PCK-Transfer evaluation");
  std::string eval_ckpt, eval_dir, eval_ann, eval_out, eval_mode;
  std::vector<std::string> eval_files;
  double eval_alpha = 0.1;
  bool eval_macro = false;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  eval_cmd->add_option("--images", eval_dir, "directory of input images");
  eval_cmd->add_option("--image", eval_files, "explicit image path (repeatable)");
  eval_cmd->add_option("--annotations", eval_ann, "keypoint annotations JSON")
      ->required();
  eval_cmd->add_option("--alpha", eval_alpha, "PCK threshold fraction");
  eval_cmd->add_option("--mode", eval_mode, "threshold mode: bbox | image");
  eval_cmd->add_flag("--macro", eval_macro, "macro-average over pairs");
  eval_cmd->add_option("--out", eval_out, "write the JSON report here");

  // edit
  auto* edit_cmd = app.add_subcommand("edit", "propagate an RGBA edit");
  std::string edit_ckpt, edit_dir, edit_png, edit_frame = "atlas", edit_out = "edits";
  std::string edit_source;
  std::vector<std::string> edit_files;
  bool edit_premult = false;
  edit_cmd->add_option("--checkpoint", edit_ckpt, "trained checkpoint")->required();
  edit_cmd->add_option("--images", edit_dir, "directory of input images");
  edit_cmd->add_option("--image", edit_files, "explicit image path (repeatable)");
  edit_cmd->add_option("--edit", edit_png, "RGBA edit layer (PNG)")->required();
  edit_cmd->add_option("--frame", edit_frame, "edit frame: atlas | image");
  edit_cmd->add_option("--source", edit_source,
                       "source image name when --frame image");
  edit_cmd->add_flag("--premultiplied", edit_premult, "edit RGB is premultiplied");
  edit_cmd->add_option("--out", edit_out, "output directory");

  // export
  auto* export_cmd = app.add_subcommand("export", "write congealed images, "
                                                  "atlas and refined masks");
  std::string export_ckpt, export_dir, export_out = "export";
  std::vector<std::string> export_files;
  export_cmd->add_option("--checkpoint", export_ckpt, "trained checkpoint")
      ->required();
  export_cmd->add_option("--images", export_dir, "directory of input images");
  export_cmd->add_option("--image", export_files, "explicit image path (repeatable)");
  export_cmd->add_option("--out", export_out, "output directory");

  // extract-features
  auto* feat_cmd = app.add_subcommand("extract-features",
                                      "dump backend features for later runs");
  CommonArgs feat_args;
  std::string feat_dir, feat_out = "features";
  std::vector<std::string> feat_files;
  add_config_flags(feat_cmd, feat_args);
  feat_cmd->add_option("--images", feat_dir, "directory of input images");
  feat_cmd->add_option("--image", feat_files, "explicit image path (repeatable)");
  feat_cmd->add_option("--out", feat_out, "feature dump directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints help or the offending flag
    return rc == 0 ? 0 : 1;
  }

  if (train_cmd->parsed()) {
    auto cfg = resolve_config(train_args);
    if (train_args.show_config) {
      std::cout << cfg.to_json() << "\n";
      return 0;
    }
    auto paths = resolve_image_paths(train_dir, train_files);
    auto images = load_image_set(paths, cfg.image_size, cfg.pad_mode);
    auto features = resolve_features(cfg, images, train_features);
    Trainer trainer(images, features, cfg);
    TrainOptions opts;
    opts.out_dir = train_out;
    opts.resume_path = train_resume;
    trainer.train(opts);
    trainer.save((fs::path(train_out) / "checkpoint.ckpt").string());
    auto run = TrainedRun::from_trainer(trainer);
    run.images = images;
    run.build_mappings();
    export_visuals(run, train_out);
    std::cout << "run written to " << train_out << "\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    auto images = load_image_set(resolve_image_paths(eval_dir, eval_files));
    auto run = TrainedRun::from_checkpoint(eval_ckpt, std::move(images));
    auto ann = load_annotations(eval_ann);
    if (!eval_mode.empty()) {
      if (eval_mode != "bbox" && eval_mode != "image")
        throw ConfigError("--mode must be bbox or image");
      ann.threshold_mode = eval_mode;
    }
    auto result = evaluate_pck(run, ann, eval_alpha, eval_macro);
    std::cout << result.to_json() << "\n";
    if (!eval_out.empty()) {
      std::ofstream out(eval_out);
      if (!out) throw IoError("cannot write " + eval_out);
      out << result.to_json() << "\n";
    }
    return 0;
  }

  if (edit_cmd->parsed()) {
    auto images = load_image_set(resolve_image_paths(edit_dir, edit_files));
    auto run = TrainedRun::from_checkpoint(edit_ckpt, std::move(images));
    auto layer = load_edit_layer(edit_png, edit_premult);
    std::vector<torch::Tensor> edited;
    if (edit_frame == "atlas") {
      edited = propagate_edit(run, layer);
    } else if (edit_frame == "image") {
      if (edit_source.empty())
        throw ConfigError("--frame image requires --source");
      edited = edit_via_image(run, run.index_of(edit_source), layer);
    } else {
      throw ConfigError("--frame must be atlas or image");
    }
    for (size_t i = 0; i < edited.size(); ++i)
      write_image((fs::path(edit_out) / (run.images.names[i] + "_edited.png"))
                      .string(),
                  edited[i]);
    std::cout << "edits written to " << edit_out << "\n";
    return 0;
  }

  if (export_cmd->parsed()) {
    auto images = load_image_set(resolve_image_paths(export_dir, export_files));
    auto run = TrainedRun::from_checkpoint(export_ckpt, std::move(images));
    export_visuals(run, export_out);
    std::cout << "visuals written to " << export_out << "\n";
    return 0;
  }

  if (feat_cmd->parsed()) {
    auto cfg = resolve_config(feat_args);
    if (feat_args.show_config) {
      std::cout << cfg.to_json() << "\n";
      return 0;
    }
    auto images = load_image_set(resolve_image_paths(feat_dir, feat_files),
                                 cfg.image_size, cfg.pad_mode);
    auto backend = make_backend(cfg);
    std::vector<RawFeatures> raw;
    for (int64_t i = 0; i < images.size(); ++i)
      raw.push_back(extract_keys(*backend, images.images[i], cfg.image_size));
    auto sal = estimate_initial_saliency(raw, cfg.atlas_size, cfg.seed);
    save_precomputed_features(feat_out, images.names, raw, sal.masks,
                              backend->id(), backend->stride(),
                              backend->descriptor_dim());
    std::cout << "features written to " << feat_out << "\n";
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
