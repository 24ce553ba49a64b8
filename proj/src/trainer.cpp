#include "congeal/trainer.hpp"

#include <filesystem>
#include <fstream>

#include "congeal/common.hpp"

namespace congeal {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

LossWeights apply_extreme_mode(LossWeights w) {
  w.rigidity_multiplier = 0.25;
  w.lambda_s3 = 0.9;
  return w;
}

Trainer::Trainer(ImageSet images, std::vector<FeatureSet> features,
                 RunConfig config)
    : cfg_(std::move(config)), set_(std::move(images)) {
  cfg_.validate();
  check(set_.size() >= 2, "training needs at least 2 images");
  check(static_cast<int64_t>(features.size()) == set_.size(),
        "feature sets do not match the image set");
  if (cfg_.threads > 0) at::set_num_threads(static_cast<int>(cfg_.threads));
  torch::manual_seed(static_cast<uint64_t>(cfg_.seed));

  weights_ = cfg_.extreme_deformation_mode ? apply_extreme_mode(cfg_.loss)
                                           : cfg_.loss;
  weights_.validate();

  images_ = set_.images;
  flipped_ = torch::flip(images_, {3});
  std::vector<torch::Tensor> k, s;
  for (const auto& f : features) {
    k.push_back(f.keys);
    s.push_back(f.saliency);
  }
  keys_ = torch::stack(k);
  saliency_ = torch::stack(s);

  atlas_ = init_atlas(cfg_, features);
  rigid_ = RigidSTN(cfg_.image_size, cfg_.stn);
  nonrigid_ = NonRigidSTN(cfg_.stn.nonrigid_input_size, cfg_.stn);

  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(rigid_->parameters());
  groups.emplace_back(nonrigid_->parameters());
  stn_opt_ = std::make_unique<torch::optim::Adam>(
      groups, torch::optim::AdamOptions(cfg_.lr_stn).betas({0.9, 0.999}).eps(1e-8));
  if (!atlas_.fixed) {
    atlas_opt_ = std::make_unique<torch::optim::Adam>(
        atlas_.parameters(),
        torch::optim::AdamOptions(cfg_.lr_atlas).betas({0.9, 0.999}).eps(1e-8));
  }

  orientations_.assign(set_.size(), 0);
  keys_losses_.assign(set_.size(), 0.0);
}

LossReport Trainer::objective_pass(bool composed, bool atlas_live) {
  const int64_t n = set_.size();
  const int64_t ha = cfg_.atlas_size, wa = cfg_.atlas_size;
  const bool flips = cfg_.allow_flips;
  const int64_t b = flips ? 2 * n : n;

  auto net_input = flips ? torch::cat({images_, flipped_}) : images_;
  auto src_images = flips ? torch::cat({images_, images_}) : images_;
  auto src_keys = flips ? torch::cat({keys_, keys_}) : keys_;
  auto src_sal = flips ? torch::cat({saliency_, saliency_}) : saliency_;
  auto flip_flags =
      flips ? torch::cat({torch::zeros({n}, torch::kBool),
                          torch::ones({n}, torch::kBool)})
            : torch::zeros({n}, torch::kBool);

  SimilarityParams p;
  if (composed) {
    // Only the non-rigid network affects the atlas pass; the similarity is
    // treated as a constant here.
    torch::NoGradGuard ng;
    p = rigid_->forward(net_input);
  } else {
    p = rigid_->forward(net_input);
  }

  FlowField flow;
  if (composed) {
    auto rigid_grid = compose_mapping(p, FlowField::zero(b, ha, wa), flip_flags,
                                      ha, wa);
    auto congealed = backward_warp(src_images, rigid_grid);
    if (congealed.size(2) != cfg_.stn.nonrigid_input_size) {
      congealed = F::interpolate(
          congealed, F::InterpolateFuncOptions()
                         .size(std::vector<int64_t>{cfg_.stn.nonrigid_input_size,
                                                    cfg_.stn.nonrigid_input_size})
                         .mode(torch::kBilinear)
                         .align_corners(true));
    }
    flow = nonrigid_->forward(congealed, ha, wa);
  } else {
    flow = FlowField::zero(b, ha, wa);
  }

  auto grid = compose_mapping(p, flow, flip_flags, ha, wa);
  auto warped_keys = backward_warp(src_keys, grid);
  auto warped_sal =
      backward_warp(src_sal.unsqueeze(1), grid).squeeze(1);

  // Orientation choice and atlas gating, from this pass's keys losses.
  auto gate = torch::ones({b}, torch::kBool);
  if (flips) {
    torch::NoGradGuard ng;
    auto pk = keys_loss(warped_keys.detach(), atlas_.keys.detach(),
                        atlas_.saliency().detach(), grid.validity,
                        weights_.lambda_l, weights_.normalizer_valid_only)
                  .values;
    auto orig = pk.narrow(0, 0, n), flipv = pk.narrow(0, n, n);
    auto flip_wins = flipv < orig;  // ties keep the original orientation
    gate = torch::cat({~flip_wins, flip_wins});
    if (atlas_live) {
      flip_info_.losses_original = orig.clone();
      flip_info_.losses_flipped = flipv.clone();
      flip_info_.chosen.assign(n, 0);
      for (int64_t i = 0; i < n; ++i)
        flip_info_.chosen[i] = flip_wins[i].item<bool>() ? 1 : 0;
      orientations_ = flip_info_.chosen;
    }
  } else if (atlas_live) {
    flip_info_.losses_original = torch::Tensor();
    flip_info_.losses_flipped = torch::Tensor();
    flip_info_.chosen.assign(n, 0);
    orientations_.assign(n, 0);
  }

  // Gradual population: inactive images never update the atlas.
  auto active = torch::zeros({n}, torch::kBool);
  for (auto i : atlas_.active_set) active[i] = true;
  gate = gate & (flips ? torch::cat({active, active}) : active);

  ObjectiveInputs in;
  in.warped_keys = warped_keys;
  in.warped_saliency = warped_sal;
  in.coords = grid.coords;
  in.validity = grid.validity;
  in.flow = flow.dense;
  in.scales = p.scale;
  in.atlas_keys = atlas_live ? atlas_.keys : atlas_.keys.detach();
  in.atlas_saliency =
      atlas_live ? atlas_.saliency() : atlas_.saliency().detach();
  in.atlas_grad_mask = gate;
  in.n_images = n;

  auto report = total_objective(in, weights_);

  if (atlas_live) {
    // Chosen-orientation keys losses feed the flip scheme and the gradual
    // schedule.
    auto pk = report.per_image_keys;
    for (int64_t i = 0; i < n; ++i) {
      const int64_t row = (flips && orientations_[i] == 1) ? n + i : i;
      keys_losses_[static_cast<size_t>(i)] = pk[row].item<double>();
    }
  }
  return report;
}

LossReport Trainer::step_epoch() {
  const bool phase1 = epoch_ < cfg_.bootstrap_epochs;
  if (cfg_.gradual_atlas && epoch_ > 0 && epoch_ % 100 == 0)
    grow_active_set(atlas_, keys_losses_);

  LossReport report;
  if (phase1) {
    auto rep = objective_pass(/*composed=*/false, /*atlas_live=*/true);
    stn_opt_->zero_grad(true);
    if (atlas_opt_) atlas_opt_->zero_grad(true);
    rep.total.backward();
    stn_opt_->step();
    if (atlas_opt_) atlas_opt_->step();
    report = std::move(rep);
  } else {
    {
      auto rep_a = objective_pass(/*composed=*/false, /*atlas_live=*/false);
      stn_opt_->zero_grad(true);
      if (atlas_opt_) atlas_opt_->zero_grad(true);
      rep_a.total.backward();
      stn_opt_->step();
    }
    auto rep_b = objective_pass(/*composed=*/true, /*atlas_live=*/true);
    stn_opt_->zero_grad(true);
    if (atlas_opt_) atlas_opt_->zero_grad(true);
    rep_b.total.backward();
    stn_opt_->step();
    if (atlas_opt_) atlas_opt_->step();
    report = std::move(rep_b);
  }

  ++epoch_;
  EpochRecord rec;
  rec.epoch = epoch_;
  rec.total = report.total_value;
  rec.keys = report.keys;
  rec.saliency = report.saliency;
  rec.reg_mapping = report.reg_mapping;
  rec.reg_atlas = report.reg_atlas;
  history_.push_back(rec);
  return report;
}

void Trainer::save(const std::string& path) {
  CheckpointState st;
  st.config = &cfg_;
  st.atlas = &atlas_;
  st.rigid = rigid_;
  st.nonrigid = nonrigid_;
  st.stn_opt = stn_opt_.get();
  st.atlas_opt = atlas_opt_.get();
  st.epoch = &epoch_;
  st.orientations = &orientations_;
  st.keys_losses = &keys_losses_;
  st.image_names = &set_.names;
  save_checkpoint(st, path);
}

void Trainer::resume(const std::string& path) {
  RunConfig loaded = cfg_;
  std::vector<std::string> names = set_.names;
  CheckpointState st;
  st.config = &loaded;
  st.atlas = &atlas_;
  st.rigid = rigid_;
  st.nonrigid = nonrigid_;
  st.stn_opt = stn_opt_.get();
  st.atlas_opt = atlas_opt_.get();
  st.epoch = &epoch_;
  st.orientations = &orientations_;
  st.keys_losses = &keys_losses_;
  st.image_names = &names;
  load_checkpoint(st, path);
  if (names != set_.names)
    throw SchemaError("checkpoint image names do not match the loaded set");
  cfg_ = loaded;
  weights_ = cfg_.extreme_deformation_mode ? apply_extreme_mode(cfg_.loss)
                                           : cfg_.loss;
}

void Trainer::snapshot(const std::string& out_dir) {
  fs::create_directories(out_dir);
  save((fs::path(out_dir) / "checkpoint.ckpt").string());

  torch::NoGradGuard ng;
  const int64_t n = set_.size();
  auto flip_flags = torch::zeros({n}, torch::kBool);
  for (int64_t i = 0; i < n; ++i) flip_flags[i] = orientations_[i] == 1;
  auto net_input = images_.clone();
  for (int64_t i = 0; i < n; ++i)
    if (orientations_[i] == 1) net_input[i] = flipped_[i];

  auto p = rigid_->forward(net_input);
  const int64_t ha = cfg_.atlas_size;
  auto rigid_grid = compose_mapping(p, FlowField::zero(n, ha, ha), flip_flags, ha, ha);
  auto congealed = backward_warp(images_, rigid_grid);
  torch::Tensor cong_in = congealed;
  if (cong_in.size(2) != cfg_.stn.nonrigid_input_size)
    cong_in = F::interpolate(cong_in,
                             F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{cfg_.stn.nonrigid_input_size,
                                                            cfg_.stn.nonrigid_input_size})
                                 .mode(torch::kBilinear)
                                 .align_corners(true));
  const bool bootstrap = epoch_ < cfg_.bootstrap_epochs;
  auto flow = bootstrap ? FlowField::zero(n, ha, ha)
                        : nonrigid_->forward(cong_in, ha, ha);
  auto grid = compose_mapping(p, flow, flip_flags, ha, ha);
  auto warped = backward_warp(images_, grid);

  char tag[32];
  std::snprintf(tag, sizeof(tag), "epoch_%06lld", static_cast<long long>(epoch_));
  auto dir = fs::path(out_dir) / "snapshots";
  write_image((dir / (std::string(tag) + "_average.png")).string(), warped.mean(0));
  write_image((dir / (std::string(tag) + "_saliency.png")).string(),
              atlas_.saliency());
}

TrainResult Trainer::train(const TrainOptions& opts) {
  if (!opts.resume_path.empty()) resume(opts.resume_path);
  std::ofstream log;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    log.open(fs::path(opts.out_dir) / "log.jsonl", std::ios::app);
  }

  while (epoch_ < cfg_.epochs) {
    LossReport rep;
    try {
      rep = step_epoch();
    } catch (const IoError& e) {
      if (!opts.out_dir.empty())
        save((fs::path(opts.out_dir) / "abort.ckpt").string());
      throw IoError(std::string(e.what()) + " at epoch " +
                    std::to_string(epoch_) + "; state checkpointed");
    }
    const bool at_snapshot =
        cfg_.snapshot_every > 0 && epoch_ % cfg_.snapshot_every == 0;
    if (!opts.out_dir.empty() && (at_snapshot || epoch_ == cfg_.epochs)) {
      if (log) log << "{\"epoch\":" << epoch_ << ",\"loss\":" << rep.to_json()
                   << "}\n"
                   << std::flush;
      snapshot(opts.out_dir);
    }
  }

  TrainResult res;
  res.rigid = rigid_;
  res.nonrigid = nonrigid_;
  res.orientations = orientations_;
  res.per_image_keys = keys_losses_;
  res.history = history_;
  return res;
}

int64_t TrainedRun::index_of(const std::string& name) const {
  for (size_t i = 0; i < images.names.size(); ++i)
    if (images.names[i] == name) return static_cast<int64_t>(i);
  throw ConfigError("unknown image name: " + name);
}

void TrainedRun::build_mappings() {
  torch::NoGradGuard ng;
  params.clear();
  flows.clear();
  grids.clear();
  const int64_t ha = config.atlas_size;
  for (int64_t i = 0; i < images.size(); ++i) {
    const bool flip = orientations[static_cast<size_t>(i)] == 1;
    auto img = images.images[i].unsqueeze(0);
    auto input = flip ? torch::flip(img, {3}) : img;
    auto p = rigid->forward(input);
    auto flip_t = torch::tensor({flip}, torch::kBool);
    auto rigid_grid = compose_mapping(p, FlowField::zero(1, ha, ha), flip_t, ha, ha);
    auto congealed = backward_warp(img, rigid_grid);
    if (congealed.size(2) != config.stn.nonrigid_input_size)
      congealed = F::interpolate(
          congealed, F::InterpolateFuncOptions()
                         .size(std::vector<int64_t>{config.stn.nonrigid_input_size,
                                                    config.stn.nonrigid_input_size})
                         .mode(torch::kBilinear)
                         .align_corners(true));
    auto f = nonrigid->forward(congealed, ha, ha);
    auto grid = compose_mapping(p, f, flip_t, ha, ha);
    params.push_back(p);
    flows.push_back(f);
    grids.push_back(grid);
  }
}

TrainedRun TrainedRun::from_trainer(Trainer& trainer) {
  TrainedRun run;
  run.config = trainer.config();
  run.atlas.keys = trainer.atlas().keys;
  run.atlas.saliency_logits = trainer.atlas().saliency_logits;
  run.atlas.active_set = trainer.atlas().active_set;
  run.atlas.fixed = trainer.atlas().fixed;
  run.rigid = trainer.rigid();
  run.nonrigid = trainer.nonrigid();
  run.orientations = trainer.orientations();
  return run;  // caller attaches images and calls build_mappings()
}

TrainedRun TrainedRun::from_checkpoint(const std::string& path, ImageSet images) {
  TrainedRun run;
  run.config = peek_checkpoint_config(path);
  run.images = std::move(images);

  const int64_t res = run.config.atlas_size;
  const int64_t d = run.config.backend.descriptor_dim;
  run.atlas.keys = torch::zeros({d, res, res});
  run.atlas.saliency_logits = torch::zeros({res, res});
  run.rigid = RigidSTN(run.config.image_size, run.config.stn);
  run.nonrigid = NonRigidSTN(run.config.stn.nonrigid_input_size, run.config.stn);

  RunConfig cfg = run.config;
  int64_t epoch = 0;
  std::vector<double> kl;
  std::vector<std::string> names;
  CheckpointState st;
  st.config = &cfg;
  st.atlas = &run.atlas;
  st.rigid = run.rigid;
  st.nonrigid = run.nonrigid;
  st.epoch = &epoch;
  st.orientations = &run.orientations;
  st.keys_losses = &kl;
  st.image_names = &names;
  load_checkpoint(st, path);
  if (!run.images.names.empty() && names != run.images.names)
    throw SchemaError("checkpoint image names do not match the loaded set");
  run.build_mappings();
  return run;
}

}  // namespace congeal
