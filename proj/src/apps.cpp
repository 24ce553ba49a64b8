#include "congeal/apps.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "congeal/common.hpp"

namespace congeal {

namespace fs = std::filesystem;

EditLayer load_edit_layer(const std::string& png_path, bool premultiplied) {
  cv::Mat img = cv::imread(png_path, cv::IMREAD_UNCHANGED);
  if (img.empty()) throw IoError("unreadable edit layer: " + png_path);
  if (img.channels() == 3) cv::cvtColor(img, img, cv::COLOR_BGR2BGRA);
  if (img.channels() != 4)
    throw IoError("edit layer must be RGBA: " + png_path);
  cv::Mat rgba;
  cv::cvtColor(img, rgba, cv::COLOR_BGRA2RGBA);
  auto t = torch::from_blob(rgba.data, {rgba.rows, rgba.cols, 4}, torch::kUInt8)
               .clone()
               .permute({2, 0, 1})
               .to(torch::kFloat32) /
           255.0;
  EditLayer layer;
  layer.rgba = t;
  layer.premultiplied = premultiplied;
  return layer;
}

namespace {

torch::Tensor blend(const torch::Tensor& splatted_rgba, const torch::Tensor& image,
                    bool premultiplied) {
  auto rgb = splatted_rgba.narrow(0, 0, 3);
  auto a = splatted_rgba.narrow(0, 3, 1).clamp(0, 1);
  if (premultiplied) return (rgb + (1.0 - a) * image).clamp(0, 1);
  return (a * rgb + (1.0 - a) * image).clamp(0, 1);
}

}  // namespace

std::vector<torch::Tensor> propagate_edit(const TrainedRun& run,
                                          const EditLayer& edit) {
  check(!run.grids.empty(), "run has no trained mappings; train first");
  check(edit.rgba.dim() == 3 && edit.rgba.size(0) == 4, "edit layer must be [4,h,w]");
  const int64_t s = run.images.images.size(2);
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < run.images.size(); ++i) {
    auto splat = forward_splat(edit.rgba, run.grids[static_cast<size_t>(i)], s, s);
    out.push_back(blend(splat, run.images.images[i], edit.premultiplied));
  }
  return out;
}

std::vector<torch::Tensor> edit_via_image(const TrainedRun& run,
                                          int64_t source_index,
                                          const EditLayer& edit_in_source) {
  check(!run.grids.empty(), "run has no trained mappings; train first");
  MappingGrid grid = run.grids[static_cast<size_t>(source_index)];
  // Backward warp pulls the source-frame edit onto the atlas lattice;
  // invalid atlas pixels become fully transparent.
  auto atlas_edit = backward_warp(edit_in_source.rgba.unsqueeze(0), grid).squeeze(0);
  EditLayer lifted;
  lifted.rgba = atlas_edit;
  lifted.premultiplied = edit_in_source.premultiplied;
  return propagate_edit(run, lifted);
}

TransferResult transfer_keypoints(const TrainedRun& run, int64_t src, int64_t tgt,
                                  const torch::Tensor& keypoints_a) {
  check(!run.grids.empty(), "run has no trained mappings; train first");
  const int64_t s = run.images.images.size(2);
  const auto& pad_a = run.images.pad_info[static_cast<size_t>(src)];
  const auto& pad_b = run.images.pad_info[static_cast<size_t>(tgt)];

  auto working = pad_a.to_working(keypoints_a);  // [P,2] px in the 256 frame
  auto norm = working * (2.0 / static_cast<double>(s - 1)) - 1.0;

  auto in_atlas = map_points(norm, MapDirection::kImageToAtlas,
                             run.params[static_cast<size_t>(src)],
                             run.flows[static_cast<size_t>(src)],
                             run.orientations[static_cast<size_t>(src)] == 1,
                             run.config.atlas_size, run.config.atlas_size);

  auto to_b = map_points(in_atlas.points, MapDirection::kAtlasToImage,
                         run.params[static_cast<size_t>(tgt)],
                         run.flows[static_cast<size_t>(tgt)],
                         run.orientations[static_cast<size_t>(tgt)] == 1,
                         run.config.atlas_size, run.config.atlas_size);

  TransferResult res;
  res.out_of_bounds = to_b.points.abs().gt(1.0).any(-1) | in_atlas.out_of_bounds;
  auto px = (to_b.points + 1.0) * 0.5 * static_cast<double>(s - 1);
  res.points = pad_b.to_original(px);
  return res;
}

PckResult evaluate_pck(const TrainedRun& run, const KeypointAnnotations& ann,
                       double alpha, bool macro_average) {
  PckResult result;
  result.alpha = alpha;
  result.mode = ann.threshold_mode;
  result.macro_average = macro_average;

  int64_t correct_all = 0, total_all = 0;
  double macro_sum = 0;
  for (const auto& pair : ann.pairs) {
    const int64_t src = run.index_of(pair.source);
    const int64_t tgt = run.index_of(pair.target);
    const auto& pi = run.images.pad_info[static_cast<size_t>(tgt)];

    double h, w;
    if (ann.threshold_mode == "bbox") {
      w = (*pair.bbox)[2];
      h = (*pair.bbox)[3];
    } else {
      w = static_cast<double>(pi.orig_w);
      h = static_cast<double>(pi.orig_h);
    }
    const double thr = alpha * std::max(h, w);

    auto pred = transfer_keypoints(run, src, tgt, pair.src_points);
    auto dist = (pred.points.to(torch::kFloat64) -
                 pair.tgt_points.to(torch::kFloat64))
                    .pow(2)
                    .sum(-1)
                    .sqrt();
    auto ok = dist.le(thr) & ~pred.out_of_bounds;

    PckResult::Pair p;
    p.source = pair.source;
    p.target = pair.target;
    p.correct = ok.sum().item<int64_t>();
    p.total = ok.numel();
    result.pairs.push_back(p);
    correct_all += p.correct;
    total_all += p.total;
    if (p.total > 0) macro_sum += 100.0 * p.correct / p.total;
  }
  if (macro_average)
    result.pck = result.pairs.empty() ? 0.0 : macro_sum / result.pairs.size();
  else
    result.pck = total_all == 0 ? 0.0 : 100.0 * correct_all / total_all;
  return result;
}

std::string PckResult::to_json() const {
  std::ostringstream os;
  os.precision(10);
  os << "{\"alpha\":" << alpha << ",\"mode\":\"" << mode << "\""
     << ",\"macro_average\":" << (macro_average ? "true" : "false")
     << ",\"pck\":" << pck << ",\"pairs\":[";
  for (size_t i = 0; i < pairs.size(); ++i) {
    if (i) os << ",";
    os << "{\"source\":\"" << pairs[i].source << "\",\"target\":\""
       << pairs[i].target << "\",\"correct\":" << pairs[i].correct
       << ",\"total\":" << pairs[i].total << "}";
  }
  os << "]}";
  return os.str();
}

namespace {

void write_f32_raw(const std::string& path, const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(c.data_ptr<float>()),
            sizeof(float) * c.numel());
}

}  // namespace

void export_visuals(const TrainedRun& run, const std::string& out_dir) {
  check(!run.grids.empty(), "run has no trained mappings; train first");
  torch::NoGradGuard ng;
  const int64_t s = run.images.images.size(2);

  std::vector<torch::Tensor> congealed;
  for (int64_t i = 0; i < run.images.size(); ++i) {
    auto warped = backward_warp(run.images.images[i].unsqueeze(0),
                                run.grids[static_cast<size_t>(i)])
                      .squeeze(0);
    congealed.push_back(warped);
    write_image((fs::path(out_dir) / "congealed" /
                 (run.images.names[static_cast<size_t>(i)] + ".png"))
                    .string(),
                warped);
  }
  write_image((fs::path(out_dir) / "congealed" / "average.png").string(),
              torch::stack(congealed).mean(0));

  auto sal = run.atlas.saliency();
  write_image((fs::path(out_dir) / "atlas" / "saliency.png").string(), sal);
  fs::create_directories(fs::path(out_dir) / "atlas");
  write_f32_raw((fs::path(out_dir) / "atlas" / "keys.f32").string(),
                run.atlas.keys.permute({1, 2, 0}));
  write_f32_raw((fs::path(out_dir) / "atlas" / "saliency.f32").string(), sal);

  // Refined per-image masks: S_A transported to image space.
  for (int64_t i = 0; i < run.images.size(); ++i) {
    auto layer = torch::cat({sal.unsqueeze(0), torch::ones_like(sal).unsqueeze(0)});
    auto splat = forward_splat(layer, run.grids[static_cast<size_t>(i)], s, s);
    auto soft = splat[0].clamp(0, 1);
    const auto& name = run.images.names[static_cast<size_t>(i)];
    write_image((fs::path(out_dir) / "masks" / (name + "_soft.png")).string(), soft);
    write_image((fs::path(out_dir) / "masks" / (name + "_mask.png")).string(),
                (soft >= 0.5).to(torch::kFloat32));
  }
}

}  // namespace congeal
