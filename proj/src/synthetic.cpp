#include "congeal/synthetic.hpp"

#include <cmath>

#include "congeal/common.hpp"

namespace congeal {

namespace F = torch::nn::functional;

namespace {

constexpr double kDiskRadius = 0.62;

// Injective color map inside the foreground disk; dim background outside.
// The off-center highlight breaks mirror symmetry.
torch::Tensor render_template(int64_t s) {
  auto xy = coord_lattice(s, s);  // [S,S,2]
  auto x = xy.select(-1, 0), y = xy.select(-1, 1);
  auto r = (x * x + y * y).sqrt();

  auto fg = r <= kDiskRadius;
  auto red = 0.5 + 0.45 * x / kDiskRadius;
  auto green = 0.5 + 0.45 * y / kDiskRadius;
  auto blue = 0.9 - 0.55 * (r / kDiskRadius);

  auto bg_r = 0.10 + 0.04 * torch::sin(3.0 * x);
  auto bg_g = torch::full_like(x, 0.12);
  auto bg_b = 0.14 + 0.04 * y;

  auto img = torch::stack({torch::where(fg, red, bg_r),
                           torch::where(fg, green, bg_g),
                           torch::where(fg, blue, bg_b)});
  auto spot = torch::exp(-((x - 0.25).pow(2) + (y + 0.20).pow(2)) / (2 * 0.004));
  img = img + 0.35 * (spot * fg.to(torch::kFloat32)).unsqueeze(0);
  return img.clamp(0, 1);
}

torch::Tensor bilinear_flow_at(const torch::Tensor& flow,  // [S,S,2]
                               const torch::Tensor& pts) { // [P,2]
  auto field = flow.permute({2, 0, 1}).unsqueeze(0);
  auto grid = pts.view({1, 1, -1, 2}).to(field.scalar_type());
  auto s = F::grid_sample(field, grid,
                          F::GridSampleFuncOptions()
                              .mode(torch::kBilinear)
                              .padding_mode(torch::kBorder)
                              .align_corners(true));
  return s.view({2, -1}).t();
}

torch::Tensor sim_apply(const SimilarityParams& p, const torch::Tensor& pts) {
  return apply_affine(p.matrices(), pts.unsqueeze(0)).squeeze(0);
}

torch::Tensor sim_apply_inverse(const SimilarityParams& p, const torch::Tensor& pts) {
  return apply_affine(p.inverse_matrices(), pts.unsqueeze(0)).squeeze(0);
}

}  // namespace

ImageSet SyntheticSet::to_image_set() const {
  ImageSet set;
  std::vector<torch::Tensor> imgs;
  const int64_t s = template_rgb.size(1);
  for (size_t i = 0; i < images.size(); ++i) {
    imgs.push_back(images[i].image);
    char name[16];
    std::snprintf(name, sizeof(name), "img_%02zu", i);
    set.names.push_back(name);
    PadInfo pi;
    pi.orig_w = pi.orig_h = pi.padded = pi.target = s;
    set.pad_info.push_back(pi);
  }
  set.images = torch::stack(imgs);
  return set;
}

torch::Tensor SyntheticSet::image_to_template(int64_t i,
                                              const torch::Tensor& pts) const {
  const auto& im = images[static_cast<size_t>(i)];
  auto q = pts.clone();
  if (im.mirrored) q.select(-1, 0) = -q.select(-1, 0);
  auto w = bilinear_flow_at(im.gt_flow, q);
  return sim_apply(im.gt_sim, q + w);
}

torch::Tensor SyntheticSet::template_to_image(int64_t i,
                                              const torch::Tensor& pts) const {
  const auto& im = images[static_cast<size_t>(i)];
  // Gauss-Newton on A(x + w(x)) = c with numeric flow Jacobian.
  auto x = sim_apply_inverse(im.gt_sim, pts);
  const double h = 1e-3;
  for (int iter = 0; iter < 12; ++iter) {
    auto res = sim_apply(im.gt_sim, x + bilinear_flow_at(im.gt_flow, x)) - pts;
    if (res.abs().max().item<double>() < 1e-9) break;
    auto ex = torch::tensor({{h, 0.0}}, x.options());
    auto ey = torch::tensor({{0.0, h}}, x.options());
    auto gx = (sim_apply(im.gt_sim, x + ex + bilinear_flow_at(im.gt_flow, x + ex)) -
               sim_apply(im.gt_sim, x - ex + bilinear_flow_at(im.gt_flow, x - ex))) /
              (2 * h);
    auto gy = (sim_apply(im.gt_sim, x + ey + bilinear_flow_at(im.gt_flow, x + ey)) -
               sim_apply(im.gt_sim, x - ey + bilinear_flow_at(im.gt_flow, x - ey))) /
              (2 * h);
    // Solve 2x2 J * dx = res per point.
    auto a = gx.select(-1, 0), c2 = gx.select(-1, 1);
    auto b = gy.select(-1, 0), d = gy.select(-1, 1);
    auto det = (a * d - b * c2).clamp_min(1e-12);
    auto rx = res.select(-1, 0), ry = res.select(-1, 1);
    auto dx = (d * rx - b * ry) / det;
    auto dy = (-c2 * rx + a * ry) / det;
    x = x - torch::stack({dx, dy}, -1);
  }
  if (im.mirrored) x.select(-1, 0) = -x.select(-1, 0);
  return x;
}

torch::Tensor SyntheticSet::correspond(int64_t src, int64_t dst,
                                       const torch::Tensor& pts) const {
  return template_to_image(dst, image_to_template(src, pts));
}

torch::Tensor SyntheticSet::foreground(int64_t i) const {
  const int64_t s = template_rgb.size(1);
  auto lattice = coord_lattice(s, s).view({-1, 2});
  auto c = image_to_template(i, lattice);
  auto r = c.pow(2).sum(-1).sqrt();
  return (r <= kDiskRadius).view({s, s});
}

torch::Tensor SyntheticSet::template_keypoints(int64_t count) const {
  auto out = torch::empty({count, 2}, torch::kFloat32);
  auto a = out.accessor<float, 2>();
  for (int64_t j = 0; j < count; ++j) {
    const double r = 0.85 * kDiskRadius * std::sqrt((j + 0.5) / count);
    const double phi = 2.39996322972865 * j;
    a[j][0] = static_cast<float>(r * std::cos(phi));
    a[j][1] = static_cast<float>(r * std::sin(phi));
  }
  return out;
}

SyntheticSet make_synthetic_set(const SyntheticSpec& spec) {
  auto gen = at::detail::createCPUGenerator(static_cast<uint64_t>(spec.seed));
  auto uniform = [&](double lo, double hi, std::vector<int64_t> shape) {
    auto u = torch::rand(shape, gen, torch::TensorOptions().dtype(torch::kFloat32));
    return u * (hi - lo) + lo;
  };

  SyntheticSet set;
  const int64_t s = spec.image_size;
  set.template_rgb = render_template(s);
  {
    auto xy = coord_lattice(s, s);
    set.template_mask =
        xy.pow(2).sum(-1).sqrt() <= kDiskRadius;
  }

  for (int64_t i = 0; i < spec.n_images; ++i) {
    const bool mirrored = spec.first_mirrored >= 0 && i >= spec.first_mirrored;
    double amp = i == 0 ? 0.0 : 1.0;
    if (mirrored) amp *= spec.mirrored_amplitude_boost;

    SyntheticImage img;
    img.mirrored = mirrored;
    auto theta = uniform(-spec.max_rotation, spec.max_rotation, {1}) * amp;
    auto logs = uniform(-spec.max_log_scale, spec.max_log_scale, {1}) * amp;
    auto trans = uniform(-spec.max_translation, spec.max_translation, {1, 2}) * amp;
    img.gt_sim.theta = theta;
    img.gt_sim.scale = torch::exp(logs);
    img.gt_sim.trans = trans;

    auto coarse = uniform(-spec.flow_amplitude, spec.flow_amplitude, {1, 2, 6, 6}) * amp;
    img.gt_flow = F::interpolate(coarse, F::InterpolateFuncOptions()
                                             .size(std::vector<int64_t>{s, s})
                                             .mode(torch::kBilinear)
                                             .align_corners(true))
                      .squeeze(0)
                      .permute({1, 2, 0});

    // Render I(x) = T(A(x + w(x))) by backward sampling the template.
    auto lattice = coord_lattice(s, s);
    auto warped_pts = sim_apply(img.gt_sim,
                                (lattice + img.gt_flow).view({-1, 2}))
                          .view({1, s, s, 2});
    auto rendered = F::grid_sample(set.template_rgb.unsqueeze(0), warped_pts,
                                   F::GridSampleFuncOptions()
                                       .mode(torch::kBilinear)
                                       .padding_mode(torch::kBorder)
                                       .align_corners(true))
                        .squeeze(0);

    // Distractor blobs in image space, outside the true foreground.
    auto fg_pts = sim_apply(img.gt_sim, (lattice + img.gt_flow).view({-1, 2}));
    auto fg_mask = (fg_pts.pow(2).sum(-1).sqrt() <= kDiskRadius).view({s, s});
    auto x = lattice.select(-1, 0), y = lattice.select(-1, 1);
    for (int64_t k = 0; k < spec.distractors; ++k) {
      for (int attempt = 0; attempt < 32; ++attempt) {
        auto c = uniform(-0.85, 0.85, {2});
        const double cx = c[0].item<double>(), cy = c[1].item<double>();
        const double rad = uniform(0.07, 0.13, {1}).item<double>();
        // Accept only blobs clear of the object.
        auto px = norm_to_pixel(cx, s), py = norm_to_pixel(cy, s);
        const int64_t ix = std::llround(std::clamp(px, 0.0, double(s - 1)));
        const int64_t iy = std::llround(std::clamp(py, 0.0, double(s - 1)));
        auto d_center = std::sqrt(cx * cx + cy * cy);
        if (fg_mask[iy][ix].item<bool>() || d_center < kDiskRadius + rad + 0.1)
          continue;
        auto blob = ((x - cx).pow(2) + (y - cy).pow(2)).sqrt() <= rad;
        auto tint = uniform(-0.05, 0.05, {3});
        auto color = torch::tensor({0.85f, 0.15f, 0.8f}) + tint;
        rendered = torch::where(blob.unsqueeze(0),
                                color.view({3, 1, 1}).expand_as(rendered),
                                rendered);
        break;
      }
    }

    if (spec.noise > 0) {
      auto noise = uniform(-spec.noise, spec.noise, {3, s, s});
      rendered = (rendered + noise).clamp(0, 1);
    }
    if (mirrored) rendered = torch::flip(rendered, {2});
    img.image = rendered.contiguous();
    set.images.push_back(std::move(img));
  }
  return set;
}

}  // namespace congeal
