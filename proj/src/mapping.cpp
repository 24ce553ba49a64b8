#include "congeal/mapping.hpp"

#include <cmath>

#include "congeal/common.hpp"

namespace congeal {

namespace F = torch::nn::functional;

SimilarityParams SimilarityParams::from_logits(const torch::Tensor& logits) {
  check(logits.dim() == 2 && logits.size(1) == 4, "similarity logits must be [B,4]");
  // Saturated activations round to the open-interval endpoints in float32
  // (tanh(100) == 1, exp(-100) == 0); the clamps keep s > 0 and |theta| < pi
  // strict for any logits.
  SimilarityParams p;
  p.theta = M_PI * torch::tanh(logits.select(1, 0)).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
  p.scale = torch::exp(logits.select(1, 1).clamp(-20.0, 20.0));
  p.trans = logits.narrow(1, 2, 2);
  return p;
}

SimilarityParams SimilarityParams::identity(int64_t b, torch::Dtype dtype) {
  auto opts = torch::TensorOptions().dtype(dtype);
  SimilarityParams p;
  p.theta = torch::zeros({b}, opts);
  p.scale = torch::ones({b}, opts);
  p.trans = torch::zeros({b, 2}, opts);
  return p;
}

torch::Tensor SimilarityParams::matrices() const {
  auto c = torch::cos(theta) * scale;
  auto s = torch::sin(theta) * scale;
  auto row0 = torch::stack({c, -s, trans.select(1, 0)}, 1);
  auto row1 = torch::stack({s, c, trans.select(1, 1)}, 1);
  return torch::stack({row0, row1}, 1);  // [B,2,3]
}

torch::Tensor SimilarityParams::inverse_matrices() const {
  auto inv_s = 1.0 / scale;
  auto c = torch::cos(theta) * inv_s;
  auto s = torch::sin(theta) * inv_s;
  // R(-theta)/s = [[c, s], [-s, c]] with c,s already scaled.
  auto tx = trans.select(1, 0), ty = trans.select(1, 1);
  auto itx = -(c * tx + s * ty);
  auto ity = -(-s * tx + c * ty);
  auto row0 = torch::stack({c, s, itx}, 1);
  auto row1 = torch::stack({-s, c, ity}, 1);
  return torch::stack({row0, row1}, 1);
}

FlowField FlowField::zero(int64_t b, int64_t h, int64_t w, torch::Dtype dtype) {
  auto opts = torch::TensorOptions().dtype(dtype);
  FlowField f;
  f.dense = torch::zeros({b, h, w, 2}, opts);
  f.coarse = torch::zeros({b, 2, 16, 16}, opts);
  f.upsample_weights = torch::zeros({b, 9 * 64, 16, 16}, opts);
  return f;
}

torch::Tensor convex_upsample(const torch::Tensor& coarse,
                              const torch::Tensor& weights, int64_t factor) {
  const int64_t b = coarse.size(0), hc = coarse.size(2), wc = coarse.size(3);
  const int64_t f2 = factor * factor;
  check(weights.size(1) == 9 * f2, "upsampling weights must have 9*f*f channels");

  auto padded = F::pad(coarse, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
  auto neigh = F::unfold(padded, F::UnfoldFuncOptions({3, 3}))
                   .view({b, 2, 9, hc, wc});
  auto w = torch::softmax(weights.view({b, 9, f2, hc, wc}), 1);
  auto up = torch::einsum("bksij,bckij->bcsij", {w, neigh});  // [B,2,f2,hc,wc]
  up = up.view({b, 2, factor, factor, hc, wc})
           .permute({0, 1, 4, 2, 5, 3})
           .reshape({b, 2, hc * factor, wc * factor});
  return up;
}

MappingGrid compose_mapping(const SimilarityParams& p, const FlowField& f,
                            const torch::Tensor& flip, int64_t atlas_h,
                            int64_t atlas_w) {
  const int64_t b = p.batch();
  const auto dtype = p.theta.scalar_type();
  auto lattice = coord_lattice(atlas_h, atlas_w, dtype).to(p.theta.device());
  auto base = lattice.unsqueeze(0) + f.dense;  // [B,H,W,2]

  auto c = (torch::cos(p.theta) * p.scale).view({b, 1, 1});
  auto s = (torch::sin(p.theta) * p.scale).view({b, 1, 1});
  auto x = base.select(-1, 0), y = base.select(-1, 1);
  auto xo = c * x - s * y + p.trans.select(1, 0).view({b, 1, 1});
  auto yo = s * x + c * y + p.trans.select(1, 1).view({b, 1, 1});
  if (flip.defined() && flip.numel() > 0) {
    auto sign = torch::where(flip.view({b, 1, 1}),
                             -torch::ones_like(xo), torch::ones_like(xo));
    xo = xo * sign;
  }
  MappingGrid g;
  g.coords = torch::stack({xo, yo}, -1);
  g.validity = g.coords.abs().le(1.0).all(-1);
  return g;
}

torch::Tensor backward_warp(const torch::Tensor& field, const MappingGrid& grid) {
  check(field.size(0) == grid.coords.size(0), "batch mismatch in backward_warp");
  auto warped = F::grid_sample(field, grid.coords,
                               F::GridSampleFuncOptions()
                                   .mode(torch::kBilinear)
                                   .padding_mode(torch::kZeros)
                                   .align_corners(true));
  return warped * grid.validity.unsqueeze(1).to(field.scalar_type());
}

torch::Tensor apply_affine(const torch::Tensor& mats, const torch::Tensor& points) {
  auto lin = torch::einsum("bij,bpj->bpi", {mats.narrow(2, 0, 2), points});
  return lin + mats.narrow(2, 2, 1).transpose(1, 2);
}

torch::Tensor invert_flow_nn(const MappingGrid& grid, const torch::Tensor& queries) {
  check(grid.coords.size(0) == 1, "invert_flow_nn expects a single-image grid");
  const int64_t h = grid.coords.size(1), w = grid.coords.size(2);
  auto coords = grid.coords.reshape({h * w, 2}).to(torch::kFloat64).contiguous();
  auto valid = grid.validity.reshape({h * w}).contiguous();
  if (!valid.any().item<bool>())
    throw IoError("invert_flow_nn: mapping grid has no valid pixel");

  auto q = queries.to(torch::kFloat64).contiguous();
  const int64_t np = q.size(0);
  auto out = torch::empty({np, 2}, torch::kFloat64);
  auto ca = coords.accessor<double, 2>();
  auto va = valid.accessor<bool, 1>();
  auto qa = q.accessor<double, 2>();
  auto oa = out.accessor<double, 2>();
  for (int64_t i = 0; i < np; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int64_t best_idx = -1;
    for (int64_t j = 0; j < h * w; ++j) {
      if (!va[j]) continue;
      const double dx = ca[j][0] - qa[i][0];
      const double dy = ca[j][1] - qa[i][1];
      const double d = dx * dx + dy * dy;
      if (d < best) {
        best = d;
        best_idx = j;
      }
    }
    oa[i][0] = pixel_to_norm(static_cast<double>(best_idx % w), w);
    oa[i][1] = pixel_to_norm(static_cast<double>(best_idx / w), h);
  }
  return out.to(queries.scalar_type());
}

namespace {

// One Gauss-Newton step on g(x) = x + w(x) from the NN seed: solves
// (I + grad w) * delta = q - g(seed) with central flow differences on the
// lattice. The step is capped at 1.5 pixels to stay inside the seed's cell.
torch::Tensor refine_flow_inverse(const torch::Tensor& flow_coords,  // [H,W,2]
                                  const torch::Tensor& flow,         // [H,W,2]
                                  const torch::Tensor& seeds,        // [P,2]
                                  const torch::Tensor& queries) {    // [P,2]
  const int64_t h = flow.size(0), w = flow.size(1);
  const double px = 2.0 / (w - 1), py = 2.0 / (h - 1);
  auto fc = flow_coords.to(torch::kFloat64).contiguous();
  auto fl = flow.to(torch::kFloat64).contiguous();
  auto out = seeds.to(torch::kFloat64).clone();
  auto qa = queries.to(torch::kFloat64).contiguous();
  auto fca = fc.accessor<double, 3>();
  auto fla = fl.accessor<double, 3>();
  auto oa = out.accessor<double, 2>();
  auto qq = qa.accessor<double, 2>();
  for (int64_t p = 0; p < out.size(0); ++p) {
    const int64_t j = std::llround(norm_to_pixel(oa[p][0], w));
    const int64_t i = std::llround(norm_to_pixel(oa[p][1], h));
    const int64_t jl = std::max<int64_t>(0, j - 1), jr = std::min(w - 1, j + 1);
    const int64_t iu = std::max<int64_t>(0, i - 1), id = std::min(h - 1, i + 1);
    const double dxu = (jr - jl) * px, dyu = (id - iu) * py;
    // J = I + dw/dx in normalized units
    const double a = 1.0 + (fla[i][jr][0] - fla[i][jl][0]) / dxu;
    const double c = (fla[i][jr][1] - fla[i][jl][1]) / dxu;
    const double b = (fla[id][j][0] - fla[iu][j][0]) / dyu;
    const double d = 1.0 + (fla[id][j][1] - fla[iu][j][1]) / dyu;
    const double det = a * d - b * c;
    if (std::abs(det) < 1e-8) continue;
    const double rx = qq[p][0] - fca[i][j][0];
    const double ry = qq[p][1] - fca[i][j][1];
    double sx = (d * rx - b * ry) / det;
    double sy = (-c * rx + a * ry) / det;
    const double cap = 1.5 * std::max(px, py);
    sx = std::clamp(sx, -cap, cap);
    sy = std::clamp(sy, -cap, cap);
    oa[p][0] += sx;
    oa[p][1] += sy;
  }
  return out.to(seeds.scalar_type());
}

torch::Tensor sample_coord_field(const torch::Tensor& coords,  // [1,H,W,2]
                                 const torch::Tensor& points)  // [P,2]
{
  auto field = coords.permute({0, 3, 1, 2});  // [1,2,H,W]
  auto grid = points.view({1, 1, -1, 2}).to(field.scalar_type());
  auto sampled = F::grid_sample(field, grid,
                                F::GridSampleFuncOptions()
                                    .mode(torch::kBilinear)
                                    .padding_mode(torch::kBorder)
                                    .align_corners(true));
  return sampled.view({2, -1}).t();  // [P,2]
}

}  // namespace

MappedPoints map_points(const torch::Tensor& points, MapDirection dir,
                        const SimilarityParams& p, const FlowField& f,
                        bool flip, int64_t atlas_h, int64_t atlas_w) {
  check(p.batch() == 1, "map_points expects single-image params");
  MappedPoints out;
  out.out_of_bounds = points.abs().gt(1.0).any(-1);

  auto flip_t = torch::tensor({flip}, torch::kBool);
  if (dir == MapDirection::kAtlasToImage) {
    auto grid = compose_mapping(p, f, flip_t, atlas_h, atlas_w);
    out.points = sample_coord_field(grid.coords, points);
    return out;
  }

  // image -> atlas: undo the mirror, rigid closed form, then NN flow inverse
  // with one local Gauss-Newton correction for sub-pixel accuracy (exact for
  // zero flow).
  auto q = points.clone();
  if (flip) q.select(-1, 0).neg_();
  auto q_f = apply_affine(p.inverse_matrices(), q.unsqueeze(0)).squeeze(0);

  auto lattice = coord_lattice(atlas_h, atlas_w, f.dense.scalar_type());
  MappingGrid flow_grid;
  flow_grid.coords = (lattice.unsqueeze(0) + f.dense);
  flow_grid.validity = compose_mapping(p, f, flip_t, atlas_h, atlas_w).validity;
  auto seeds = invert_flow_nn(flow_grid, q_f);
  out.points = refine_flow_inverse(flow_grid.coords.squeeze(0),
                                   f.dense.squeeze(0), seeds, q_f);
  return out;
}

torch::Tensor forward_splat(const torch::Tensor& rgba, const MappingGrid& grid,
                            int64_t out_h, int64_t out_w) {
  check(grid.coords.size(0) == 1, "forward_splat expects a single-image grid");
  const int64_t c = rgba.size(0);
  const int64_t up = 4;  // supersampling factor against holes
  const int64_t sh = grid.coords.size(1) * up, sw = grid.coords.size(2) * up;

  auto interp = [&](const torch::Tensor& t) {
    return F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{sh, sw})
                                 .mode(torch::kBilinear)
                                 .align_corners(true));
  };
  auto coords_up = interp(grid.coords.permute({0, 3, 1, 2}).to(torch::kFloat32))
                       .squeeze(0);                                   // [2,sh,sw]
  auto layer_up = interp(rgba.unsqueeze(0).to(torch::kFloat32)).squeeze(0);

  auto accum = torch::zeros({c, out_h, out_w}, torch::kFloat32);
  auto wsum = torch::zeros({out_h, out_w}, torch::kFloat32);
  auto coords_c = coords_up.contiguous();
  auto layer_c = layer_up.contiguous();
  auto cu = coords_c.accessor<float, 3>();
  auto lu = layer_c.accessor<float, 3>();
  auto aa = accum.accessor<float, 3>();
  auto wa = wsum.accessor<float, 2>();

  for (int64_t i = 0; i < sh; ++i) {
    for (int64_t j = 0; j < sw; ++j) {
      const double px = norm_to_pixel(cu[0][i][j], out_w);
      const double py = norm_to_pixel(cu[1][i][j], out_h);
      const int64_t x0 = static_cast<int64_t>(std::floor(px));
      const int64_t y0 = static_cast<int64_t>(std::floor(py));
      const double fx = px - x0, fy = py - y0;
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy),
                             (1 - fx) * fy, fx * fy};
      const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int k = 0; k < 4; ++k) {
        if (xs[k] < 0 || xs[k] >= out_w || ys[k] < 0 || ys[k] >= out_h) continue;
        const float wt = static_cast<float>(wts[k]);
        if (wt <= 0.f) continue;
        for (int64_t ch = 0; ch < c; ++ch)
          aa[ch][ys[k]][xs[k]] += wt * lu[ch][i][j];
        wa[ys[k]][xs[k]] += wt;
      }
    }
  }
  auto covered = wsum > 1e-12f;
  auto denom = wsum.clamp_min(1e-12f).unsqueeze(0);
  return torch::where(covered.unsqueeze(0), accum / denom, torch::zeros_like(accum));
}

}  // namespace congeal
