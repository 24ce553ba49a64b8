#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN

#include <cmath>

#include <torch/torch.h>

#include "congeal/common.hpp"
#include "congeal/losses.hpp"
#include "test_util.hpp"
#include "congeal_doctest.hpp"

using namespace congeal;
using congeal::testing::grad_direction_error;

namespace {

// Random, well-conditioned small instance on an 8x8 atlas with D=4, double
// precision, away from the non-smooth points of huber/abs/min branches.
struct SmallInstance {
  torch::Tensor warped_keys, warped_sal, coords, flow, scales, ka, sa;
  torch::Tensor validity;
};

SmallInstance random_instance(bool with_invalid = true) {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  SmallInstance s;
  s.warped_keys = torch::randn({2, 4, 8, 8}, opts).set_requires_grad(true);
  s.warped_sal = (torch::rand({2, 8, 8}, opts) * 0.8 + 0.1).set_requires_grad(true);
  auto jitter = torch::randn({2, 8, 8, 2}, opts) * 0.05;
  s.coords = (coord_lattice(8, 8, torch::kFloat64).unsqueeze(0) * 0.8 + jitter)
                 .detach()
                 .set_requires_grad(true);
  s.flow = (torch::randn({2, 8, 8, 2}, opts) * 0.1).set_requires_grad(true);
  s.scales = (torch::rand({2}, opts) * 0.6 + 0.7).set_requires_grad(true);
  s.ka = torch::randn({4, 8, 8}, opts).set_requires_grad(true);
  s.sa = (torch::rand({8, 8}, opts) * 0.8 + 0.1).set_requires_grad(true);
  if (with_invalid) {
    auto v = torch::rand({2, 8, 8}) > 0.2;
    v.index_put_({0, 0, 0}, true);  // keep the region non-empty
    s.validity = v;
  } else {
    s.validity = torch::ones({2, 8, 8}, torch::kBool);
  }
  return s;
}

}  // namespace

TEST_CASE("huber closed-form values") {
  auto a1 = torch::tensor({1.0}, torch::kFloat64);
  auto b1 = torch::tensor({0.0}, torch::kFloat64);
  CHECK(huber(a1, b1, 0.7).item<double>() == doctest::Approx(0.455).epsilon(1e-9));

  auto a2 = torch::tensor({0.5}, torch::kFloat64);
  auto b2 = torch::tensor({0.2}, torch::kFloat64);
  CHECK(huber(a2, b2, 0.7).item<double>() == doctest::Approx(0.045).epsilon(1e-9));

  // symmetry
  torch::manual_seed(2);
  auto x = torch::randn({100}, torch::kFloat64);
  auto y = torch::randn({100}, torch::kFloat64);
  CHECK((huber(x, y, 0.7) - huber(y, x, 0.7)).abs().max().item<double>() == 0.0);
}

TEST_CASE("saliency_loss single-pixel examples") {
  auto v = torch::ones({1, 1, 1}, torch::kBool);
  auto sa = torch::tensor({{0.0}}, torch::kFloat64);
  auto w = torch::tensor({{{1.0}}}, torch::kFloat64);
  CHECK(saliency_loss(w, sa, v, 0.7).values.item<double>() ==
        doctest::Approx(0.455).epsilon(1e-9));

  auto sa2 = torch::tensor({{0.2}}, torch::kFloat64);
  auto w2 = torch::tensor({{{0.5}}}, torch::kFloat64);
  CHECK(saliency_loss(w2, sa2, v, 0.7).values.item<double>() ==
        doctest::Approx(0.045).epsilon(1e-9));

  // identical inputs -> 0
  auto sa3 = torch::rand({5, 5}, torch::kFloat64);
  auto warped3 = sa3.unsqueeze(0).expand({3, 5, 5});
  auto eq = saliency_loss(warped3, sa3, torch::ones({3, 5, 5}, torch::kBool), 0.7);
  CHECK(eq.values.abs().max().item<double>() == 0.0);
}

TEST_CASE("keys_loss worked examples") {
  auto v = torch::ones({1, 1, 1}, torch::kBool);
  auto sa = torch::ones({1, 1}, torch::kFloat64);

  // warped == atlas -> 0
  auto k = torch::randn({1, 4, 1, 1}, torch::kFloat64);
  CHECK(keys_loss(k, k.squeeze(0), sa, v, 0.875, true).values.item<double>() ==
        doctest::Approx(0.0).epsilon(1e-12));

  // orthogonal unit vectors, lambda_l = 0 -> cosine distance 1
  auto ki = torch::zeros({1, 2, 1, 1}, torch::kFloat64);
  ki[0][0][0][0] = 1.0;
  auto ka = torch::zeros({2, 1, 1}, torch::kFloat64);
  ka[1][0][0] = 1.0;
  CHECK(keys_loss(ki, ka, sa, v, 0.0, true).values.item<double>() ==
        doctest::Approx(1.0).epsilon(1e-9));

  // K_i=(2,0), K_A=(1,0), lambda_l=0.875 -> 0.875
  auto ki2 = torch::zeros({1, 2, 1, 1}, torch::kFloat64);
  ki2[0][0][0][0] = 2.0;
  auto ka2 = torch::zeros({2, 1, 1}, torch::kFloat64);
  ka2[0][0][0] = 1.0;
  CHECK(keys_loss(ki2, ka2, sa, v, 0.875, true).values.item<double>() ==
        doctest::Approx(0.875).epsilon(1e-9));

  // empty saliency -> 0 with degenerate flag
  auto sa0 = torch::zeros({1, 1}, torch::kFloat64);
  auto deg = keys_loss(ki2, ka2, sa0, v, 0.875, true);
  CHECK(deg.values.item<double>() == 0.0);
  CHECK(deg.degenerate);
}

TEST_CASE("scale and mag losses") {
  CHECK(scale_loss(torch::tensor({1.0}, torch::kFloat64)).item<double>() == 0.0);
  CHECK(scale_loss(torch::tensor({1.2}, torch::kFloat64)).item<double>() ==
        doctest::Approx(0.04).epsilon(1e-12));
  auto two = scale_loss(torch::tensor({0.5, 1.5}, torch::kFloat64));
  CHECK(two.mean().item<double>() == doctest::Approx(0.25).epsilon(1e-12));

  auto v = torch::ones({1, 4, 4}, torch::kBool);
  auto zero = torch::zeros({1, 4, 4, 2}, torch::kFloat64);
  CHECK(mag_loss(zero, v).values.item<double>() == 0.0);

  auto c = torch::zeros({1, 4, 4, 2}, torch::kFloat64);
  c.select(-1, 0) = 0.1;
  CHECK(mag_loss(c, v).values.item<double>() == doctest::Approx(0.01).epsilon(1e-12));

  // masking contract: flow on invalid pixels does not count
  auto half = torch::ones({1, 4, 4}, torch::kBool);
  half.index_put_({0, torch::indexing::Slice(0, 2)}, false);
  auto w = torch::zeros({1, 4, 4, 2}, torch::kFloat64);
  w.index_put_({0, torch::indexing::Slice(0, 2)}, 1.0);
  CHECK(mag_loss(w, half).values.item<double>() == 0.0);
}

TEST_CASE("smooth_loss identity, rotation invariance, scale 2") {
  const double two_sqrt2 = 2.0 * std::sqrt(2.0);
  auto id = coord_lattice(16, 16, torch::kFloat64).unsqueeze(0);
  auto v = torch::ones({1, 16, 16}, torch::kBool);

  auto r = smooth_loss(id, v, 1, std::nullopt);
  CHECK(r.values.item<double>() == doctest::Approx(two_sqrt2).epsilon(1e-6));

  // global rotation leaves J^T J unchanged
  const double th = 0.7;
  auto x = id.select(-1, 0), y = id.select(-1, 1);
  auto rot = torch::stack({std::cos(th) * x - std::sin(th) * y,
                           std::sin(th) * x + std::cos(th) * y},
                          -1);
  auto rr = smooth_loss(rot, v, 1, std::nullopt);
  CHECK(rr.values.item<double>() == doctest::Approx(two_sqrt2).epsilon(1e-6));

  // uniform scale 2: ||4I||_F + ||I/4||_F = 4*sqrt(2) + sqrt(2)/4
  auto s2 = smooth_loss(2.0 * id, v, 1, std::nullopt);
  const double expect = 4.0 * std::sqrt(2.0) + std::sqrt(2.0) / 4.0;
  CHECK(s2.values.item<double>() == doctest::Approx(expect).epsilon(1e-9));

  // larger offset agrees on affine maps
  auto s2d = smooth_loss(2.0 * id, v, 5, std::nullopt);
  CHECK(s2d.values.item<double>() == doctest::Approx(expect).epsilon(1e-9));

  // near-singular Jacobian is clamped, loss stays finite
  auto collapsed = torch::zeros_like(id);
  auto c = smooth_loss(collapsed, v, 1, std::nullopt);
  CHECK(std::isfinite(c.values.item<double>()));
  CHECK(c.clamped_pixels > 0);
}

TEST_CASE("center_loss symmetry and corner mass") {
  auto v = torch::ones({5, 5}, torch::kBool);
  auto sym = torch::ones({5, 5}, torch::kFloat64);
  CHECK(center_loss(sym, v).values.item<double>() ==
        doctest::Approx(0.0).epsilon(1e-12));

  auto corner = torch::zeros({5, 5}, torch::kFloat64);
  corner[4][4] = 1.0;  // pixel (4,4) sits at exactly (1,1)
  CHECK(center_loss(corner, v).values.item<double>() ==
        doctest::Approx(2.0).epsilon(1e-9));

  auto two = torch::zeros({5, 5}, torch::kFloat64);
  two[2][1] = 1.0;  // (-0.5, 0)
  two[2][3] = 1.0;  // (+0.5, 0)
  CHECK(center_loss(two, v).values.item<double>() ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("sparsity closed forms") {
  auto ones = torch::ones({8, 8}, torch::kFloat64);
  CHECK(sparsity_saliency(ones, 2.0).item<double>() ==
        doctest::Approx(2.0 + std::tanh(2.5)).epsilon(1e-9));

  auto half = torch::full({8, 8}, 0.5, torch::kFloat64);
  CHECK(sparsity_saliency(half, 2.0).item<double>() ==
        doctest::Approx(1.0 + std::tanh(1.25)).epsilon(1e-9));

  auto zeros = torch::zeros({8, 8}, torch::kFloat64);
  CHECK(sparsity_saliency(zeros, 2.0).item<double>() ==
        doctest::Approx(0.0).epsilon(1e-12));

  auto ka = torch::ones({4, 8, 8}, torch::kFloat64);
  CHECK(sparsity_keys(ka, ones).item<double>() == doctest::Approx(0.0));
  CHECK(sparsity_keys(ka, zeros).item<double>() == doctest::Approx(1.0));
  CHECK(sparsity_keys(2.0 * ka, half).item<double>() == doctest::Approx(1.0));
}

TEST_CASE("total objective: weighting chain and report consistency") {
  torch::manual_seed(4);
  auto s = random_instance(false);
  LossWeights w;
  w.delta_global = 2;  // 8x8 instances cannot host the 20 px offset

  ObjectiveInputs in;
  in.warped_keys = s.warped_keys;
  in.warped_saliency = s.warped_sal;
  in.coords = s.coords;
  in.validity = s.validity;
  in.flow = s.flow;
  in.scales = s.scales;
  in.atlas_keys = s.ka;
  in.atlas_saliency = s.sa;
  in.n_images = 2;

  auto rep = total_objective(in, w);
  const double recomputed =
      w.c * (rep.keys + w.lambda_s * rep.saliency + w.lambda_r * rep.reg_mapping +
             w.lambda_a * rep.reg_atlas);
  CHECK(rep.total_value == doctest::Approx(recomputed).epsilon(1e-9));
  const double reg_m = w.lambda_s1 * rep.scale + w.lambda_s2 * rep.mag +
                       w.rigidity_multiplier *
                           (rep.smooth_local + w.lambda_s3 * rep.smooth_global);
  CHECK(rep.reg_mapping == doctest::Approx(reg_m).epsilon(1e-9));
  const double reg_a =
      rep.center + w.lambda_p * (rep.sparsity_s + w.lambda_k * rep.sparsity_k);
  CHECK(rep.reg_atlas == doctest::Approx(reg_a).epsilon(1e-9));

  // only keys nonzero -> total = c * keys
  LossWeights only_keys;
  only_keys.delta_global = 2;
  only_keys.lambda_s = only_keys.lambda_r = only_keys.lambda_a = 0.0;
  auto rep2 = total_objective(in, only_keys);
  CHECK(rep2.total_value == doctest::Approx(4000.0 * rep2.keys).epsilon(1e-9));

  // identity mapping: reg_M contributes lambda_r * 2sqrt(2) * c
  ObjectiveInputs idin = in;
  idin.coords = coord_lattice(8, 8, torch::kFloat64).unsqueeze(0).expand({2, 8, 8, 2});
  idin.flow = torch::zeros({2, 8, 8, 2}, torch::kFloat64);
  idin.scales = torch::ones({2}, torch::kFloat64);
  idin.warped_keys = s.ka.unsqueeze(0).expand({2, 4, 8, 8});
  idin.warped_saliency = s.sa.unsqueeze(0).expand({2, 8, 8});
  LossWeights chain;
  chain.delta_global = 2;
  chain.lambda_s3 = 0.0;   // isolate the local term
  chain.lambda_a = 0.0;
  auto rep3 = total_objective(idin, chain);
  CHECK(rep3.total_value ==
        doctest::Approx(chain.c * chain.lambda_r * 2.0 * std::sqrt(2.0))
            .epsilon(1e-6));

  // all components zero
  ObjectiveInputs z = idin;
  LossWeights zw;
  zw.delta_global = 2;
  zw.lambda_r = 0.0;
  zw.lambda_a = 0.0;
  auto rep4 = total_objective(z, zw);
  CHECK(rep4.total_value == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("gradients match finite differences at 100 random instances") {
  torch::manual_seed(77);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto s = random_instance();
    LossWeights w;
    w.delta_global = 2;

    auto check_fn = [&](const char* name,
                        const std::function<torch::Tensor()>& f,
                        const std::vector<torch::Tensor>& leaves) {
      const double err = grad_direction_error(f, leaves);
      worst = std::max(worst, err);
      INFO(name << " trial " << trial << " err " << err);
      CHECK(err <= 1e-4);
    };

    check_fn("keys", [&] {
      return keys_loss(s.warped_keys, s.ka, s.sa, s.validity, w.lambda_l, true)
          .values.sum();
    }, {s.warped_keys, s.ka});

    check_fn("saliency", [&] {
      return saliency_loss(s.warped_sal, s.sa, s.validity, w.delta_huber)
          .values.sum();
    }, {s.warped_sal, s.sa});

    check_fn("scale", [&] { return scale_loss(s.scales).sum(); }, {s.scales});

    check_fn("mag", [&] { return mag_loss(s.flow, s.validity).values.sum(); },
             {s.flow});

    check_fn("smooth_local", [&] {
      return smooth_loss(s.coords, s.validity, 1, s.sa).values.sum();
    }, {s.coords});

    check_fn("smooth_global", [&] {
      return smooth_loss(s.coords, s.validity, 2, std::nullopt).values.sum();
    }, {s.coords});

    check_fn("center", [&] { return center_loss(s.sa, s.validity).values.sum(); },
             {s.sa});

    check_fn("sparsity_saliency",
             [&] { return sparsity_saliency(s.sa, w.gamma); }, {s.sa});

    check_fn("sparsity_keys", [&] { return sparsity_keys(s.ka, s.sa); },
             {s.ka, s.sa});

    // S_A is excluded: the keys and local-rigidity paths detach it by
    // contract, so the objective's value moves with S_A where its gradient
    // intentionally does not (covered by the detachment test).
    check_fn("total", [&] {
      ObjectiveInputs in;
      in.warped_keys = s.warped_keys;
      in.warped_saliency = s.warped_sal;
      in.coords = s.coords;
      in.validity = s.validity;
      in.flow = s.flow;
      in.scales = s.scales;
      in.atlas_keys = s.ka;
      in.atlas_saliency = s.sa;
      in.n_images = 2;
      return total_objective(in, w).total;
    }, {s.warped_keys, s.warped_sal, s.coords, s.flow, s.scales, s.ka});
  }
  MESSAGE("worst relative gradient error: " << worst);
}

TEST_CASE("detachment: keys and local smooth never reach S_A") {
  torch::manual_seed(13);
  auto s = random_instance();

  auto keys = keys_loss(s.warped_keys, s.ka, s.sa, s.validity, 0.875, true)
                  .values.sum();
  keys.backward();
  if (s.sa.grad().defined())
    CHECK(s.sa.grad().abs().max().item<double>() == 0.0);

  s.sa.mutable_grad().reset();
  auto sm = smooth_loss(s.coords, s.validity, 1, s.sa).values.sum();
  sm.backward();
  if (s.sa.grad().defined())
    CHECK(s.sa.grad().abs().max().item<double>() == 0.0);
}

TEST_CASE("masking: invalid-pixel perturbations change nothing") {
  torch::manual_seed(19);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_instance();
    auto invalid = ~s.validity;
    if (!invalid.any().item<bool>()) continue;
    LossWeights w;

    auto eval_all = [&](const SmallInstance& inst) {
      std::vector<double> vals;
      vals.push_back(keys_loss(inst.warped_keys, inst.ka, inst.sa, inst.validity,
                               w.lambda_l, true)
                         .values.sum()
                         .item<double>());
      vals.push_back(saliency_loss(inst.warped_sal, inst.sa, inst.validity,
                                   w.delta_huber)
                         .values.sum()
                         .item<double>());
      vals.push_back(mag_loss(inst.flow, inst.validity).values.sum().item<double>());
      vals.push_back(smooth_loss(inst.coords, inst.validity, 1, inst.sa)
                         .values.sum()
                         .item<double>());
      vals.push_back(smooth_loss(inst.coords, inst.validity, 2, std::nullopt)
                         .values.sum()
                         .item<double>());
      vals.push_back(center_loss(inst.sa, inst.validity).values.sum().item<double>());
      return vals;
    };

    auto before = eval_all(s);
    {
      torch::NoGradGuard ng;
      auto m3 = invalid.unsqueeze(1).to(torch::kFloat64);
      s.warped_keys += 3.7 * m3;
      s.warped_sal += 0.13 * invalid.to(torch::kFloat64);
      s.flow += 2.1 * invalid.unsqueeze(-1).to(torch::kFloat64);
      s.coords += 0.9 * invalid.unsqueeze(-1).to(torch::kFloat64);
    }
    auto after = eval_all(s);
    for (size_t i = 0; i < before.size(); ++i) {
      INFO("term " << i);
      CHECK(before[i] == after[i]);
    }
  }
}

TEST_CASE("atlas gating blocks gradients per batch row") {
  torch::manual_seed(23);
  auto s = random_instance(false);
  LossWeights w;
  w.delta_global = 2;
  w.lambda_r = 0.0;
  w.lambda_a = 0.0;  // keys+saliency only; they carry all atlas gradients

  ObjectiveInputs in;
  in.warped_keys = s.warped_keys;
  in.warped_saliency = s.warped_sal;
  in.coords = s.coords;
  in.validity = s.validity;
  in.flow = s.flow;
  in.scales = s.scales;
  in.atlas_keys = s.ka;
  in.atlas_saliency = s.sa;
  in.n_images = 2;
  in.atlas_grad_mask = torch::tensor({false, false});

  auto rep = total_objective(in, w);
  rep.total.backward();
  if (s.ka.grad().defined())
    CHECK(s.ka.grad().abs().max().item<double>() == 0.0);

  // warped keys (the STN path) still get gradients from gated rows
  CHECK(s.warped_keys.grad().defined());
  CHECK(s.warped_keys.grad().abs().max().item<double>() > 0.0);

  // gated and ungated rows have identical values
  s.ka.mutable_grad().reset();
  in.atlas_grad_mask = torch::tensor({true, true});
  auto rep2 = total_objective(in, w);
  CHECK(rep2.total_value == doctest::Approx(rep.total_value).epsilon(1e-12));
  rep2.total.backward();
  CHECK(s.ka.grad().abs().max().item<double>() > 0.0);
}

TEST_CASE("every term is non-negative") {
  torch::manual_seed(29);
  for (int trial = 0; trial < 30; ++trial) {
    auto s = random_instance();
    CHECK(keys_loss(s.warped_keys, s.ka, s.sa, s.validity, 0.875, true)
              .values.min()
              .item<double>() >= -1e-12);
    CHECK(saliency_loss(s.warped_sal, s.sa, s.validity, 0.7)
              .values.min()
              .item<double>() >= 0.0);
    CHECK(scale_loss(s.scales).min().item<double>() >= 0.0);
    CHECK(mag_loss(s.flow, s.validity).values.min().item<double>() >= 0.0);
    CHECK(smooth_loss(s.coords, s.validity, 1, s.sa).values.min().item<double>() >=
          0.0);
    CHECK(center_loss(s.sa, s.validity).values.min().item<double>() >= 0.0);
    CHECK(sparsity_saliency(s.sa, 2.0).item<double>() >= 0.0);
    CHECK(sparsity_keys(s.ka, s.sa).item<double>() >= 0.0);
  }
}
