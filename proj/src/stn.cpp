#include "congeal/stn.hpp"

#include <cmath>

#include "congeal/common.hpp"

namespace congeal {

namespace F = torch::nn::functional;

namespace {

constexpr double kSqrt2 = 1.4142135623730951;

torch::Tensor fused_lrelu(const torch::Tensor& x, const torch::Tensor& bias,
                          double slope) {
  auto b = bias.view({1, -1, 1, 1});
  return torch::leaky_relu(x + b, slope) * kSqrt2;
}

// Channel width at a given spatial resolution, capped at max_channels. At
// the defaults this reproduces the 64 -> 128 -> 512 -> 512 ... schedule.
int64_t width_for(int64_t in_width, const StnConfig& cfg, int64_t block_index) {
  const int64_t grown = cfg.base_channels << (2 * block_index + 1);
  (void)in_width;
  return std::min<int64_t>(cfg.max_channels, grown);
}

}  // namespace

BlurImpl::BlurImpl(const std::vector<double>& kernel_1d, int64_t pad0,
                   int64_t pad1, int64_t stride)
    : pad0(pad0), pad1(pad1), stride(stride) {
  auto k1 = torch::tensor(kernel_1d, torch::kFloat32);
  auto k2 = torch::outer(k1, k1);
  k2 = k2 / k2.sum();
  kernel = register_buffer("kernel", k2.unsqueeze(0).unsqueeze(0));
}

torch::Tensor BlurImpl::forward(const torch::Tensor& x) {
  const int64_t c = x.size(1);
  auto padded = F::pad(x, F::PadFuncOptions({pad0, pad1, pad0, pad1}));
  auto w = kernel.expand({c, 1, kernel.size(2), kernel.size(3)});
  return F::conv2d(padded, w, F::Conv2dFuncOptions().stride(stride).groups(c));
}

EqualConv2dImpl::EqualConv2dImpl(int64_t in_ch, int64_t out_ch, int64_t kernel,
                                 int64_t stride, int64_t padding, bool bias)
    : stride(stride), padding(padding) {
  weight = register_parameter("weight", torch::randn({out_ch, in_ch, kernel, kernel}));
  scale = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel * kernel));
  if (bias) bias_param = register_parameter("bias", torch::zeros({out_ch}));
}

torch::Tensor EqualConv2dImpl::forward(const torch::Tensor& x) {
  auto opts = F::Conv2dFuncOptions().stride(stride).padding(padding);
  if (bias_param.defined()) opts = opts.bias(bias_param);
  return F::conv2d(x, weight * scale, opts);
}

EqualLinearImpl::EqualLinearImpl(int64_t in_dim, int64_t out_dim,
                                 bool fused_lrelu, double slope)
    : slope(slope), fused_lrelu(fused_lrelu) {
  weight = register_parameter("weight", torch::randn({out_dim, in_dim}));
  bias = register_parameter("bias", torch::zeros({out_dim}));
  scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) {
  if (fused_lrelu) {
    auto out = F::linear(x, weight * scale);
    return torch::leaky_relu(out + bias.unsqueeze(0), slope) * kSqrt2;
  }
  return F::linear(x, weight * scale, bias);
}

ConvLImpl::ConvLImpl(int64_t in_ch, int64_t out_ch, int64_t kernel,
                     int64_t stride, int64_t padding, bool blur, bool activate,
                     const StnConfig& cfg, bool bias)
    : activate(activate), slope(cfg.lrelu_slope) {
  if (blur) {
    // Antialiasing pad so that stride-2 convs halve the resolution exactly.
    const int64_t blur_len = static_cast<int64_t>(cfg.blur_kernel.size());
    const int64_t p = (blur_len - stride) + (kernel - 1);
    blur_layer = register_module(
        "blur", Blur(cfg.blur_kernel, (p + 1) / 2, p / 2));
  }
  conv = register_module("conv", EqualConv2d(in_ch, out_ch, kernel, stride,
                                             padding, bias && !activate));
  if (activate)
    act_bias = register_parameter("act_bias", torch::zeros({out_ch}));
}

torch::Tensor ConvLImpl::forward(const torch::Tensor& x) {
  auto h = x;
  if (blur_layer) h = blur_layer->forward(h);
  h = conv->forward(h);
  if (activate) h = fused_lrelu(h, act_bias, slope);
  return h;
}

ResBlockImpl::ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t stride,
                           const StnConfig& cfg) {
  const bool down = stride == 2;
  conv1 = register_module("conv1",
                          ConvL(in_ch, in_ch, 3, 1, 1, false, true, cfg));
  conv2 = register_module("conv2",
                          ConvL(in_ch, out_ch, 3, stride, down ? 0 : 1, down,
                                true, cfg));
  skip = register_module("skip", ConvL(in_ch, out_ch, 1, stride, 0, down,
                                       false, cfg, /*bias=*/false));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv2->forward(conv1->forward(x));
  return (h + skip->forward(x)) / kSqrt2;
}

RigidSTNImpl::RigidSTNImpl(int64_t input_size, const StnConfig& cfg) {
  check(input_size % 2 == 0, "rigid STN input size must be even");
  downsample = register_module("downsample", Blur(cfg.blur_kernel, 1, 1, 2));

  int64_t res = input_size / 2;
  int64_t ch = cfg.base_channels;
  blocks = register_module("blocks", torch::nn::ModuleList());
  blocks->push_back(ConvL(3, ch, 1, 1, 0, false, true, cfg));
  for (int64_t i = 0; i < 5; ++i) {
    const int64_t out = width_for(ch, cfg, i);
    blocks->push_back(ResBlock(ch, out, 2, cfg));
    ch = out;
    res /= 2;
  }
  blocks->push_back(ConvL(ch, ch, 3, 1, 1, false, true, cfg));

  fc1 = register_module("fc1", EqualLinear(ch * res * res, ch, true,
                                           cfg.lrelu_slope));
  fc2 = register_module("fc2", EqualLinear(ch, 4, false, cfg.lrelu_slope));
  // Identity similarity at initialization.
  torch::NoGradGuard ng;
  fc2->weight.zero_();
  fc2->bias.zero_();
}

torch::Tensor RigidSTNImpl::forward_logits(const torch::Tensor& images) {
  auto h = downsample->forward(images * 2.0 - 1.0);
  for (auto& m : *blocks) {
    if (auto* c = m->as<ConvLImpl>())
      h = c->forward(h);
    else
      h = m->as<ResBlockImpl>()->forward(h);
  }
  h = h.flatten(1);
  return fc2->forward(fc1->forward(h));
}

SimilarityParams RigidSTNImpl::forward(const torch::Tensor& images) {
  return SimilarityParams::from_logits(forward_logits(images));
}

NonRigidSTNImpl::NonRigidSTNImpl(int64_t input_size, const StnConfig& cfg) {
  check(input_size >= cfg.coarse_grid && input_size % cfg.coarse_grid == 0,
        "nonrigid input size must be a multiple of the coarse grid");
  blocks = register_module("blocks", torch::nn::ModuleList());
  int64_t ch = cfg.base_channels;
  blocks->push_back(ConvL(3, ch, 1, 1, 0, false, true, cfg));

  int64_t res = input_size, i = 0;
  while (res > cfg.coarse_grid) {
    const int64_t out = width_for(ch, cfg, i++);
    blocks->push_back(ResBlock(ch, out, 2, cfg));
    ch = out;
    res /= 2;
  }
  blocks->push_back(ResBlock(ch, ch, 1, cfg));
  blocks->push_back(ConvL(ch, ch, 3, 1, 1, false, true, cfg));

  auto conv_opts = [](int64_t in, int64_t out) {
    return torch::nn::Conv2dOptions(in, out, 3).stride(1).padding(1);
  };
  flow_a = register_module("flow_a", torch::nn::Conv2d(conv_opts(ch, ch)));
  flow_b = register_module("flow_b", torch::nn::Conv2d(conv_opts(ch, 2)));
  weight_a = register_module("weight_a", torch::nn::Conv2d(conv_opts(ch, ch)));
  weight_b = register_module(
      "weight_b", torch::nn::Conv2d(conv_opts(
                      ch, 9 * upsample_factor * upsample_factor)));
  // Zero flow and uniform upsampling weights at initialization.
  torch::NoGradGuard ng;
  flow_b->weight.zero_();
  flow_b->bias.zero_();
  weight_b->weight.zero_();
  weight_b->bias.zero_();
}

FlowField NonRigidSTNImpl::forward(const torch::Tensor& congealed,
                                   int64_t atlas_h, int64_t atlas_w) {
  auto h = congealed * 2.0 - 1.0;
  for (auto& m : *blocks) {
    if (auto* c = m->as<ConvLImpl>())
      h = c->forward(h);
    else
      h = m->as<ResBlockImpl>()->forward(h);
  }

  FlowField f;
  f.coarse = flow_b->forward(torch::relu(flow_a->forward(h)));
  f.upsample_weights = weight_b->forward(torch::relu(weight_a->forward(h)));
  auto dense = convex_upsample(f.coarse, f.upsample_weights, upsample_factor);
  if (dense.size(2) != atlas_h || dense.size(3) != atlas_w) {
    dense = F::interpolate(dense, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{atlas_h, atlas_w})
                                      .mode(torch::kBilinear)
                                      .align_corners(true));
  }
  f.dense = dense.permute({0, 2, 3, 1});
  return f;
}

}  // namespace congeal
