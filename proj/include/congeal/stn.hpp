#pragma once

#include <torch/torch.h>

#include "congeal/config.hpp"
#include "congeal/mapping.hpp"

namespace congeal {

/// Depthwise blur (upfirdn-style) with a fixed separable kernel.
struct BlurImpl : torch::nn::Module {
  BlurImpl(const std::vector<double>& kernel_1d, int64_t pad0, int64_t pad1,
           int64_t stride = 1);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor kernel;
  int64_t pad0, pad1, stride;
};
TORCH_MODULE(Blur);

/// Conv with equalized learning rate: weights ~ N(0,1), scaled by
/// 1/sqrt(fan_in) at runtime.
struct EqualConv2dImpl : torch::nn::Module {
  EqualConv2dImpl(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride,
                  int64_t padding, bool bias);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias_param;
  int64_t stride, padding;
  double scale;
};
TORCH_MODULE(EqualConv2d);

struct EqualLinearImpl : torch::nn::Module {
  EqualLinearImpl(int64_t in_dim, int64_t out_dim, bool fused_lrelu,
                  double slope);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;
  double scale, slope;
  bool fused_lrelu;
};
TORCH_MODULE(EqualLinear);

/// blur (optional) -> equalized conv -> fused leaky ReLU (optional).
struct ConvLImpl : torch::nn::Module {
  ConvLImpl(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride,
            int64_t padding, bool blur, bool activate, const StnConfig& cfg,
            bool bias = true);
  torch::Tensor forward(const torch::Tensor& x);

  Blur blur_layer{nullptr};
  EqualConv2d conv{nullptr};
  torch::Tensor act_bias;
  bool activate;
  double slope;
};
TORCH_MODULE(ConvL);

struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t stride, const StnConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

  ConvL conv1{nullptr}, conv2{nullptr}, skip{nullptr};
};
TORCH_MODULE(ResBlock);

/// Rigid STN: residual backbone over the (bilinearly downsampled) input
/// image, two fully connected heads, four logits. The activations
/// theta = pi*tanh(o1), s = exp(o2), t = (o3,o4) guarantee s > 0 and
/// |theta| < pi. The final layer is zero-initialized so training starts at
/// the identity similarity.
struct RigidSTNImpl : torch::nn::Module {
  RigidSTNImpl(int64_t input_size, const StnConfig& cfg);
  torch::Tensor forward_logits(const torch::Tensor& images);
  SimilarityParams forward(const torch::Tensor& images);

  Blur downsample{nullptr};
  torch::nn::ModuleList blocks;
  EqualLinear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(RigidSTN);

/// Non-rigid STN: residual backbone down to the coarse grid, one head for
/// the 16x16 coarse flow and one for the learned x8 upsampling weights.
/// Both heads are zero-initialized (zero flow, uniform upsampling).
struct NonRigidSTNImpl : torch::nn::Module {
  NonRigidSTNImpl(int64_t input_size, const StnConfig& cfg);

  /// Returns the flow field with `dense` at atlas resolution.
  FlowField forward(const torch::Tensor& congealed, int64_t atlas_h,
                    int64_t atlas_w);

  torch::nn::ModuleList blocks;
  torch::nn::Conv2d flow_a{nullptr}, flow_b{nullptr};
  torch::nn::Conv2d weight_a{nullptr}, weight_b{nullptr};
  int64_t upsample_factor = 8;
};
TORCH_MODULE(NonRigidSTN);

}  // namespace congeal
