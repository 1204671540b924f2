#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <vector>

#include "json.hpp"

namespace cpf {

struct AdamSettings {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
};

void to_json(nlohmann::json& j, const AdamSettings& a);
void from_json(const nlohmann::json& j, AdamSettings& a);

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, const AdamSettings& settings);

// A Sequential with a concrete forward so it can nest inside other Sequentials.
class LayerStackImpl : public torch::nn::Module {
 public:
  explicit LayerStackImpl(torch::nn::Sequential layers);
  torch::Tensor forward(const torch::Tensor& x) { return layers_->forward(x); }

 private:
  torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(LayerStack);

// conv(k, stride) -> InstanceNorm(affine) -> activation. Reflection padding
// keeps spatial size for stride 1.
LayerStack conv_norm_act(int64_t in, int64_t out, int64_t kernel, int64_t stride, bool leaky = false);

// Upsampling counterpart: transposed conv with stride 2 doubling H and W.
LayerStack up_norm_act(int64_t in, int64_t out);

// Two 3x3 conv + InstanceNorm layers with an identity skip.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResidualBlock);

// Deterministic shuffled epoch orders derived from a seed.
class EpochSampler {
 public:
  EpochSampler(size_t dataset_size, uint64_t seed);
  std::vector<size_t> next_epoch();

 private:
  size_t size_;
  std::mt19937_64 rng_;
};

// Mean of a loss series over a trailing window, used to read noisy curves.
std::vector<double> moving_average(const std::vector<double>& values, size_t window);

// Number of trainable scalars.
int64_t parameter_count(const torch::nn::Module& module);

// Stacks per-sample tensors along a new batch dimension.
torch::Tensor stack_batch(const std::vector<torch::Tensor>& items);

}  // namespace cpf
