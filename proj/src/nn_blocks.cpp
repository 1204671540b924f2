#include "cpf/nn_blocks.hpp"

#include <algorithm>
#include <numeric>

namespace cpf {

namespace nn = torch::nn;

void to_json(nlohmann::json& j, const AdamSettings& a) {
  j = nlohmann::json{{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}};
}

void from_json(const nlohmann::json& j, AdamSettings& a) {
  a.lr = j.value("lr", a.lr);
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
}

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, const AdamSettings& settings) {
  return torch::optim::Adam(std::move(params), torch::optim::AdamOptions(settings.lr)
                                                   .betas(std::make_tuple(settings.beta1, settings.beta2)));
}

LayerStackImpl::LayerStackImpl(nn::Sequential layers) : layers_(std::move(layers)) {
  register_module("layers", layers_);
}

LayerStack conv_norm_act(int64_t in, int64_t out, int64_t kernel, int64_t stride, bool leaky) {
  nn::Sequential seq;
  const int64_t pad = kernel / 2;
  if (stride == 1 && pad > 0) {
    seq->push_back(nn::ReflectionPad2d(pad));
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, kernel)));
  } else {
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(pad)));
  }
  seq->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out).affine(true)));
  if (leaky) {
    seq->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  } else {
    seq->push_back(nn::ReLU());
  }
  return LayerStack(seq);
}

LayerStack up_norm_act(int64_t in, int64_t out) {
  nn::Sequential seq;
  seq->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 3).stride(2).padding(1).output_padding(1)));
  seq->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out).affine(true)));
  seq->push_back(nn::ReLU());
  return LayerStack(seq);
}

ResidualBlockImpl::ResidualBlockImpl(int64_t channels) {
  body_ = nn::Sequential(nn::ReflectionPad2d(1), nn::Conv2d(nn::Conv2dOptions(channels, channels, 3)),
                         nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels).affine(true)), nn::ReLU(),
                         nn::ReflectionPad2d(1), nn::Conv2d(nn::Conv2dOptions(channels, channels, 3)),
                         nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels).affine(true)));
  register_module("body", body_);
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + body_->forward(x); }

EpochSampler::EpochSampler(size_t dataset_size, uint64_t seed) : size_(dataset_size), rng_(seed) {}

std::vector<size_t> EpochSampler::next_epoch() {
  std::vector<size_t> order(size_);
  std::iota(order.begin(), order.end(), size_t{0});
  // Fisher-Yates on raw engine output; std::shuffle draws are library-specific.
  for (size_t i = size_; i > 1; --i) {
    const size_t j = static_cast<size_t>(rng_() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<double> moving_average(const std::vector<double>& values, size_t window) {
  std::vector<double> out;
  if (window == 0 || values.size() < window) return out;
  double sum = std::accumulate(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(window), 0.0);
  out.push_back(sum / static_cast<double>(window));
  for (size_t i = window; i < values.size(); ++i) {
    sum += values[i] - values[i - window];
    out.push_back(sum / static_cast<double>(window));
  }
  return out;
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

torch::Tensor stack_batch(const std::vector<torch::Tensor>& items) { return torch::stack(items, 0); }

}  // namespace cpf
