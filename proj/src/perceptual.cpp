#include "cpf/perceptual.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include "cpf/checkpoint.hpp"
#include "cpf/errors.hpp"

namespace cpf {

namespace F = torch::nn::functional;

RandomConvExtractor::RandomConvExtractor(uint64_t seed, std::vector<int64_t> widths) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  int64_t in = 3;
  for (int64_t out : widths) {
    const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
    weights_.push_back(at::normal(0.0, std, {out, in, 3, 3}, gen));
    biases_.push_back(at::normal(0.0, 0.01, {out}, gen));
    in = out;
  }
}

std::vector<torch::Tensor> RandomConvExtractor::features(const torch::Tensor& images) const {
  std::vector<torch::Tensor> out;
  auto x = images;
  for (size_t i = 0; i < weights_.size(); ++i) {
    x = torch::relu(F::conv2d(x, weights_[i], F::Conv2dFuncOptions().bias(biases_[i]).padding(1)));
    out.push_back(x);
    if (x.size(2) >= 2 && x.size(3) >= 2) x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
  }
  return out;
}

const std::vector<int>& Vgg19Extractor::conv_indices() {
  static const std::vector<int> indices = {0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34};
  return indices;
}

std::vector<std::pair<int, std::vector<int64_t>>> Vgg19Extractor::expected_shapes() {
  const std::vector<int64_t> widths = {64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512};
  std::vector<std::pair<int, std::vector<int64_t>>> shapes;
  int64_t in = 3;
  for (size_t i = 0; i < widths.size(); ++i) {
    shapes.push_back({conv_indices()[i], {widths[i], in, 3, 3}});
    in = widths[i];
  }
  return shapes;
}

Vgg19Extractor::Vgg19Extractor(const std::filesystem::path& weights, std::vector<int> relu_indices)
    : relu_indices_(std::move(relu_indices)) {
  const auto tensors = load_tensors(weights);
  for (const auto& [index, shape] : expected_shapes()) {
    const std::string prefix = "features." + std::to_string(index);
    auto w = tensors.find(prefix + ".weight");
    auto b = tensors.find(prefix + ".bias");
    if (w == tensors.end() || b == tensors.end()) throw InvalidArgument("vgg19 weights missing " + prefix);
    if (!w->second.sizes().equals(shape) || b->second.numel() != shape[0]) {
      throw InvalidArgument("vgg19 weights: wrong shape for " + prefix);
    }
    weights_.push_back(w->second);
    biases_.push_back(b->second.flatten());
  }
  if (relu_indices_.empty()) throw InvalidArgument("vgg19: no output layers");
  for (int r : relu_indices_) {
    bool ok = false;
    for (int c : conv_indices()) ok = ok || (c + 1 == r);
    if (!ok) throw InvalidArgument("vgg19: index " + std::to_string(r) + " is not a conv ReLU");
  }
}

std::vector<torch::Tensor> Vgg19Extractor::features(const torch::Tensor& images) const {
  const auto mean = torch::tensor({0.485f, 0.456f, 0.406f}).view({1, 3, 1, 1});
  const auto std = torch::tensor({0.229f, 0.224f, 0.225f}).view({1, 3, 1, 1});
  auto x = (images - mean) / std;
  std::vector<torch::Tensor> out;
  const int last = *std::max_element(relu_indices_.begin(), relu_indices_.end());
  // Pools follow conv indices 2, 7, 16, 25 and 34 (torchvision modules 4, 9, 18, 27, 36).
  const std::vector<int> pool_after = {2, 7, 16, 25, 34};
  for (size_t i = 0; i < weights_.size(); ++i) {
    const int conv_index = conv_indices()[i];
    if (conv_index + 1 > last) break;
    x = torch::relu(F::conv2d(x, weights_[i], F::Conv2dFuncOptions().bias(biases_[i]).padding(1)));
    for (int r : relu_indices_) {
      if (r == conv_index + 1) out.push_back(x);
    }
    if (std::find(pool_after.begin(), pool_after.end(), conv_index) != pool_after.end()) {
      x = F::max_pool2d(x, F::MaxPool2dFuncOptions(2).stride(2));
    }
  }
  return out;
}

torch::Tensor perceptual_loss(const PerceptualExtractor& ext, const torch::Tensor& a, const torch::Tensor& b,
                              const std::vector<double>& layer_weights) {
  if (!a.sizes().equals(b.sizes())) throw InvalidArgument("perceptual_loss: image shapes differ");
  const size_t n = ext.num_layers();
  if (!layer_weights.empty() && layer_weights.size() != n) {
    throw InvalidArgument("perceptual_loss: " + std::to_string(layer_weights.size()) + " weights for " +
                          std::to_string(n) + " extractor layers");
  }
  for (double w : layer_weights) {
    if (w < 0.0) throw InvalidArgument("perceptual_loss: negative layer weight");
  }
  const auto fa = ext.features(a);
  const auto fb = ext.features(b);
  auto loss = torch::zeros({}, a.options());
  for (size_t i = 0; i < n; ++i) {
    const double w = layer_weights.empty() ? 1.0 / static_cast<double>(n) : layer_weights[i];
    if (w == 0.0) continue;
    loss = loss + w * (fa[i] - fb[i]).abs().mean();
  }
  return loss;
}

double perceptual_loss(const PerceptualExtractor& ext, const Frame& a, const Frame& b,
                       const std::vector<double>& layer_weights) {
  torch::NoGradGuard no_grad;
  return perceptual_loss(ext, a.rgb.unsqueeze(0), b.rgb.unsqueeze(0), layer_weights).item<double>();
}

std::shared_ptr<const PerceptualExtractor> make_extractor(const std::string& spec) {
  if (spec == "random") return std::make_shared<RandomConvExtractor>();
  if (spec.rfind("random:", 0) == 0) return std::make_shared<RandomConvExtractor>(std::stoull(spec.substr(7)));
  if (spec == "identity") return std::make_shared<IdentityExtractor>();
  if (spec.rfind("vgg19:", 0) == 0) return std::make_shared<Vgg19Extractor>(spec.substr(6));
  throw InvalidArgument("unknown perceptual extractor '" + spec + "'");
}

}  // namespace cpf
