#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <vector>

#include "cpf/image.hpp"

namespace cpf {

// Maps a batch of RGB images [B, 3, H, W] in [0, 1] to a list of feature
// maps. Implementations are deterministic and hold frozen weights; gradients
// still flow to the input.
class PerceptualExtractor {
 public:
  virtual ~PerceptualExtractor() = default;
  virtual std::vector<torch::Tensor> features(const torch::Tensor& images) const = 0;
  virtual size_t num_layers() const = 0;
};

// One layer: the image itself. Reduces the perceptual loss to plain L1.
class IdentityExtractor final : public PerceptualExtractor {
 public:
  std::vector<torch::Tensor> features(const torch::Tensor& images) const override { return {images}; }
  size_t num_layers() const override { return 1; }
};

// Stack of 3x3 conv + ReLU + 2x2 average pooling with weights drawn from a
// private generator seeded by `seed`. One feature map per stage.
class RandomConvExtractor final : public PerceptualExtractor {
 public:
  explicit RandomConvExtractor(uint64_t seed = 1234, std::vector<int64_t> widths = {8, 16, 32});
  std::vector<torch::Tensor> features(const torch::Tensor& images) const override;
  size_t num_layers() const override { return weights_.size(); }

 private:
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

// VGG19 convolutional trunk loaded from a tensor container whose names follow
// the torchvision layout ("features.<i>.weight", "features.<i>.bias"). Outputs
// are taken after the ReLUs at `relu_indices` (torchvision module indices).
class Vgg19Extractor final : public PerceptualExtractor {
 public:
  explicit Vgg19Extractor(const std::filesystem::path& weights,
                          std::vector<int> relu_indices = {1, 6, 11, 20, 29});
  std::vector<torch::Tensor> features(const torch::Tensor& images) const override;
  size_t num_layers() const override { return relu_indices_.size(); }

  // Torchvision module indices of the 16 conv layers.
  static const std::vector<int>& conv_indices();
  // Expected [out, in, 3, 3] weight shapes keyed by conv index.
  static std::vector<std::pair<int, std::vector<int64_t>>> expected_shapes();

 private:
  std::vector<int> relu_indices_;
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

// sum_i w_i * mean |phi_i(a) - phi_i(b)|. Empty `layer_weights` means 1/n each.
torch::Tensor perceptual_loss(const PerceptualExtractor& ext, const torch::Tensor& a, const torch::Tensor& b,
                              const std::vector<double>& layer_weights = {});
double perceptual_loss(const PerceptualExtractor& ext, const Frame& a, const Frame& b,
                       const std::vector<double>& layer_weights = {});

// "random[:seed]" or "vgg19:<weights-path>".
std::shared_ptr<const PerceptualExtractor> make_extractor(const std::string& spec);

}  // namespace cpf
