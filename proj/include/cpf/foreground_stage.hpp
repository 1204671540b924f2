#pragma once

#include <torch/torch.h>

#include <memory>
#include <vector>

#include "cpf/correspondence.hpp"
#include "cpf/image.hpp"
#include "cpf/nn_blocks.hpp"
#include "cpf/perceptual.hpp"
#include "json.hpp"

namespace cpf {

struct ForegroundStageConfig {
  AdamSettings gen_adam{2e-4, 0.5, 0.999};
  AdamSettings disc_adam{2e-5, 0.5, 0.999};
  double lambda_adv = 0.01;
  double lambda_l1 = 1.0;
  double lambda_per = 1.0;
  int batch_size = 8;
  int epochs = 40;
  int num_classes = 20;
  int64_t image_size = 448;
  int64_t base_width = 32;
  int levels = 4;
  int64_t disc_base_width = 64;
  int disc_layers = 3;
  std::vector<double> perceptual_weights;  // empty: 1/n per layer
  std::string perceptual = "random";       // see make_extractor
  bool no_flow = false;
  int64_t max_steps = 0;
};

void to_json(nlohmann::json& j, const ForegroundStageConfig& c);
void from_json(const nlohmann::json& j, ForegroundStageConfig& c);

// Per-scale appearance warping. Features are gathered along the flow, split
// into visible and invisible parts by the visibility map, concatenated, and
// refined by two 3x3 convolutions added back onto the warped features.
class WarpBlockImpl : public torch::nn::Module {
 public:
  explicit WarpBlockImpl(int64_t channels);
  // feat [B, C, h, w]; flow [B, 2, h, w] at this scale; vis [B, h, w] int64.
  torch::Tensor forward(const torch::Tensor& feat, const torch::Tensor& flow, const torch::Tensor& vis);
  // Zeroes the second convolution so the block returns the warped features.
  void reset_to_identity();

 private:
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
};
TORCH_MODULE(WarpBlock);

// Nearest-neighbour visibility downsampling used by the warp blocks.
torch::Tensor downsample_visibility(const torch::Tensor& vis, int64_t height, int64_t width);

// Dual-path U-Net: a parsing encoder and an appearance encoder with matching
// scale pyramids; appearance features are warped at every scale and the
// decoder receives [parsing, warped appearance] skips at each level.
class DualPathGeneratorImpl : public torch::nn::Module {
 public:
  DualPathGeneratorImpl(int num_classes, int64_t base_width = 32, int levels = 4);
  // parsing_one_hot [B, C, H, W], appearance [B, 3, H, W], flow [B, 2, H, W],
  // vis [B, H, W]. Returns [B, 3, H, W] in [0, 1].
  torch::Tensor forward(const torch::Tensor& parsing_one_hot, const torch::Tensor& appearance,
                        const torch::Tensor& flow, const torch::Tensor& vis);

  int num_classes() const { return num_classes_; }
  int levels() const { return levels_; }
  int64_t stride() const { return int64_t{1} << (levels_ - 1); }
  WarpBlock warp_block(int level) const { return warp_blocks_.at(static_cast<size_t>(level)); }

 private:
  int num_classes_;
  int levels_;
  std::vector<LayerStack> parsing_encoder_;
  std::vector<LayerStack> appearance_encoder_;
  std::vector<WarpBlock> warp_blocks_;
  LayerStack bottom_{nullptr};
  std::vector<torch::nn::Sequential> upsamplers_;
  std::vector<LayerStack> decoders_;
  torch::nn::Conv2d output_{nullptr};
};
TORCH_MODULE(DualPathGenerator);

Frame generate_foreground(DualPathGenerator& gen, const Frame& appearance_fg, const ParsingMap& target_parsing,
                          const FlowField& flow, const VisibilityMap& vis);

// Convolutional patch classifier over [appearance | parsing one-hot | foreground];
// scores in (0, 1) on a spatial grid.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  PatchDiscriminatorImpl(int64_t in_channels, int64_t base_width = 64, int layers = 3);
  torch::Tensor forward(const torch::Tensor& input);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

inline constexpr double kLogFloor = 1e-8;

// d_loss = -mean log D(real) - mean log(1 - D(fake)); g_loss = -mean log D(fake).
// Logs are taken of values clipped to [kLogFloor, 1].
std::pair<torch::Tensor, torch::Tensor> adversarial_losses(const torch::Tensor& real_scores,
                                                           const torch::Tensor& fake_scores);

struct ConditionedImage {
  torch::Tensor appearance;       // [B, 3, H, W]
  torch::Tensor parsing_one_hot;  // [B, C, H, W]
  torch::Tensor foreground;       // [B, 3, H, W]
};

std::pair<torch::Tensor, torch::Tensor> adversarial_losses(PatchDiscriminator& disc, const ConditionedImage& real,
                                                           const ConditionedImage& fake);

struct ForegroundSample {
  Frame appearance_fg;
  ParsingMap target_parsing;
  FlowField flow;
  VisibilityMap visibility;
  Frame target_fg;
};

struct ForegroundCurves {
  std::vector<double> d_loss;
  std::vector<double> g_adv;
  std::vector<double> l1;
  std::vector<double> perceptual;
  std::vector<double> total;
};

struct ForegroundTrainResult {
  DualPathGenerator generator{nullptr};
  PatchDiscriminator discriminator{nullptr};
  ForegroundCurves curves;
};

// Alternating discriminator / generator updates. The generator minimizes
// lambda_adv * g_adv + lambda_l1 * L1 + lambda_per * perceptual. With
// cfg.no_flow every sample uses zero flow and an all-visible map.
ForegroundTrainResult train_foreground_stage(const std::vector<ForegroundSample>& dataset,
                                             const ForegroundStageConfig& cfg, uint64_t seed,
                                             std::shared_ptr<const PerceptualExtractor> extractor = nullptr);

}  // namespace cpf
