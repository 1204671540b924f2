#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "cpf/image.hpp"
#include "cpf/nn_blocks.hpp"
#include "cpf/pose_toolkit.hpp"
#include "json.hpp"

namespace cpf {

struct ParsingStageConfig {
  AdamSettings adam{2e-4, 0.5, 0.999};
  double loss_weight_l1 = 10.0;
  double loss_weight_par = 10.0;
  int epochs = 30;
  int batch_size = 1;
  int num_classes = 20;
  int64_t image_size = 448;
  int64_t base_width = 64;
  int num_res_blocks = 9;
  double pose_sigma = 6.0;
  // Stops training after this many optimizer steps when > 0.
  int64_t max_steps = 0;
};

void to_json(nlohmann::json& j, const ParsingStageConfig& c);
void from_json(const nlohmann::json& j, ParsingStageConfig& c);

// Encoder / 9 residual blocks / decoder generator mapping
// [one-hot appearance parsing (C) | pose map] to C parsing logits.
class ParsingGeneratorImpl : public torch::nn::Module {
 public:
  ParsingGeneratorImpl(int num_classes, int64_t base_width = 64, int num_res_blocks = 9);
  torch::Tensor forward(const torch::Tensor& input);

  int num_classes() const { return num_classes_; }
  int64_t in_channels() const { return num_classes_ + kPoseMapChannels; }
  // Total downsampling factor; input H and W must be multiples of it.
  static constexpr int64_t kStride = 4;
  torch::nn::Conv2d input_conv() const { return input_conv_; }
  torch::nn::Conv2d output_conv() const { return output_conv_; }

 private:
  int num_classes_;
  torch::nn::Conv2d input_conv_{nullptr};
  torch::nn::Conv2d output_conv_{nullptr};
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ParsingGenerator);

// Pre-argmax logits [B, C, H, W] for a batch of (appearance one-hot, pose map).
torch::Tensor parsing_logits(ParsingGenerator& gen, const torch::Tensor& appearance_one_hot,
                             const torch::Tensor& pose_map);

ParsingMap generate_parsing(ParsingGenerator& gen, const ParsingMap& appearance_parsing,
                            const torch::Tensor& source_pose);

struct ParsingLosses {
  double l1 = 0.0;
  double par = 0.0;
};

inline constexpr double kProbabilityFloor = 1e-8;

// Unnormalized sums: l1 = sum |x_p - x_p'|, par = -sum x_p log(max(x_p', eps)).
// `pred_probs` is a [C, H, W] or [B, C, H, W] probability map.
ParsingLosses parsing_losses(const torch::Tensor& pred_probs, const ParsingMap& target);

// Differentiable form over one-hot targets, returning {l1, par} as scalar
// tensors summed over every element.
std::pair<torch::Tensor, torch::Tensor> parsing_loss_terms(const torch::Tensor& pred_probs,
                                                           const torch::Tensor& target_one_hot);

struct ParsingSample {
  ParsingMap appearance_parsing;
  torch::Tensor source_pose;  // [kPoseMapChannels, H, W]
  ParsingMap target_parsing;
};

struct ParsingTrainResult {
  ParsingGenerator generator{nullptr};
  std::vector<double> step_loss;   // weighted loss per optimizer step
  std::vector<double> epoch_loss;  // mean weighted loss per epoch
};

// Weighted training objective on per-pixel means:
// w_l1 * mean_b(l1_b / (H W)) + w_par * mean_b(par_b / (H W)).
torch::Tensor parsing_training_loss(const torch::Tensor& logits, const torch::Tensor& target_one_hot,
                                    const ParsingStageConfig& cfg);

ParsingTrainResult train_parsing_stage(const std::vector<ParsingSample>& dataset,
                                       const ParsingStageConfig& cfg, uint64_t seed);

}  // namespace cpf
