#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <utility>
#include <vector>

#include "cpf/correspondence.hpp"
#include "cpf/nn_blocks.hpp"
#include "cpf/pose_toolkit.hpp"
#include "json.hpp"

namespace cpf {

// Bilinear gather: out(p) = feat(p + flow(p)); taps outside the map read
// `fill`. feat is [C, H, W] or [B, C, H, W]; flow [2, H, W] or [B, 2, H, W]
// (du, dv) in pixels at the feature resolution. Differentiable in both.
torch::Tensor warp_by_flow(const torch::Tensor& feat, const torch::Tensor& flow, double fill = 0.0);

// Resizes a flow tensor by `factor` (bilinear) and scales its displacements by
// the same factor. Output size is round(H * factor) x round(W * factor).
torch::Tensor rescale_flow(const torch::Tensor& flow, double factor);
FlowField rescale_flow(const FlowField& flow, double factor);

struct FlowLosses {
  double epe = 0.0;
  double ce = 0.0;
};

// epe: mean end-point error over ground-truth visible pixels (0 when there are
// none). ce: 3-class cross entropy averaged over all pixels.
// Batched tensors: pred_flow [B, 2, H, W], vis_logits [B, 3, H, W],
// gt_flow [B, 2, H, W], gt_vis [B, H, W] (int64).
std::pair<torch::Tensor, torch::Tensor> flow_loss_terms(const torch::Tensor& pred_flow,
                                                        const torch::Tensor& vis_logits,
                                                        const torch::Tensor& gt_flow,
                                                        const torch::Tensor& gt_vis);
FlowLosses flow_losses(const FlowField& pred_flow, const torch::Tensor& vis_logits, const FlowField& gt_flow,
                       const VisibilityMap& gt_vis);

struct FlowStageConfig {
  AdamSettings adam{2e-4, 0.5, 0.999};
  double epe_weight = 1.0;
  double ce_weight = 1.0;
  int epochs = 10;
  int batch_size = 8;
  int64_t image_size = 448;
  int64_t base_width = 32;
  int depth = 5;
  double pose_sigma = 6.0;
  int64_t max_steps = 0;
};

void to_json(nlohmann::json& j, const FlowStageConfig& c);
void from_json(const nlohmann::json& j, FlowStageConfig& c);

// U-Net over [appearance pose map | target pose map] with a 2-channel flow head
// and a 3-channel visibility-logit head.
class FlowRegressorImpl : public torch::nn::Module {
 public:
  explicit FlowRegressorImpl(int64_t base_width = 32, int depth = 5);
  // Returns {flow [B, 2, H, W], visibility logits [B, 3, H, W]}.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& input);

  int64_t stride() const { return int64_t{1} << (depth_ - 1); }
  static constexpr int64_t kInChannels = 2 * kPoseMapChannels;

 private:
  int depth_;
  std::vector<torch::nn::Sequential> encoders_;
  std::vector<torch::nn::Sequential> upsamplers_;
  std::vector<torch::nn::Sequential> decoders_;
  torch::nn::Conv2d flow_head_{nullptr};
  torch::nn::Conv2d vis_head_{nullptr};
};
TORCH_MODULE(FlowRegressor);

struct FlowPrediction {
  FlowField flow;
  VisibilityMap visibility;
  torch::Tensor logits;  // [3, H, W]
};

FlowPrediction predict_flow(FlowRegressor& regressor, const torch::Tensor& appearance_pose,
                            const torch::Tensor& target_pose);

struct FlowSample {
  torch::Tensor appearance_pose;  // [kPoseMapChannels, H, W]
  torch::Tensor target_pose;
  FlowField flow;
  VisibilityMap visibility;
};

struct FlowTrainResult {
  FlowRegressor regressor{nullptr};
  std::vector<double> step_loss;
  std::vector<double> step_epe;
  std::vector<double> step_ce;
};

FlowTrainResult train_flow_stage(const std::vector<FlowSample>& dataset, const FlowStageConfig& cfg, uint64_t seed);

// Middlebury .flo: float 202021.25, int32 width, int32 height, then row-major
// interleaved float32 (du, dv).
inline constexpr float kFloMagic = 202021.25f;
void write_flo(const FlowField& flow, const std::filesystem::path& path);
FlowField read_flo(const std::filesystem::path& path);

}  // namespace cpf
