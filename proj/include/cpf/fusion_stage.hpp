#pragma once

#include <torch/torch.h>

#include <atomic>
#include <memory>
#include <vector>

#include "cpf/image.hpp"
#include "cpf/nn_blocks.hpp"
#include "cpf/perceptual.hpp"
#include "json.hpp"

namespace cpf {

struct FusionStageConfig {
  AdamSettings adam{1e-4, 0.5, 0.999};
  double weight_l1 = 1.0;
  double weight_per = 1.0;
  int clip_length = 5;
  int batch_size = 1;
  int epochs = 5;
  int64_t base_width = 16;
  int num_res_blocks = 3;
  // Linear factor applied before the network runs; the mask is resized back.
  double internal_scale = 1.0;
  std::string perceptual = "random";
  std::vector<double> perceptual_weights;
  int64_t max_steps = 0;
};

void to_json(nlohmann::json& j, const FusionStageConfig& c);
void from_json(const nlohmann::json& j, FusionStageConfig& c);

// Residual network mapping [bg | fg_t | previous output] to a soft foreground mask.
class FusionNetworkImpl : public torch::nn::Module {
 public:
  explicit FusionNetworkImpl(int64_t base_width = 16, int num_res_blocks = 3, double internal_scale = 1.0);
  // bg, fg, prev: [B, 3, H, W]. Returns a [B, 1, H, W] mask in [0, 1].
  torch::Tensor forward(const torch::Tensor& bg, const torch::Tensor& fg, const torch::Tensor& prev);

  // Zeroes the final convolution and sets its bias so the mask is the constant
  // sigmoid(logit); +50 saturates to exactly 1, -200 to exactly 0.
  void force_constant_logit(double logit);
  int64_t forward_calls() const { return forward_calls_.load(); }

 private:
  double internal_scale_;
  torch::nn::Sequential body_{nullptr};
  torch::nn::Conv2d output_conv_{nullptr};
  std::atomic<int64_t> forward_calls_{0};
};
TORCH_MODULE(FusionNetwork);

struct FusedFrame {
  Frame frame;
  torch::Tensor mask;  // [H, W]
};

FusedFrame fuse_step(FusionNetwork& net, const Frame& bg, const Frame& fg, const Frame& prev);

// output[0] = composite(fgs[0], bg, bootstrap_mask); output[t] = fuse_step(net,
// bg, fgs[t], output[t - 1]) for t >= 1.
FrameSequence fuse_sequence(FusionNetwork& net, const Frame& bg, const FrameSequence& fgs,
                            const torch::Tensor& bootstrap_mask);

// Fusion-free ablation: each foreground composited with its own binary mask.
FrameSequence overlay_sequence(const Frame& bg, const FrameSequence& fgs, const std::vector<torch::Tensor>& masks);

// Consecutive frames of one video with a shared background. masks[0] is the
// binary parsing mask used for the bootstrap overlay.
struct FusionClip {
  Frame background;
  FrameSequence foregrounds;
  FrameSequence targets;
  std::vector<torch::Tensor> masks;  // [H, W] binary, one per frame
};

struct FusionTrainResult {
  FusionNetwork network{nullptr};
  std::vector<double> step_loss;
  std::vector<double> step_l1;
};

// Per step one window of clip_length consecutive frames is drawn (seeded) from
// each of batch_size clips; a clip's loss sums weight_l1 * L1 + weight_per *
// perceptual over frames 2..K with gradients flowing through the recursion, and
// the step minimizes the mean over the batch.
FusionTrainResult train_fusion_stage(const std::vector<FusionClip>& clips, const FusionStageConfig& cfg,
                                     uint64_t seed, std::shared_ptr<const PerceptualExtractor> extractor = nullptr);

// Unrolls the fusion recursion on a clip and returns the composited frames
// (differentiable when grad mode is on).
std::vector<torch::Tensor> unroll_clip(FusionNetwork& net, const FusionClip& clip, size_t begin, size_t length);

// Pixels within `radius` of the boundary of a binary [H, W] mask.
torch::Tensor boundary_band(const torch::Tensor& mask, int radius = 3);
// Mean absolute error between two frames restricted to the band.
double band_l1(const Frame& a, const Frame& b, const torch::Tensor& band);

}  // namespace cpf
