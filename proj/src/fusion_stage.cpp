#include "cpf/fusion_stage.hpp"

#include <cmath>

#include "cpf/errors.hpp"
#include "cpf/region_ops.hpp"

namespace cpf {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

void to_json(nlohmann::json& j, const FusionStageConfig& c) {
  j = nlohmann::json{{"adam", c.adam},
                     {"weight_l1", c.weight_l1},
                     {"weight_per", c.weight_per},
                     {"clip_length", c.clip_length},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"base_width", c.base_width},
                     {"num_res_blocks", c.num_res_blocks},
                     {"internal_scale", c.internal_scale},
                     {"perceptual", c.perceptual},
                     {"perceptual_weights", c.perceptual_weights},
                     {"max_steps", c.max_steps}};
}

void from_json(const nlohmann::json& j, FusionStageConfig& c) {
  if (j.contains("adam")) j.at("adam").get_to(c.adam);
  c.weight_l1 = j.value("weight_l1", c.weight_l1);
  c.weight_per = j.value("weight_per", c.weight_per);
  c.clip_length = j.value("clip_length", c.clip_length);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.base_width = j.value("base_width", c.base_width);
  c.num_res_blocks = j.value("num_res_blocks", c.num_res_blocks);
  c.internal_scale = j.value("internal_scale", c.internal_scale);
  c.perceptual = j.value("perceptual", c.perceptual);
  c.perceptual_weights = j.value("perceptual_weights", c.perceptual_weights);
  c.max_steps = j.value("max_steps", c.max_steps);
  if (c.clip_length < 2) throw InvalidArgument("fusion config: clip_length < 2");
  if (!(c.internal_scale > 0.0 && c.internal_scale <= 1.0)) throw InvalidArgument("fusion config: internal_scale outside (0, 1]");
}

FusionNetworkImpl::FusionNetworkImpl(int64_t base_width, int num_res_blocks, double internal_scale)
    : internal_scale_(internal_scale) {
  if (!(internal_scale > 0.0 && internal_scale <= 1.0)) throw InvalidArgument("FusionNetwork: internal_scale outside (0, 1]");
  const int64_t w = base_width;
  output_conv_ = nn::Conv2d(nn::Conv2dOptions(w, 1, 7));
  body_ = nn::Sequential();
  body_->push_back(conv_norm_act(9, w, 7, 1));
  body_->push_back(conv_norm_act(w, 2 * w, 3, 2));
  for (int i = 0; i < num_res_blocks; ++i) body_->push_back(ResidualBlock(2 * w));
  body_->push_back(up_norm_act(2 * w, w));
  body_->push_back(nn::ReflectionPad2d(3));
  body_->push_back(output_conv_);
  register_module("body", body_);
}

torch::Tensor FusionNetworkImpl::forward(const torch::Tensor& bg, const torch::Tensor& fg, const torch::Tensor& prev) {
  if (bg.dim() != 4 || bg.size(1) != 3 || !bg.sizes().equals(fg.sizes()) || !bg.sizes().equals(prev.sizes())) {
    throw InvalidArgument("FusionNetwork: bg, fg and previous frame must share a [B, 3, H, W] shape");
  }
  ++forward_calls_;
  const int64_t h = bg.size(2);
  const int64_t w = bg.size(3);
  // Internal resolution: scaled, rounded to the even sizes the stride-2 body needs.
  const auto even = [&](int64_t n) {
    return std::max<int64_t>(8, 2 * static_cast<int64_t>(std::llround(static_cast<double>(n) * internal_scale_ / 2.0)));
  };
  const int64_t ih = even(h);
  const int64_t iw = even(w);
  auto x = torch::cat({bg, fg, prev}, 1);
  if (ih != h || iw != w) x = resize_bilinear(x, ih, iw);
  auto mask = torch::sigmoid(body_->forward(x));
  if (ih != h || iw != w) mask = resize_bilinear(mask, h, w).clamp(0.0, 1.0);
  return mask;
}

void FusionNetworkImpl::force_constant_logit(double logit) {
  torch::NoGradGuard no_grad;
  output_conv_->weight.zero_();
  output_conv_->bias.fill_(logit);
}

FusedFrame fuse_step(FusionNetwork& net, const Frame& bg, const Frame& fg, const Frame& prev) {
  check_frame(bg, "fuse_step");
  check_frame(fg, "fuse_step");
  check_frame(prev, "fuse_step");
  if (!bg.rgb.sizes().equals(fg.rgb.sizes()) || !bg.rgb.sizes().equals(prev.rgb.sizes())) {
    throw InvalidArgument("fuse_step: frame shapes differ");
  }
  torch::NoGradGuard no_grad;
  const auto mask = net->forward(bg.rgb.unsqueeze(0), fg.rgb.unsqueeze(0), prev.rgb.unsqueeze(0)).squeeze(0);
  return FusedFrame{composite(fg, bg, mask), mask.squeeze(0)};
}

FrameSequence fuse_sequence(FusionNetwork& net, const Frame& bg, const FrameSequence& fgs,
                            const torch::Tensor& bootstrap_mask) {
  if (fgs.size() < 2) throw InvalidArgument("fuse_sequence: need at least two frames");
  FrameSequence out;
  out.reserve(fgs.size());
  out.push_back(composite(fgs[0], bg, bootstrap_mask));
  for (size_t t = 1; t < fgs.size(); ++t) out.push_back(fuse_step(net, bg, fgs[t], out.back()).frame);
  return out;
}

FrameSequence overlay_sequence(const Frame& bg, const FrameSequence& fgs, const std::vector<torch::Tensor>& masks) {
  if (masks.size() != fgs.size()) throw InvalidArgument("overlay_sequence: one mask per frame required");
  FrameSequence out;
  out.reserve(fgs.size());
  for (size_t t = 0; t < fgs.size(); ++t) out.push_back(composite(fgs[t], bg, masks[t]));
  return out;
}

std::vector<torch::Tensor> unroll_clip(FusionNetwork& net, const FusionClip& clip, size_t begin, size_t length) {
  if (begin + length > clip.foregrounds.size() || clip.masks.size() != clip.foregrounds.size()) {
    throw InvalidArgument("unroll_clip: window outside clip");
  }
  const auto bg = clip.background.rgb.unsqueeze(0);
  std::vector<torch::Tensor> outputs;
  const auto first_mask = clip.masks[begin].to(torch::kFloat32).view({1, 1, bg.size(2), bg.size(3)});
  outputs.push_back(composite(clip.foregrounds[begin].rgb.unsqueeze(0), bg, first_mask));
  for (size_t t = begin + 1; t < begin + length; ++t) {
    const auto fg = clip.foregrounds[t].rgb.unsqueeze(0);
    const auto mask = net->forward(bg, fg, outputs.back());
    outputs.push_back(composite(fg, bg, mask));
  }
  return outputs;
}

FusionTrainResult train_fusion_stage(const std::vector<FusionClip>& clips, const FusionStageConfig& cfg,
                                     uint64_t seed, std::shared_ptr<const PerceptualExtractor> extractor) {
  if (clips.empty()) throw InvalidArgument("train_fusion_stage: empty dataset");
  if (cfg.clip_length < 2) throw InvalidArgument("train_fusion_stage: clip_length < 2");
  if (cfg.batch_size < 1) throw InvalidArgument("train_fusion_stage: batch size < 1");
  std::vector<size_t> usable;
  for (size_t i = 0; i < clips.size(); ++i) {
    const auto& c = clips[i];
    if (c.foregrounds.size() < 2 || c.targets.size() != c.foregrounds.size() || c.masks.size() != c.foregrounds.size()) {
      warn("train_fusion_stage: skipping clip " + std::to_string(i) + " (fewer than 2 aligned frames)");
      continue;
    }
    usable.push_back(i);
  }
  if (usable.empty()) throw InvalidArgument("train_fusion_stage: no clip with at least two frames");
  if (!extractor) extractor = make_extractor(cfg.perceptual);

  torch::manual_seed(seed);
  FusionTrainResult result;
  result.network = FusionNetwork(cfg.base_width, cfg.num_res_blocks, cfg.internal_scale);
  auto& net = result.network;
  net->train();
  auto optimizer = make_adam(net->parameters(), cfg.adam);
  EpochSampler sampler(usable.size(), seed);
  std::mt19937_64 window_rng(seed ^ 0x9e3779b97f4a7c15ULL);

  const size_t batch = static_cast<size_t>(cfg.batch_size);
  int64_t steps = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = sampler.next_epoch();
    for (size_t first = 0; first < order.size(); first += batch) {
      const size_t last = std::min(order.size(), first + batch);
      optimizer.zero_grad();
      auto loss = torch::zeros({});
      double l1_total = 0.0;
      for (size_t b = first; b < last; ++b) {
        const FusionClip& clip = clips[usable[order[b]]];
        const size_t length = std::min(clip.foregrounds.size(), static_cast<size_t>(cfg.clip_length));
        const size_t slack = clip.foregrounds.size() - length;
        const size_t begin = slack == 0 ? 0 : static_cast<size_t>(window_rng() % (slack + 1));
        const auto outputs = unroll_clip(net, clip, begin, length);
        auto l1_sum = torch::zeros({});
        for (size_t k = 1; k < outputs.size(); ++k) {
          const auto target = clip.targets[begin + k].rgb.unsqueeze(0);
          auto l1 = (outputs[k] - target).abs().mean();
          auto per = perceptual_loss(*extractor, outputs[k], target, cfg.perceptual_weights);
          loss = loss + cfg.weight_l1 * l1 + cfg.weight_per * per;
          l1_sum = l1_sum + l1.detach();
        }
        l1_total += l1_sum.item<double>() / static_cast<double>(outputs.size() - 1);
      }
      const double n = static_cast<double>(last - first);
      loss = loss / n;
      loss.backward();
      optimizer.step();
      result.step_loss.push_back(loss.item<double>());
      result.step_l1.push_back(l1_total / n);
      if (cfg.max_steps > 0 && ++steps >= cfg.max_steps) break;
    }
    if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
  }
  net->eval();
  return result;
}

torch::Tensor boundary_band(const torch::Tensor& mask, int radius) {
  auto m = mask.to(torch::kFloat32).gt(0.5).to(torch::kFloat32).view({1, 1, mask.size(0), mask.size(1)});
  const auto pool = F::MaxPool2dFuncOptions(2 * radius + 1).stride(1).padding(radius);
  auto dilated = F::max_pool2d(m, pool);
  auto eroded = 1.0 - F::max_pool2d(1.0 - m, pool);
  return (dilated - eroded).view({mask.size(0), mask.size(1)});
}

double band_l1(const Frame& a, const Frame& b, const torch::Tensor& band) {
  const double count = band.sum().item<double>();
  if (count == 0.0) return 0.0;
  return ((a.rgb - b.rgb).abs().mean(0) * band).sum().item<double>() / count;
}

}  // namespace cpf
