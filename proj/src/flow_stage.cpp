#include "cpf/flow_stage.hpp"

#include <bit>
#include <cmath>
#include <fstream>

#include "cpf/errors.hpp"

namespace cpf {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

torch::Tensor warp_by_flow(const torch::Tensor& feat, const torch::Tensor& flow, double fill) {
  const bool batched = feat.dim() == 4;
  auto x = batched ? feat : feat.unsqueeze(0);
  auto f = flow.dim() == 4 ? flow : flow.unsqueeze(0);
  if (x.dim() != 4 || f.dim() != 4 || f.size(1) != 2) throw InvalidArgument("warp_by_flow: bad tensor ranks");
  if (f.size(0) != x.size(0) || f.size(2) != x.size(2) || f.size(3) != x.size(3)) {
    throw InvalidArgument("warp_by_flow: flow and feature shapes differ");
  }
  const int64_t n = x.size(0);
  const int64_t c = x.size(1);
  const int64_t h = x.size(2);
  const int64_t w = x.size(3);

  const auto opts = f.options();
  const auto px = torch::arange(w, opts).view({1, 1, w}) + f.select(1, 0);
  const auto py = torch::arange(h, opts).view({1, h, 1}) + f.select(1, 1);
  const auto x0 = px.floor();
  const auto y0 = py.floor();
  const auto wx = (px - x0).to(x.scalar_type()).unsqueeze(1);
  const auto wy = (py - y0).to(x.scalar_type()).unsqueeze(1);
  const auto flat = x.reshape({n, c, h * w});
  const auto fill_value = torch::scalar_tensor(fill, x.options());
  // Out-of-range taps read `fill`.
  const auto tap = [&](const torch::Tensor& tx, const torch::Tensor& ty) {
    const auto inside = (tx.ge(0) & tx.le(w - 1) & ty.ge(0) & ty.le(h - 1)).unsqueeze(1);
    const auto index = (ty.clamp(0, h - 1) * w + tx.clamp(0, w - 1)).to(torch::kLong).view({n, 1, h * w});
    const auto values = flat.gather(2, index.expand({n, c, h * w})).view({n, c, h, w});
    return torch::where(inside, values, fill_value);
  };
  const auto out = (1 - wy) * ((1 - wx) * tap(x0, y0) + wx * tap(x0 + 1, y0)) +
                   wy * ((1 - wx) * tap(x0, y0 + 1) + wx * tap(x0 + 1, y0 + 1));
  return batched ? out : out.squeeze(0);
}

torch::Tensor rescale_flow(const torch::Tensor& flow, double factor) {
  if (!(factor > 0.0) || !std::isfinite(factor)) throw InvalidArgument("rescale_flow: factor must be positive");
  const bool batched = flow.dim() == 4;
  auto f = batched ? flow : flow.unsqueeze(0);
  if (f.dim() != 4 || f.size(1) != 2) throw InvalidArgument("rescale_flow: expected [B, 2, H, W] or [2, H, W]");
  const auto h = std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(f.size(2)) * factor)));
  const auto w = std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(f.size(3)) * factor)));
  torch::Tensor out = f;
  if (h != f.size(2) || w != f.size(3)) {
    out = F::interpolate(f, F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{h, w})
                                .mode(torch::kBilinear)
                                .align_corners(false));
  }
  if (factor != 1.0) out = out * factor;
  return batched ? out : out.squeeze(0);
}

FlowField rescale_flow(const FlowField& flow, double factor) { return FlowField{rescale_flow(flow.flow, factor)}; }

std::pair<torch::Tensor, torch::Tensor> flow_loss_terms(const torch::Tensor& pred_flow, const torch::Tensor& vis_logits,
                                                        const torch::Tensor& gt_flow, const torch::Tensor& gt_vis) {
  if (pred_flow.dim() != 4 || !pred_flow.sizes().equals(gt_flow.sizes()) || pred_flow.size(1) != 2) {
    throw InvalidArgument("flow_losses: flow shapes differ");
  }
  if (vis_logits.dim() != 4 || vis_logits.size(1) != 3 || gt_vis.dim() != 3 || vis_logits.size(0) != gt_vis.size(0) ||
      vis_logits.size(2) != gt_vis.size(1) || vis_logits.size(3) != gt_vis.size(2) ||
      pred_flow.size(2) != gt_vis.size(1) || pred_flow.size(3) != gt_vis.size(2)) {
    throw InvalidArgument("flow_losses: visibility shapes differ");
  }
  const auto mask = gt_vis.eq(kVisible).to(pred_flow.scalar_type());
  const auto norm = at::linalg_vector_norm(pred_flow - gt_flow, 2, {1}, false, std::nullopt);
  const auto count = mask.sum();
  auto epe = (norm * mask).sum() / count.clamp_min(1.0);
  auto ce = F::cross_entropy(vis_logits, gt_vis);
  return {epe, ce};
}

FlowLosses flow_losses(const FlowField& pred_flow, const torch::Tensor& vis_logits, const FlowField& gt_flow,
                       const VisibilityMap& gt_vis) {
  auto [epe, ce] = flow_loss_terms(pred_flow.flow.unsqueeze(0), vis_logits.unsqueeze(0), gt_flow.flow.unsqueeze(0),
                                   gt_vis.labels.unsqueeze(0));
  return {epe.item<double>(), ce.item<double>()};
}

void to_json(nlohmann::json& j, const FlowStageConfig& c) {
  j = nlohmann::json{{"adam", c.adam},         {"epe_weight", c.epe_weight}, {"ce_weight", c.ce_weight},
                     {"epochs", c.epochs},     {"batch_size", c.batch_size}, {"image_size", c.image_size},
                     {"base_width", c.base_width}, {"depth", c.depth},      {"pose_sigma", c.pose_sigma},
                     {"max_steps", c.max_steps}};
}

void from_json(const nlohmann::json& j, FlowStageConfig& c) {
  if (j.contains("adam")) j.at("adam").get_to(c.adam);
  c.epe_weight = j.value("epe_weight", c.epe_weight);
  c.ce_weight = j.value("ce_weight", c.ce_weight);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.image_size = j.value("image_size", c.image_size);
  c.base_width = j.value("base_width", c.base_width);
  c.depth = j.value("depth", c.depth);
  c.pose_sigma = j.value("pose_sigma", c.pose_sigma);
  c.max_steps = j.value("max_steps", c.max_steps);
  if (c.depth < 1) throw InvalidArgument("flow config: depth < 1");
}

namespace {

nn::Sequential double_conv(int64_t in, int64_t out) {
  return nn::Sequential(conv_norm_act(in, out, 3, 1, true), conv_norm_act(out, out, 3, 1, true));
}

}  // namespace

FlowRegressorImpl::FlowRegressorImpl(int64_t base_width, int depth) : depth_(depth) {
  if (depth < 1) throw InvalidArgument("FlowRegressor: depth < 1");
  std::vector<int64_t> widths;
  for (int i = 0; i < depth; ++i) widths.push_back(base_width * std::min<int64_t>(int64_t{1} << i, 8));
  for (int i = 0; i < depth; ++i) {
    nn::Sequential enc;
    if (i == 0) {
      enc = double_conv(kInChannels, widths[0]);
    } else {
      enc = nn::Sequential(conv_norm_act(widths[i - 1], widths[i], 3, 2, true),
                           conv_norm_act(widths[i], widths[i], 3, 1, true));
    }
    encoders_.push_back(register_module("enc" + std::to_string(i), enc));
  }
  for (int i = depth - 2; i >= 0; --i) {
    auto up = nn::Sequential(nn::Upsample(nn::UpsampleOptions()
                                              .scale_factor(std::vector<double>{2.0, 2.0})
                                              .mode(torch::kBilinear)
                                              .align_corners(false)),
                             conv_norm_act(widths[i + 1], widths[i], 3, 1, true));
    upsamplers_.push_back(register_module("up" + std::to_string(i), up));
    decoders_.push_back(register_module("dec" + std::to_string(i), double_conv(2 * widths[i], widths[i])));
  }
  flow_head_ = register_module("flow_head", nn::Conv2d(nn::Conv2dOptions(widths[0], 2, 3).padding(1)));
  vis_head_ = register_module("vis_head", nn::Conv2d(nn::Conv2dOptions(widths[0], 3, 3).padding(1)));
}

std::pair<torch::Tensor, torch::Tensor> FlowRegressorImpl::forward(const torch::Tensor& input) {
  if (input.dim() != 4 || input.size(1) != kInChannels) {
    throw InvalidArgument("FlowRegressor: expected [B, " + std::to_string(kInChannels) + ", H, W] input");
  }
  if (input.size(2) % stride() != 0 || input.size(3) % stride() != 0) {
    throw InvalidArgument("FlowRegressor: H and W must be multiples of " + std::to_string(stride()));
  }
  std::vector<torch::Tensor> skips;
  auto x = input;
  for (auto& enc : encoders_) {
    x = enc->forward(x);
    skips.push_back(x);
  }
  for (size_t k = 0; k < upsamplers_.size(); ++k) {
    const size_t level = skips.size() - 2 - k;
    x = upsamplers_[k]->forward(x);
    x = decoders_[k]->forward(torch::cat({x, skips[level]}, 1));
  }
  return {flow_head_->forward(x), vis_head_->forward(x)};
}

FlowPrediction predict_flow(FlowRegressor& regressor, const torch::Tensor& appearance_pose,
                            const torch::Tensor& target_pose) {
  if (appearance_pose.dim() != 3 || !appearance_pose.sizes().equals(target_pose.sizes())) {
    throw InvalidArgument("predict_flow: pose maps must share a [P, H, W] shape");
  }
  torch::NoGradGuard no_grad;
  auto [flow, logits] = regressor->forward(torch::cat({appearance_pose, target_pose}, 0).unsqueeze(0));
  logits = logits.squeeze(0);
  return FlowPrediction{FlowField{flow.squeeze(0).contiguous()}, VisibilityMap{logits.argmax(0).contiguous()},
                        logits.contiguous()};
}

FlowTrainResult train_flow_stage(const std::vector<FlowSample>& dataset, const FlowStageConfig& cfg, uint64_t seed) {
  if (dataset.empty()) throw InvalidArgument("train_flow_stage: empty dataset");
  if (cfg.batch_size < 1) throw InvalidArgument("train_flow_stage: batch size < 1");
  torch::manual_seed(seed);
  FlowTrainResult result;
  result.regressor = FlowRegressor(cfg.base_width, cfg.depth);
  auto& reg = result.regressor;
  reg->train();
  auto optimizer = make_adam(reg->parameters(), cfg.adam);
  EpochSampler sampler(dataset.size(), seed);
  int64_t steps = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = sampler.next_epoch();
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      std::vector<torch::Tensor> inputs, flows, vis;
      for (size_t k = begin; k < end; ++k) {
        const FlowSample& s = dataset[order[k]];
        inputs.push_back(torch::cat({s.appearance_pose, s.target_pose}, 0));
        flows.push_back(s.flow.flow);
        vis.push_back(s.visibility.labels);
      }
      optimizer.zero_grad();
      auto [flow, logits] = reg->forward(stack_batch(inputs));
      auto [epe, ce] = flow_loss_terms(flow, logits, stack_batch(flows), stack_batch(vis));
      auto loss = cfg.epe_weight * epe + cfg.ce_weight * ce;
      loss.backward();
      optimizer.step();
      result.step_loss.push_back(loss.item<double>());
      result.step_epe.push_back(epe.item<double>());
      result.step_ce.push_back(ce.item<double>());
      if (cfg.max_steps > 0 && ++steps >= cfg.max_steps) break;
    }
    if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
  }
  reg->eval();
  return result;
}

void write_flo(const FlowField& flow, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto w = static_cast<int32_t>(flow.width());
  const auto h = static_cast<int32_t>(flow.height());
  out.write(reinterpret_cast<const char*>(&kFloMagic), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  auto hwc = flow.flow.detach().to(torch::kFloat32).permute({1, 2, 0}).contiguous();
  out.write(reinterpret_cast<const char*>(hwc.data_ptr<float>()), static_cast<std::streamsize>(hwc.numel() * 4));
}

FlowField read_flo(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  float magic = 0;
  int32_t w = 0, h = 0;
  in.read(reinterpret_cast<char*>(&magic), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  if (!in || magic != kFloMagic) throw InvalidArgument(path.string() + ": not a .flo file");
  if (w <= 0 || h <= 0) throw InvalidArgument(path.string() + ": bad dimensions");
  auto hwc = torch::empty({h, w, 2}, torch::kFloat32);
  if (!in.read(reinterpret_cast<char*>(hwc.data_ptr<float>()), static_cast<std::streamsize>(hwc.numel() * 4))) {
    throw std::runtime_error(path.string() + ": truncated flow data");
  }
  return FlowField{hwc.permute({2, 0, 1}).contiguous()};
}

}  // namespace cpf
