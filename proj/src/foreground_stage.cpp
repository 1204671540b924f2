#include "cpf/foreground_stage.hpp"

#include "cpf/errors.hpp"
#include "cpf/flow_stage.hpp"
#include "cpf/region_ops.hpp"

namespace cpf {

namespace nn = torch::nn;

void to_json(nlohmann::json& j, const ForegroundStageConfig& c) {
  j = nlohmann::json{{"gen_adam", c.gen_adam},
                     {"disc_adam", c.disc_adam},
                     {"lambda_adv", c.lambda_adv},
                     {"lambda_l1", c.lambda_l1},
                     {"lambda_per", c.lambda_per},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"num_classes", c.num_classes},
                     {"image_size", c.image_size},
                     {"base_width", c.base_width},
                     {"levels", c.levels},
                     {"disc_base_width", c.disc_base_width},
                     {"disc_layers", c.disc_layers},
                     {"perceptual_weights", c.perceptual_weights},
                     {"perceptual", c.perceptual},
                     {"no_flow", c.no_flow},
                     {"max_steps", c.max_steps}};
}

void from_json(const nlohmann::json& j, ForegroundStageConfig& c) {
  if (j.contains("gen_adam")) j.at("gen_adam").get_to(c.gen_adam);
  if (j.contains("disc_adam")) j.at("disc_adam").get_to(c.disc_adam);
  c.lambda_adv = j.value("lambda_adv", c.lambda_adv);
  c.lambda_l1 = j.value("lambda_l1", c.lambda_l1);
  c.lambda_per = j.value("lambda_per", c.lambda_per);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.image_size = j.value("image_size", c.image_size);
  c.base_width = j.value("base_width", c.base_width);
  c.levels = j.value("levels", c.levels);
  c.disc_base_width = j.value("disc_base_width", c.disc_base_width);
  c.disc_layers = j.value("disc_layers", c.disc_layers);
  c.perceptual_weights = j.value("perceptual_weights", c.perceptual_weights);
  c.perceptual = j.value("perceptual", c.perceptual);
  c.no_flow = j.value("no_flow", c.no_flow);
  c.max_steps = j.value("max_steps", c.max_steps);
  if (c.lambda_adv < 0 || c.lambda_l1 < 0 || c.lambda_per < 0) throw InvalidArgument("foreground config: negative loss weight");
  if (c.levels < 1) throw InvalidArgument("foreground config: levels < 1");
}

WarpBlockImpl::WarpBlockImpl(int64_t channels) {
  conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(2 * channels, channels, 3).padding(1)));
  conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1)));
}

torch::Tensor WarpBlockImpl::forward(const torch::Tensor& feat, const torch::Tensor& flow, const torch::Tensor& vis) {
  const auto warped = warp_by_flow(feat, flow);
  const auto visible = vis.eq(kVisible).unsqueeze(1).to(feat.scalar_type());
  const auto invisible = vis.eq(kInvisible).unsqueeze(1).to(feat.scalar_type());
  auto parts = torch::cat({warped * visible, warped * invisible}, 1);
  return warped + conv2_->forward(torch::relu(conv1_->forward(parts)));
}

void WarpBlockImpl::reset_to_identity() {
  torch::NoGradGuard no_grad;
  conv2_->weight.zero_();
  conv2_->bias.zero_();
}

torch::Tensor downsample_visibility(const torch::Tensor& vis, int64_t height, int64_t width) {
  return resize_nearest(vis, height, width);
}

DualPathGeneratorImpl::DualPathGeneratorImpl(int num_classes, int64_t base_width, int levels)
    : num_classes_(num_classes), levels_(levels) {
  if (levels < 1) throw InvalidArgument("DualPathGenerator: levels < 1");
  std::vector<int64_t> widths;
  for (int i = 0; i < levels; ++i) widths.push_back(base_width * std::min<int64_t>(int64_t{1} << i, 8));
  for (int i = 0; i < levels; ++i) {
    const auto tag = std::to_string(i);
    const int64_t stride = i == 0 ? 1 : 2;
    parsing_encoder_.push_back(register_module(
        "parsing_enc" + tag, conv_norm_act(i == 0 ? num_classes : widths[i - 1], widths[i], 3, stride, true)));
    appearance_encoder_.push_back(register_module(
        "appearance_enc" + tag, conv_norm_act(i == 0 ? 3 : widths[i - 1], widths[i], 3, stride, true)));
    warp_blocks_.push_back(register_module("warp" + tag, WarpBlock(widths[i])));
  }
  const auto deepest = widths.back();
  bottom_ = register_module("bottom", conv_norm_act(2 * deepest, deepest, 3, 1));
  for (int i = levels - 2; i >= 0; --i) {
    const auto tag = std::to_string(i);
    upsamplers_.push_back(register_module(
        "up" + tag, nn::Sequential(nn::Upsample(nn::UpsampleOptions()
                                                    .scale_factor(std::vector<double>{2.0, 2.0})
                                                    .mode(torch::kBilinear)
                                                    .align_corners(false)),
                                   conv_norm_act(widths[i + 1], widths[i], 3, 1))));
    decoders_.push_back(register_module("dec" + tag, conv_norm_act(3 * widths[i], widths[i], 3, 1)));
  }
  output_ = register_module("output", nn::Conv2d(nn::Conv2dOptions(widths[0], 3, 3).padding(1)));
}

torch::Tensor DualPathGeneratorImpl::forward(const torch::Tensor& parsing_one_hot, const torch::Tensor& appearance,
                                             const torch::Tensor& flow, const torch::Tensor& vis) {
  if (parsing_one_hot.dim() != 4 || parsing_one_hot.size(1) != num_classes_) {
    throw InvalidArgument("DualPathGenerator: parsing must be [B, " + std::to_string(num_classes_) + ", H, W]");
  }
  const int64_t h = parsing_one_hot.size(2);
  const int64_t w = parsing_one_hot.size(3);
  const auto same_hw = [&](const torch::Tensor& t, int64_t hd, int64_t wd) {
    return t.size(hd) == h && t.size(wd) == w;
  };
  if (appearance.dim() != 4 || appearance.size(1) != 3 || !same_hw(appearance, 2, 3) || flow.dim() != 4 ||
      !same_hw(flow, 2, 3) || vis.dim() != 3 || !same_hw(vis, 1, 2)) {
    throw InvalidArgument("DualPathGenerator: appearance, flow and visibility must match the parsing resolution");
  }
  if (h % stride() != 0 || w % stride() != 0) {
    throw InvalidArgument("DualPathGenerator: H and W must be multiples of " + std::to_string(stride()));
  }
  std::vector<torch::Tensor> parsing_feats, warped_feats;
  auto p = parsing_one_hot;
  auto a = appearance;
  for (int i = 0; i < levels_; ++i) {
    p = parsing_encoder_[static_cast<size_t>(i)]->forward(p);
    a = appearance_encoder_[static_cast<size_t>(i)]->forward(a);
    const double factor = 1.0 / static_cast<double>(int64_t{1} << i);
    const auto level_flow = rescale_flow(flow, factor);
    const auto level_vis = downsample_visibility(vis, a.size(2), a.size(3));
    parsing_feats.push_back(p);
    warped_feats.push_back(warp_blocks_[static_cast<size_t>(i)]->forward(a, level_flow, level_vis));
  }
  auto x = bottom_->forward(torch::cat({parsing_feats.back(), warped_feats.back()}, 1));
  for (size_t k = 0; k < upsamplers_.size(); ++k) {
    const size_t level = parsing_feats.size() - 2 - k;
    x = upsamplers_[k]->forward(x);
    x = decoders_[k]->forward(torch::cat({x, parsing_feats[level], warped_feats[level]}, 1));
  }
  return torch::sigmoid(output_->forward(x));
}

Frame generate_foreground(DualPathGenerator& gen, const Frame& appearance_fg, const ParsingMap& target_parsing,
                          const FlowField& flow, const VisibilityMap& vis) {
  check_frame(appearance_fg, "generate_foreground");
  check_parsing(target_parsing, "generate_foreground");
  const int64_t h = target_parsing.height();
  const int64_t w = target_parsing.width();
  if (appearance_fg.height() != h || appearance_fg.width() != w || flow.height() != h || flow.width() != w ||
      vis.labels.size(0) != h || vis.labels.size(1) != w) {
    throw InvalidArgument("generate_foreground: inputs must share the working resolution");
  }
  if (target_parsing.num_classes != gen->num_classes()) {
    throw InvalidArgument("generate_foreground: parsing class count differs from the generator");
  }
  torch::NoGradGuard no_grad;
  auto out = gen->forward(target_parsing.one_hot().unsqueeze(0), appearance_fg.rgb.unsqueeze(0),
                          flow.flow.unsqueeze(0), vis.labels.unsqueeze(0));
  return Frame{out.squeeze(0).contiguous()};
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int64_t in_channels, int64_t base_width, int layers) {
  if (layers < 1) throw InvalidArgument("PatchDiscriminator: layers < 1");
  body_ = nn::Sequential();
  const auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
  body_->push_back(nn::Conv2d(nn::Conv2dOptions(in_channels, base_width, 4).stride(2).padding(1)));
  body_->push_back(lrelu());
  int64_t width = base_width;
  for (int i = 1; i <= layers; ++i) {
    const int64_t next = base_width * std::min<int64_t>(int64_t{1} << i, 8);
    const int64_t stride = i < layers ? 2 : 1;
    body_->push_back(nn::Conv2d(nn::Conv2dOptions(width, next, 4).stride(stride).padding(1)));
    body_->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(next).affine(true)));
    body_->push_back(lrelu());
    width = next;
  }
  body_->push_back(nn::Conv2d(nn::Conv2dOptions(width, 1, 4).stride(1).padding(1)));
  body_->push_back(nn::Sigmoid());
  register_module("body", body_);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& input) { return body_->forward(input); }

std::pair<torch::Tensor, torch::Tensor> adversarial_losses(const torch::Tensor& real_scores,
                                                           const torch::Tensor& fake_scores) {
  auto d_loss = -real_scores.clamp(kLogFloor, 1.0).log().mean() - (1.0 - fake_scores).clamp(kLogFloor, 1.0).log().mean();
  auto g_loss = -fake_scores.clamp(kLogFloor, 1.0).log().mean();
  return {d_loss, g_loss};
}

namespace {

torch::Tensor conditioned(const ConditionedImage& c) {
  if (c.appearance.size(0) != c.foreground.size(0) || c.parsing_one_hot.size(0) != c.foreground.size(0)) {
    throw InvalidArgument("discriminator input: batch sizes differ");
  }
  return torch::cat({c.appearance, c.parsing_one_hot, c.foreground}, 1);
}

}  // namespace

std::pair<torch::Tensor, torch::Tensor> adversarial_losses(PatchDiscriminator& disc, const ConditionedImage& real,
                                                           const ConditionedImage& fake) {
  return adversarial_losses(disc->forward(conditioned(real)), disc->forward(conditioned(fake)));
}

ForegroundTrainResult train_foreground_stage(const std::vector<ForegroundSample>& dataset,
                                             const ForegroundStageConfig& cfg, uint64_t seed,
                                             std::shared_ptr<const PerceptualExtractor> extractor) {
  if (dataset.empty()) throw InvalidArgument("train_foreground_stage: empty dataset");
  if (cfg.batch_size < 1) throw InvalidArgument("train_foreground_stage: batch size < 1");
  if (!extractor) extractor = make_extractor(cfg.perceptual);
  torch::manual_seed(seed);
  ForegroundTrainResult result;
  result.generator = DualPathGenerator(cfg.num_classes, cfg.base_width, cfg.levels);
  result.discriminator = PatchDiscriminator(3 + cfg.num_classes + 3, cfg.disc_base_width, cfg.disc_layers);
  auto& gen = result.generator;
  auto& disc = result.discriminator;
  gen->train();
  disc->train();
  auto g_opt = make_adam(gen->parameters(), cfg.gen_adam);
  auto d_opt = make_adam(disc->parameters(), cfg.disc_adam);
  EpochSampler sampler(dataset.size(), seed);

  int64_t steps = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = sampler.next_epoch();
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      std::vector<torch::Tensor> appearance, parsing, flow, vis, target;
      for (size_t k = begin; k < end; ++k) {
        const ForegroundSample& s = dataset[order[k]];
        if (s.target_parsing.num_classes != cfg.num_classes) {
          throw InvalidArgument("train_foreground_stage: sample class count differs from config");
        }
        appearance.push_back(s.appearance_fg.rgb);
        parsing.push_back(s.target_parsing.one_hot());
        target.push_back(s.target_fg.rgb);
        if (cfg.no_flow) {
          flow.push_back(torch::zeros({2, s.target_parsing.height(), s.target_parsing.width()}));
          vis.push_back(VisibilityMap::all_visible(s.target_parsing.height(), s.target_parsing.width()).labels);
        } else {
          flow.push_back(s.flow.flow);
          vis.push_back(s.visibility.labels);
        }
      }
      const auto a = stack_batch(appearance);
      const auto p = stack_batch(parsing);
      const auto real = stack_batch(target);
      auto fake = gen->forward(p, a, stack_batch(flow), stack_batch(vis));

      d_opt.zero_grad();
      auto [d_loss, unused] = adversarial_losses(disc, {a, p, real}, {a, p, fake.detach()});
      d_loss.backward();
      d_opt.step();

      g_opt.zero_grad();
      auto g_adv = -disc->forward(torch::cat({a, p, fake}, 1)).clamp(kLogFloor, 1.0).log().mean();
      auto l1 = (fake - real).abs().mean();
      auto per = perceptual_loss(*extractor, fake, real, cfg.perceptual_weights);
      auto total = cfg.lambda_adv * g_adv + cfg.lambda_l1 * l1 + cfg.lambda_per * per;
      total.backward();
      g_opt.step();

      result.curves.d_loss.push_back(d_loss.item<double>());
      result.curves.g_adv.push_back(g_adv.item<double>());
      result.curves.l1.push_back(l1.item<double>());
      result.curves.perceptual.push_back(per.item<double>());
      result.curves.total.push_back(total.item<double>());
      if (cfg.max_steps > 0 && ++steps >= cfg.max_steps) break;
    }
    if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
  }
  gen->eval();
  disc->eval();
  return result;
}

}  // namespace cpf
