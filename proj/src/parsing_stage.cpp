#include "cpf/parsing_stage.hpp"

#include "cpf/errors.hpp"

namespace cpf {

namespace nn = torch::nn;

void to_json(nlohmann::json& j, const ParsingStageConfig& c) {
  j = nlohmann::json{{"adam", c.adam},
                     {"loss_weight_l1", c.loss_weight_l1},
                     {"loss_weight_par", c.loss_weight_par},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"num_classes", c.num_classes},
                     {"image_size", c.image_size},
                     {"base_width", c.base_width},
                     {"num_res_blocks", c.num_res_blocks},
                     {"pose_sigma", c.pose_sigma},
                     {"max_steps", c.max_steps}};
}

void from_json(const nlohmann::json& j, ParsingStageConfig& c) {
  if (j.contains("adam")) j.at("adam").get_to(c.adam);
  c.loss_weight_l1 = j.value("loss_weight_l1", c.loss_weight_l1);
  c.loss_weight_par = j.value("loss_weight_par", c.loss_weight_par);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.image_size = j.value("image_size", c.image_size);
  c.base_width = j.value("base_width", c.base_width);
  c.num_res_blocks = j.value("num_res_blocks", c.num_res_blocks);
  c.pose_sigma = j.value("pose_sigma", c.pose_sigma);
  c.max_steps = j.value("max_steps", c.max_steps);
  if (c.loss_weight_l1 < 0 || c.loss_weight_par < 0) throw InvalidArgument("parsing config: negative loss weight");
  if (!(c.adam.lr >= 0)) throw InvalidArgument("parsing config: negative learning rate");
}

ParsingGeneratorImpl::ParsingGeneratorImpl(int num_classes, int64_t base_width, int num_res_blocks)
    : num_classes_(num_classes) {
  if (num_classes < 1) throw InvalidArgument("ParsingGenerator: num_classes < 1");
  const int64_t w = base_width;
  input_conv_ = nn::Conv2d(nn::Conv2dOptions(in_channels(), w, 7));
  output_conv_ = nn::Conv2d(nn::Conv2dOptions(w, num_classes, 7));
  body_ = nn::Sequential();
  body_->push_back(nn::ReflectionPad2d(3));
  body_->push_back(input_conv_);
  body_->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(w).affine(true)));
  body_->push_back(nn::ReLU());
  body_->push_back(conv_norm_act(w, 2 * w, 3, 2));
  body_->push_back(conv_norm_act(2 * w, 4 * w, 3, 2));
  for (int i = 0; i < num_res_blocks; ++i) body_->push_back(ResidualBlock(4 * w));
  body_->push_back(up_norm_act(4 * w, 2 * w));
  body_->push_back(up_norm_act(2 * w, w));
  body_->push_back(nn::ReflectionPad2d(3));
  body_->push_back(output_conv_);
  register_module("body", body_);
}

torch::Tensor ParsingGeneratorImpl::forward(const torch::Tensor& input) {
  if (input.dim() != 4 || input.size(1) != in_channels()) {
    throw InvalidArgument("ParsingGenerator: expected [B, " + std::to_string(in_channels()) + ", H, W] input");
  }
  if (input.size(2) % kStride != 0 || input.size(3) % kStride != 0) {
    throw InvalidArgument("ParsingGenerator: H and W must be multiples of 4");
  }
  return body_->forward(input);
}

torch::Tensor parsing_logits(ParsingGenerator& gen, const torch::Tensor& appearance_one_hot,
                             const torch::Tensor& pose_map) {
  if (appearance_one_hot.size(1) != gen->num_classes()) {
    throw InvalidArgument("generate_parsing: appearance parsing has " + std::to_string(appearance_one_hot.size(1)) +
                          " classes, generator expects " + std::to_string(gen->num_classes()));
  }
  if (pose_map.size(1) != kPoseMapChannels) throw InvalidArgument("generate_parsing: pose map channel mismatch");
  if (appearance_one_hot.size(2) != pose_map.size(2) || appearance_one_hot.size(3) != pose_map.size(3)) {
    throw InvalidArgument("generate_parsing: parsing and pose resolutions differ");
  }
  return gen->forward(torch::cat({appearance_one_hot, pose_map}, 1));
}

ParsingMap generate_parsing(ParsingGenerator& gen, const ParsingMap& appearance_parsing,
                            const torch::Tensor& source_pose) {
  check_parsing(appearance_parsing, "generate_parsing");
  if (source_pose.dim() != 3) throw InvalidArgument("generate_parsing: pose map must be [P, H, W]");
  torch::NoGradGuard no_grad;
  const auto logits =
      parsing_logits(gen, appearance_parsing.one_hot().unsqueeze(0), source_pose.unsqueeze(0));
  // argmax of softmax == argmax of logits; ties resolve to the lowest class.
  return ParsingMap{logits.argmax(1).squeeze(0).contiguous(), gen->num_classes()};
}

std::pair<torch::Tensor, torch::Tensor> parsing_loss_terms(const torch::Tensor& pred_probs,
                                                           const torch::Tensor& target_one_hot) {
  if (!pred_probs.sizes().equals(target_one_hot.sizes())) {
    throw InvalidArgument("parsing_losses: prediction and target shapes differ");
  }
  auto l1 = (target_one_hot - pred_probs).abs().sum();
  auto par = -(target_one_hot * pred_probs.clamp(kProbabilityFloor, 1.0).log()).sum();
  return {l1, par};
}

ParsingLosses parsing_losses(const torch::Tensor& pred_probs, const ParsingMap& target) {
  check_parsing(target, "parsing_losses");
  auto one_hot = target.one_hot().to(pred_probs.scalar_type());
  if (pred_probs.dim() == 4) {
    if (pred_probs.size(0) != 1) throw InvalidArgument("parsing_losses: batched prediction needs a batched target");
    one_hot = one_hot.unsqueeze(0);
  }
  auto [l1, par] = parsing_loss_terms(pred_probs, one_hot);
  return {l1.item<double>(), par.item<double>()};
}

torch::Tensor parsing_training_loss(const torch::Tensor& logits, const torch::Tensor& target_one_hot,
                                    const ParsingStageConfig& cfg) {
  const auto probs = torch::softmax(logits, 1);
  const double pixels = static_cast<double>(logits.size(2) * logits.size(3));
  const double batch = static_cast<double>(logits.size(0));
  auto [l1, par] = parsing_loss_terms(probs, target_one_hot);
  return cfg.loss_weight_l1 * l1 / (pixels * batch) + cfg.loss_weight_par * par / (pixels * batch);
}

ParsingTrainResult train_parsing_stage(const std::vector<ParsingSample>& dataset, const ParsingStageConfig& cfg,
                                       uint64_t seed) {
  if (dataset.empty()) throw InvalidArgument("train_parsing_stage: empty dataset");
  if (cfg.batch_size < 1) throw InvalidArgument("train_parsing_stage: batch size < 1");
  torch::manual_seed(seed);
  ParsingTrainResult result;
  result.generator = ParsingGenerator(cfg.num_classes, cfg.base_width, cfg.num_res_blocks);
  auto& gen = result.generator;
  gen->train();
  auto optimizer = make_adam(gen->parameters(), cfg.adam);
  EpochSampler sampler(dataset.size(), seed);

  int64_t steps = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = sampler.next_epoch();
    double epoch_sum = 0.0;
    int epoch_steps = 0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      std::vector<torch::Tensor> appearance, pose, target;
      for (size_t k = begin; k < end; ++k) {
        const ParsingSample& s = dataset[order[k]];
        if (s.appearance_parsing.num_classes != cfg.num_classes || s.target_parsing.num_classes != cfg.num_classes) {
          throw InvalidArgument("train_parsing_stage: sample class count differs from config");
        }
        appearance.push_back(s.appearance_parsing.one_hot());
        pose.push_back(s.source_pose);
        target.push_back(s.target_parsing.one_hot());
      }
      optimizer.zero_grad();
      auto logits = parsing_logits(gen, stack_batch(appearance), stack_batch(pose));
      auto loss = parsing_training_loss(logits, stack_batch(target), cfg);
      loss.backward();
      optimizer.step();
      const double value = loss.item<double>();
      result.step_loss.push_back(value);
      epoch_sum += value;
      ++epoch_steps;
      if (cfg.max_steps > 0 && ++steps >= cfg.max_steps) break;
    }
    result.epoch_loss.push_back(epoch_sum / std::max(epoch_steps, 1));
    if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
  }
  gen->eval();
  return result;
}

}  // namespace cpf
