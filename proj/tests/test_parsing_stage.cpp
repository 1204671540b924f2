#include <gtest/gtest.h>

#include <cmath>

#include "cpf/errors.hpp"
#include "cpf/parsing_stage.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

namespace cpf {
namespace {

// Scalar-loop evaluation of the two sums.
std::pair<double, double> loop_oracle(const torch::Tensor& probs, const torch::Tensor& one_hot) {
  const auto p = probs.to(torch::kFloat64).contiguous();
  const auto t = one_hot.to(torch::kFloat64).contiguous();
  const double* pp = p.data_ptr<double>();
  const double* tp = t.data_ptr<double>();
  double l1 = 0.0, par = 0.0;
  for (int64_t i = 0; i < p.numel(); ++i) {
    l1 += std::abs(tp[i] - pp[i]);
    par -= tp[i] * std::log(std::max(pp[i], 1e-8));
  }
  return {l1, par};
}

TEST(ParsingLoss, UniformTwoByTwoTwoClasses) {
  const auto probs = torch::full({2, 2, 2}, 0.5);
  for (int pattern = 0; pattern < 16; ++pattern) {
    auto labels = torch::zeros({2, 2}, torch::kLong);
    for (int i = 0; i < 4; ++i) labels.view({-1})[i] = (pattern >> i) & 1;
    const ParsingMap target{labels, 2};
    const auto losses = parsing_losses(probs, target);
    EXPECT_NEAR(losses.l1, 4.0, 1e-6);
    EXPECT_NEAR(losses.par, 4.0 * std::log(2.0), 1e-6);
    const auto [l1, par] = loop_oracle(probs, target.one_hot());
    EXPECT_NEAR(losses.l1, l1, 1e-9);
    EXPECT_NEAR(losses.par, par, 1e-6);
  }
}

TEST(ParsingLoss, PerfectPredictionIsZero) {
  auto labels = torch::randint(0, 5, {6, 7}, torch::kLong);
  const ParsingMap target{labels, 5};
  const auto losses = parsing_losses(target.one_hot(), target);
  EXPECT_EQ(losses.l1, 0.0);
  EXPECT_EQ(losses.par, 0.0);
}

TEST(ParsingLoss, SaturatedWrongPixel) {
  auto probs = torch::zeros({2, 1, 1});
  probs[1][0][0] = 1.0;
  const ParsingMap target{torch::zeros({1, 1}, torch::kLong), 2};
  const auto losses = parsing_losses(probs, target);
  EXPECT_NEAR(losses.l1, 2.0, 1e-12);
  EXPECT_NEAR(losses.par, -std::log(1e-8), 1e-4);
}

TEST(ParsingLoss, ShapeMismatchThrows) {
  const ParsingMap target{torch::zeros({3, 3}, torch::kLong), 4};
  EXPECT_THROW(parsing_losses(torch::full({3, 3, 3}, 1.0 / 3), target), InvalidArgument);
}

TEST(ParsingLoss, GradientMatchesFiniteDifferences) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(42);
  const double h = 1e-4;
  for (int instance = 0; instance < 20; ++instance) {
    auto logits = torch::randn({3, 4, 4}, gen, torch::kFloat64);
    const auto labels = torch::randint(0, 3, {4, 4}, gen, torch::kLong);
    const auto one_hot = ParsingMap{labels, 3}.one_hot().to(torch::kFloat64);
    const auto loss_of = [&](const torch::Tensor& z) {
      auto [l1, par] = parsing_loss_terms(torch::softmax(z, 0), one_hot);
      return l1 + par;
    };
    auto z = logits.clone().requires_grad_(true);
    loss_of(z).backward();
    const auto analytic = z.grad().contiguous();
    auto flat = logits.view({-1});
    for (int64_t i = 0; i < flat.numel(); ++i) {
      auto plus = logits.clone();
      auto minus = logits.clone();
      plus.view({-1})[i] += h;
      minus.view({-1})[i] -= h;
      const double fd = (loss_of(plus).item<double>() - loss_of(minus).item<double>()) / (2.0 * h);
      const double a = analytic.view({-1})[i].item<double>();
      EXPECT_LE(std::abs(a - fd), 1e-3 * std::max(std::abs(a), std::abs(fd)) + 1e-9)
          << "instance " << instance << " element " << i << " analytic " << a << " fd " << fd;
    }
  }
}

TEST(ParsingLoss, TrainingLossUsesPerPixelMeans) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(7);
  const auto logits = torch::randn({2, 4, 5, 6}, gen);
  const auto labels = torch::randint(0, 4, {2, 5, 6}, gen, torch::kLong);
  const auto one_hot = torch::stack({ParsingMap{labels[0], 4}.one_hot(), ParsingMap{labels[1], 4}.one_hot()});
  ParsingStageConfig cfg;
  const double loss = parsing_training_loss(logits, one_hot, cfg).item<double>();
  const auto [l1, par] = loop_oracle(torch::softmax(logits, 1), one_hot);
  EXPECT_NEAR(loss, 10.0 * l1 / 60.0 + 10.0 * par / 60.0, 1e-4);
}

TEST(ParsingGenerator, ZeroOutputLayerGivesClassZero) {
  torch::manual_seed(1);
  ParsingGenerator gen(6, 8, 2);
  {
    torch::NoGradGuard ng;
    gen->output_conv()->weight.zero_();
    gen->output_conv()->bias.zero_();
  }
  const auto s = testing::puppet_parsing_sample(32, 2.0, 3);
  const ParsingMap app{s.appearance_parsing.labels.clamp(0, 5), 6};
  const auto out = generate_parsing(gen, app, s.source_pose);
  EXPECT_EQ(out.labels.abs().max().item<int64_t>(), 0);
}

TEST(ParsingGenerator, OutputShapeAndRange) {
  torch::manual_seed(2);
  ParsingGenerator gen(20, 8, 2);
  const auto s = testing::puppet_parsing_sample(32, 2.0, 4);
  const auto out = generate_parsing(gen, s.appearance_parsing, s.source_pose);
  EXPECT_EQ(out.height(), 32);
  EXPECT_EQ(out.width(), 32);
  EXPECT_GE(out.labels.min().item<int64_t>(), 0);
  EXPECT_LT(out.labels.max().item<int64_t>(), 20);
}

TEST(ParsingGenerator, ChannelMismatchThrows) {
  ParsingGenerator gen(20, 8, 1);
  const auto s = testing::puppet_parsing_sample(32, 2.0, 5);
  EXPECT_THROW(generate_parsing(gen, ParsingMap{s.appearance_parsing.labels, 19}, s.source_pose), InvalidArgument);
  EXPECT_THROW(generate_parsing(gen, s.appearance_parsing, s.source_pose.slice(0, 0, 30)), InvalidArgument);
}

TEST(ParsingGenerator, RelabelingEquivariance) {
  torch::manual_seed(3);
  const int c = 5;
  ParsingGenerator gen(c, 8, 2);
  auto gen_perm = ParsingGenerator(c, 8, 2);
  const std::vector<int64_t> perm = {3, 0, 4, 1, 2};
  {
    torch::NoGradGuard ng;
    auto src = gen->named_parameters();
    auto dst = gen_perm->named_parameters();
    for (const auto& item : src) dst[item.key()].copy_(item.value());
    // Input channel perm[k] of the permuted model reads what channel k read before.
    auto w = gen->input_conv()->weight;
    auto wp = gen_perm->input_conv()->weight;
    for (int k = 0; k < c; ++k) wp.select(1, perm[static_cast<size_t>(k)]).copy_(w.select(1, k));
  }
  auto gen_rng = at::make_generator<at::CPUGeneratorImpl>(9);
  const auto labels = torch::randint(0, c, {16, 16}, gen_rng, torch::kLong);
  const auto pose = torch::rand({kPoseMapChannels, 16, 16}, gen_rng);
  const auto one_hot = ParsingMap{labels, c}.one_hot();
  auto permuted = torch::zeros_like(one_hot);
  for (int k = 0; k < c; ++k) permuted[perm[static_cast<size_t>(k)]].copy_(one_hot[k]);
  torch::NoGradGuard ng;
  const auto a = parsing_logits(gen, one_hot.unsqueeze(0), pose.unsqueeze(0));
  const auto b = parsing_logits(gen_perm, permuted.unsqueeze(0), pose.unsqueeze(0));
  EXPECT_LE(testing::max_abs_diff(a, b), 1e-5);
}

ParsingStageConfig small_config() {
  ParsingStageConfig cfg;
  cfg.image_size = 32;
  cfg.base_width = 8;
  cfg.num_res_blocks = 1;
  cfg.epochs = 6;
  cfg.pose_sigma = 2.0;
  return cfg;
}

TEST(ParsingTraining, SameSeedGivesIdenticalCurves) {
  const std::vector<ParsingSample> data = {testing::puppet_parsing_sample(32, 2.0, 1),
                                           testing::puppet_parsing_sample(32, 2.0, 2)};
  const auto a = train_parsing_stage(data, small_config(), 11);
  const auto b = train_parsing_stage(data, small_config(), 11);
  ASSERT_EQ(a.step_loss.size(), 12u);
  EXPECT_EQ(a.step_loss, b.step_loss);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  const auto c = train_parsing_stage(data, small_config(), 12);
  EXPECT_NE(a.step_loss, c.step_loss);
}

TEST(ParsingTraining, ZeroLearningRateKeepsLossConstant) {
  auto cfg = small_config();
  cfg.adam.lr = 0.0;
  const auto r = train_parsing_stage({testing::puppet_parsing_sample(32, 2.0, 1)}, cfg, 5);
  for (double v : r.step_loss) EXPECT_EQ(v, r.step_loss.front());
}

TEST(ParsingTraining, EmptyDatasetThrows) {
  EXPECT_THROW(train_parsing_stage({}, small_config(), 0), InvalidArgument);
}

TEST(ParsingConfig, DefaultsAndJsonRoundTrip) {
  const ParsingStageConfig d;
  EXPECT_EQ(d.adam.lr, 2e-4);
  EXPECT_EQ(d.adam.beta1, 0.5);
  EXPECT_EQ(d.adam.beta2, 0.999);
  EXPECT_EQ(d.loss_weight_l1, 10.0);
  EXPECT_EQ(d.loss_weight_par, 10.0);
  EXPECT_EQ(d.epochs, 30);
  EXPECT_EQ(d.image_size, 448);
  EXPECT_EQ(d.num_res_blocks, 9);
  const auto back = nlohmann::json(small_config()).get<ParsingStageConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(small_config()));
}

}  // namespace
}  // namespace cpf
