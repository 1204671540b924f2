#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>

#include "cpf/checkpoint.hpp"
#include "cpf/errors.hpp"
#include "cpf/fvd.hpp"
#include "test_util.hpp"

namespace cpf {
namespace {

GaussianStats stats(Eigen::VectorXd mean, Eigen::MatrixXd cov) { return GaussianStats{std::move(mean), std::move(cov), 10}; }

Eigen::MatrixXd random_spd(int d, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = n(rng);
  return a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

Eigen::VectorXd random_vec(int d, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v(i) = n(rng);
  return v;
}

// Closed-form square root of a symmetric PSD matrix through its eigenbasis.
Eigen::MatrixXd oracle_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

TEST(Frechet, IdenticalIsZero) {
  const auto s = stats(random_vec(6, 1), random_spd(6, 2));
  EXPECT_NEAR(frechet_distance(s, s), 0.0, 1e-6);
}

TEST(Frechet, MeanShiftIsSquaredNorm) {
  const auto cov = random_spd(5, 3);
  const auto mu = random_vec(5, 4);
  const auto m = random_vec(5, 5);
  EXPECT_NEAR(frechet_distance(stats(mu, cov), stats(mu + m, cov)), m.squaredNorm(), 1e-6);
}

TEST(Frechet, CommutingCovariances) {
  const Eigen::Vector2d mu(0.3, -1.0);
  EXPECT_NEAR(frechet_distance(stats(mu, Eigen::Matrix2d::Identity()), stats(mu, 4.0 * Eigen::Matrix2d::Identity())), 2.0,
              1e-5);
}

TEST(Frechet, MatchesEigenOracleOnGeneralCovariances) {
  const auto ca = random_spd(4, 6), cb = random_spd(4, 7);
  const auto ma = random_vec(4, 8), mb = random_vec(4, 9);
  const auto ra = oracle_sqrt(ca);
  const double expected = (ma - mb).squaredNorm() + (ca + cb - 2.0 * oracle_sqrt(ra * cb * ra)).trace();
  EXPECT_NEAR(frechet_distance(stats(ma, ca), stats(mb, cb)), expected, 1e-8);
}

TEST(Frechet, SymmetricNonNegativeAndRotationInvariant) {
  const auto a = stats(random_vec(5, 10), random_spd(5, 11));
  const auto b = stats(random_vec(5, 12), random_spd(5, 13));
  const double ab = frechet_distance(a, b);
  EXPECT_GE(ab, 0.0);
  EXPECT_NEAR(ab, frechet_distance(b, a), 1e-8);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_spd(5, 14));
  const Eigen::MatrixXd q = qr.householderQ();
  const auto ra = stats(q * a.mean, q * a.cov * q.transpose());
  const auto rb = stats(q * b.mean, q * b.cov * q.transpose());
  EXPECT_NEAR(frechet_distance(ra, rb), ab, 1e-5);
}

TEST(Frechet, Errors) {
  EXPECT_THROW(frechet_distance(stats(random_vec(3, 1), random_spd(3, 2)), stats(random_vec(4, 1), random_spd(4, 2))),
               InvalidArgument);
  Eigen::Matrix2d bad;
  bad << -5.0, 0.0, 0.0, 1.0;
  EXPECT_THROW(frechet_distance(stats(Eigen::Vector2d::Zero(), bad), stats(Eigen::Vector2d::Zero(), Eigen::Matrix2d::Identity())),
               NumericalFailure);
}

TEST(Gaussian, UnbiasedCovarianceAndMinimumCount) {
  const std::vector<Eigen::VectorXd> xs = {Eigen::Vector2d(1, 0), Eigen::Vector2d(3, 2), Eigen::Vector2d(5, 1)};
  const auto g = fit_gaussian(xs);
  EXPECT_EQ(g.n, 3);
  EXPECT_NEAR(g.mean(0), 3.0, 1e-12);
  EXPECT_NEAR(g.mean(1), 1.0, 1e-12);
  EXPECT_NEAR(g.cov(0, 0), 4.0, 1e-12);
  EXPECT_NEAR(g.cov(1, 1), 1.0, 1e-12);
  EXPECT_NEAR(g.cov(0, 1), 1.0, 1e-12);
  EXPECT_LE((g.cov - g.cov.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_THROW(fit_gaussian({Eigen::Vector2d(1, 0)}), InvalidArgument);
}

FrameSequence video(int frames, uint64_t seed, int64_t size = 12) {
  FrameSequence v;
  for (int t = 0; t < frames; ++t) v.push_back(testing::random_frame(size, size, seed * 1000 + static_cast<uint64_t>(t)));
  return v;
}

TEST(Clips, LengthRules) {
  EXPECT_EQ(extract_clips(video(30, 1)).size(), 1u);
  EXPECT_EQ(extract_clips(video(30, 1))[0].size(), 30u);
  EXPECT_TRUE(extract_clips(video(29, 1)).empty());
  const auto v = video(100, 2);
  const auto c = extract_clips(v);
  ASSERT_EQ(c.size(), 1u);
  ASSERT_EQ(c[0].size(), 30u);
  for (size_t t = 0; t < 30; ++t) EXPECT_TRUE(torch::equal(c[0][t].rgb, v[t].rgb));
}

TEST(Embedder, RandomProjectionIsDeterministic) {
  const RandomProjectionEmbedder a, b;
  const auto clip = video(4, 3, 20);
  EXPECT_EQ(a.dim(), 64);
  EXPECT_EQ(a.embed(clip), b.embed(clip));
  EXPECT_NE(RandomProjectionEmbedder(64, 5).embed(clip), a.embed(clip));
  EXPECT_THROW(make_embedder("nope"), InvalidArgument);
  EXPECT_EQ(make_embedder("random:9")->dim(), 64);
}

TEST(Embedder, I3dContainerLoads) {
  const auto dir = testing::fresh_dir("i3d");
  TensorMap t;
  torch::manual_seed(1);
  t["conv0.weight"] = torch::randn({4, 3, 3, 3, 3}) * 0.2;
  t["conv0.bias"] = torch::zeros({4});
  t["conv0.stride"] = torch::tensor({1, 2, 2}, torch::kLong);
  t["conv1.weight"] = torch::randn({6, 4, 1, 3, 3}) * 0.2;
  t["conv1.bias"] = torch::zeros({6});
  t["fc.weight"] = torch::randn({5, 6});
  t["fc.bias"] = torch::zeros({5});
  t["input_size"] = torch::tensor({16, 16}, torch::kLong);
  save_tensors(t, dir / "i3d.bin");
  const auto emb = make_embedder("i3d:" + (dir / "i3d.bin").string());
  EXPECT_EQ(emb->dim(), 5);
  const auto clip = video(6, 4, 24);
  const auto e = emb->embed(clip);
  EXPECT_EQ(e.size(), 5);
  EXPECT_EQ(e, emb->embed(clip));
  EXPECT_THROW(make_embedder("i3d:" + (dir / "missing.bin").string()), std::exception);
}

TEST(Fvd, SelfDistanceIsZero) {
  std::vector<FrameSequence> set;
  for (int i = 0; i < 4; ++i) set.push_back(video(30, 10 + static_cast<uint64_t>(i)));
  const RandomProjectionEmbedder emb;
  const auto r = compute_fvd(set, set, emb);
  EXPECT_NEAR(r.fvd, 0.0, 1e-4);
  EXPECT_EQ(r.n_real, 4);
  EXPECT_EQ(r.n_fake, 4);
  EXPECT_EQ(r.d, 64);
}

std::vector<FrameSequence> with_noise(const std::vector<FrameSequence>& set, double sigma, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  std::vector<FrameSequence> out;
  for (const auto& v : set) {
    FrameSequence n;
    for (const auto& f : v) n.push_back(Frame{(f.rgb + sigma * torch::randn(f.rgb.sizes(), gen)).clamp(0.0, 1.0)});
    out.push_back(std::move(n));
  }
  return out;
}

TEST(Fvd, MonotoneInNoiseAndPermutationInvariant) {
  std::vector<FrameSequence> real;
  for (int i = 0; i < 20; ++i) {
    FrameSequence v;
    const auto base = testing::random_frame(16, 16, 100 + static_cast<uint64_t>(i)).rgb;
    for (int t = 0; t < 30; ++t) v.push_back(Frame{torch::roll(base, {t % 16}, {2}).contiguous()});
    real.push_back(std::move(v));
  }
  const RandomProjectionEmbedder emb;
  const double weak = compute_fvd(real, with_noise(real, 0.02, 1), emb).fvd;
  const double strong = compute_fvd(real, with_noise(real, 0.3, 1), emb).fvd;
  EXPECT_GT(strong, weak);
  auto fake = with_noise(real, 0.1, 2);
  const double base = compute_fvd(real, fake, emb).fvd;
  std::reverse(fake.begin(), fake.end());
  std::rotate(real.begin(), real.begin() + 7, real.end());
  EXPECT_NEAR(compute_fvd(real, fake, emb).fvd, base, 1e-6 * std::max(1.0, base));
}

TEST(Fvd, TooFewClipsThrows) {
  const RandomProjectionEmbedder emb;
  const std::vector<FrameSequence> two = {video(30, 1), video(30, 2)};
  const std::vector<FrameSequence> short_ones = {video(30, 3), video(10, 4)};
  EXPECT_THROW(compute_fvd(two, short_ones, emb), InvalidArgument);
}

TEST(Fvd, LoadVideoSetLayouts) {
  const auto dir = testing::fresh_dir("fvd_sets");
  save_frame_dir(video(3, 1), dir / "flat");
  save_frame_dir(video(2, 2), dir / "nested" / "b");
  save_frame_dir(video(4, 3), dir / "nested" / "a");
  EXPECT_EQ(load_video_set(dir / "flat").size(), 1u);
  const auto nested = load_video_set(dir / "nested");
  ASSERT_EQ(nested.size(), 2u);
  EXPECT_EQ(nested[0].size(), 4u);
  EXPECT_EQ(nested[1].size(), 2u);
}

}  // namespace
}  // namespace cpf
