#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "cpf/errors.hpp"
#include "cpf/pose_toolkit.hpp"
#include "test_util.hpp"

namespace cpf {
namespace {

// Least-squares polynomial fit over offsets -h..h by normal equations, evaluated at `at`.
double lsq_fit(const std::vector<double>& y, int polyorder, double at) {
  const int n = static_cast<int>(y.size());
  const int half = n / 2;
  Eigen::MatrixXd a(n, polyorder + 1);
  Eigen::VectorXd b(n);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k <= polyorder; ++k) a(i, k) = std::pow(static_cast<double>(i - half), k);
    b(i) = y[static_cast<size_t>(i)];
  }
  const Eigen::VectorXd c = (a.transpose() * a).fullPivLu().solve(a.transpose() * b);
  double v = 0.0;
  for (int k = 0; k <= polyorder; ++k) v += c(k) * std::pow(at, k);
  return v;
}

PoseSequence sequence_from(const std::vector<double>& xs) {
  PoseSequence seq;
  for (double x : xs) {
    PoseFrame f{};
    for (int j = 0; j < kNumJoints; ++j) f[j] = Keypoint{x + j, 2.0 * x - j, 0.5};
    seq.frames.push_back(f);
  }
  return seq;
}

TEST(PoseSavgol, ImpulseCentralValueMatchesLeastSquares) {
  const std::vector<double> impulse = {0, 0, 1, 0, 0};
  const auto out = savgol_filter(impulse, 5, 2);
  EXPECT_NEAR(out[2], 17.0 / 35.0, 1e-12);
  EXPECT_NEAR(out[2], lsq_fit(impulse, 2, 0.0), 1e-12);
}

TEST(PoseSavgol, CentralCoefficients) {
  const std::array<double, 5> expected = {-3.0 / 35, 12.0 / 35, 17.0 / 35, 12.0 / 35, -3.0 / 35};
  for (int k = 0; k < 5; ++k) {
    std::vector<double> e(11, 0.0);
    e[static_cast<size_t>(5 + 2 - k)] = 1.0;
    EXPECT_NEAR(savgol_filter(e, 5, 2)[5], expected[static_cast<size_t>(k)], 1e-12) << k;
  }
}

TEST(PoseSavgol, EdgesUseOneSidedFit) {
  const std::vector<double> y = {3.0, -1.0, 4.0, 1.0, -5.0, 9.0, 2.0};
  const auto out = savgol_filter(y, 5, 2);
  const std::vector<double> head(y.begin(), y.begin() + 5);
  const std::vector<double> tail(y.end() - 5, y.end());
  EXPECT_NEAR(out[0], lsq_fit(head, 2, -2.0), 1e-10);
  EXPECT_NEAR(out[1], lsq_fit(head, 2, -1.0), 1e-10);
  EXPECT_NEAR(out[5], lsq_fit(tail, 2, 1.0), 1e-10);
  EXPECT_NEAR(out[6], lsq_fit(tail, 2, 2.0), 1e-10);
}

TEST(PoseSavgol, PreservesPolynomials) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int polyorder = 0; polyorder <= 3; ++polyorder) {
    for (int deg = 0; deg <= polyorder; ++deg) {
      std::vector<double> c(static_cast<size_t>(deg + 1));
      for (auto& v : c) v = u(rng);
      std::vector<double> y(40);
      for (size_t t = 0; t < y.size(); ++t) {
        double s = 0.0;
        const double x = static_cast<double>(t) / 10.0;
        for (int k = 0; k <= deg; ++k) s += c[static_cast<size_t>(k)] * std::pow(x, k);
        y[t] = s;
      }
      const auto out = savgol_filter(y, 11, polyorder);
      for (size_t t = 0; t < y.size(); ++t) EXPECT_NEAR(out[t], y[t], 1e-9);
    }
  }
}

TEST(PoseSavgol, ConstantAndQuadraticUnchanged) {
  const auto c = smooth_sequence(sequence_from({7, 7, 7, 7, 7, 7}), 5, 2);
  for (const auto& f : c.frames) EXPECT_NEAR(f[0].x, 7.0, 1e-12);
  std::vector<double> q;
  for (int t = 0; t < 9; ++t) q.push_back(static_cast<double>(t * t));
  const auto s = smooth_sequence(sequence_from(q), 5, 2);
  for (size_t t = 0; t < q.size(); ++t) {
    EXPECT_NEAR(s.frames[t][0].x, q[t], 1e-9);
    EXPECT_NEAR(s.frames[t][3].y, 2.0 * q[t] - 3.0, 1e-9);
  }
}

TEST(PoseSavgol, CommutesWithTranslation) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 3.0);
  std::vector<double> xs(25);
  for (auto& x : xs) x = n(rng);
  std::vector<double> shifted = xs;
  for (auto& x : shifted) x += 12.5;
  const auto a = smooth_sequence(sequence_from(xs), 11, 3);
  const auto b = smooth_sequence(sequence_from(shifted), 11, 3);
  for (size_t t = 0; t < xs.size(); ++t) {
    for (int j = 0; j < kNumJoints; ++j) {
      EXPECT_NEAR(b.frames[t][j].x, a.frames[t][j].x + 12.5, 1e-9);
      EXPECT_NEAR(b.frames[t][j].y, a.frames[t][j].y + 25.0, 1e-9);
    }
  }
}

TEST(PoseSavgol, ConfidencesPassThroughAndUndetectedKept) {
  std::vector<double> xs = {0, 1, 2, 3, 4, 5, 6};
  auto seq = sequence_from(xs);
  seq.frames[3][2] = Keypoint{100.0, -50.0, 0.0};
  const auto out = smooth_sequence(seq, 5, 1);
  EXPECT_EQ(out.frames[3][2].x, 100.0);
  EXPECT_EQ(out.frames[3][2].y, -50.0);
  EXPECT_EQ(out.frames[3][2].confidence, 0.0);
  // The undetected sample does not disturb its neighbours (linear data is reproduced).
  EXPECT_NEAR(out.frames[2][2].x, 4.0, 1e-9);
  EXPECT_NEAR(out.frames[4][2].x, 6.0, 1e-9);
  for (size_t t = 0; t < xs.size(); ++t) EXPECT_EQ(out.frames[t][0].confidence, seq.frames[t][0].confidence);
}

TEST(PoseSavgol, RejectsBadParameters) {
  const auto seq = sequence_from({1, 2, 3, 4, 5, 6});
  EXPECT_THROW(smooth_sequence(seq, 4, 2), InvalidArgument);
  EXPECT_THROW(smooth_sequence(seq, 7, 2), InvalidArgument);
  EXPECT_THROW(smooth_sequence(seq, 3, 3), InvalidArgument);
  EXPECT_EQ(smooth_sequence(seq, 5, 2).size(), seq.size());
}

PoseFrame frame_with_sum(double total) {
  PoseFrame f{};
  for (int j = 0; j < kNumJoints; ++j) f[j] = Keypoint{1.0, 1.0, total / kNumJoints};
  return f;
}

TEST(PoseAppearance, ArgmaxOfConfidenceSums) {
  PoseSequence seq;
  for (double s : {10.2, 17.9, 14.1}) seq.frames.push_back(frame_with_sum(s));
  EXPECT_EQ(select_appearance_frame(seq), 1u);
}

TEST(PoseAppearance, TiesPickLowestIndex) {
  PoseSequence seq;
  for (int i = 0; i < 4; ++i) seq.frames.push_back(frame_with_sum(9.0));
  EXPECT_EQ(select_appearance_frame(seq), 0u);
  EXPECT_THROW(select_appearance_frame(PoseSequence{}), InvalidArgument);
}

TEST(PoseAppearance, MatchesBruteForceAndIgnoresJointOrder) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    PoseSequence seq;
    std::vector<double> sums;
    for (int t = 0; t < 3; ++t) {
      PoseFrame f{};
      double s = 0.0;
      for (int j = 0; j < kNumJoints; ++j) {
        f[j] = Keypoint{u(rng), u(rng), u(rng)};
        s += f[j].confidence;
      }
      sums.push_back(s);
      seq.frames.push_back(f);
    }
    const size_t oracle = static_cast<size_t>(std::max_element(sums.begin(), sums.end()) - sums.begin());
    EXPECT_EQ(select_appearance_frame(seq), oracle);
    PoseSequence permuted = seq;
    for (auto& f : permuted.frames) std::reverse(f.begin(), f.end());
    EXPECT_EQ(select_appearance_frame(permuted), oracle);
  }
}

TEST(PoseRasterize, GaussianValues) {
  PoseFrame f{};
  f[0] = Keypoint{5.0, 5.0, 1.0};
  const auto map = rasterize_pose(f, 16, 16, 1.0);
  ASSERT_EQ(map.sizes(), (std::vector<int64_t>{kPoseMapChannels, 16, 16}));
  EXPECT_NEAR(map[0][5][5].item<double>(), 1.0, 1e-6);
  EXPECT_NEAR(map[0][5][6].item<double>(), std::exp(-0.5), 1e-6);
  EXPECT_NEAR(map[0][7][5].item<double>(), std::exp(-2.0), 1e-6);
  EXPECT_EQ(map[1].abs().sum().item<double>(), 0.0);
}

TEST(PoseRasterize, UndetectedJointGivesZeroChannelAndRangeHolds) {
  PoseFrame f{};
  for (int j = 0; j < kNumJoints; ++j) f[j] = Keypoint{3.0 + j, 4.0 + j, j % 3 == 0 ? 0.0 : 0.8};
  const auto map = rasterize_pose(f, 32, 32, 2.0);
  for (int j = 0; j < kNumJoints; ++j) {
    if (j % 3 == 0) EXPECT_EQ(map[j].abs().sum().item<double>(), 0.0) << j;
    else EXPECT_GT(map[j].sum().item<double>(), 0.0) << j;
  }
  EXPECT_GE(map.min().item<double>(), 0.0);
  EXPECT_LE(map.max().item<double>(), 1.0);
}

TEST(PoseRasterize, ChannelMassMonotoneInSigma) {
  PoseFrame f{};
  f[4] = Keypoint{20.0, 11.0, 1.0};
  double prev = 0.0;
  for (double sigma : {0.5, 1.0, 2.0, 4.0}) {
    const double mass = rasterize_pose(f, 40, 40, sigma)[4].sum().item<double>();
    EXPECT_GT(mass, prev);
    prev = mass;
  }
}

TEST(PoseRasterize, LimbSegmentCoversMidpoint) {
  PoseFrame f{};
  f[1] = Keypoint{5.0, 10.0, 1.0};
  f[2] = Keypoint{25.0, 10.0, 1.0};
  const auto map = rasterize_pose(f, 20, 30, 3.0);
  EXPECT_NEAR(map[kNumJoints + 0][10][15].item<double>(), 1.0, 1e-6);
  EXPECT_EQ(map[kNumJoints + 0][0][15].item<double>(), 0.0);
  EXPECT_EQ(map[kNumJoints + 1].abs().sum().item<double>(), 0.0);
}

TEST(PoseKeypointFile, RoundTripIsExact) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1000.0);
  PoseSequence seq;
  for (int t = 0; t < 4; ++t) {
    PoseFrame f{};
    for (auto& k : f) k = Keypoint{u(rng), u(rng), u(rng) / 1000.0};
    seq.frames.push_back(f);
  }
  const auto dir = testing::fresh_dir("pose_io");
  save_keypoints(seq, dir / "k.txt");
  const auto back = load_keypoints(dir / "k.txt");
  ASSERT_EQ(back.size(), seq.size());
  for (size_t t = 0; t < seq.size(); ++t) {
    for (int j = 0; j < kNumJoints; ++j) {
      EXPECT_EQ(back.frames[t][j].x, seq.frames[t][j].x);
      EXPECT_EQ(back.frames[t][j].y, seq.frames[t][j].y);
      EXPECT_EQ(back.frames[t][j].confidence, seq.frames[t][j].confidence);
    }
  }
}

TEST(PoseKeypointFile, RejectsMalformedLines) {
  EXPECT_THROW(parse_pose_line("1 2 3"), InvalidArgument);
  std::string line;
  for (int i = 0; i < 54; ++i) line += "0.5 ";
  EXPECT_NO_THROW(parse_pose_line(line));
  EXPECT_THROW(parse_pose_line(line + "0.5"), InvalidArgument);
  EXPECT_THROW(parse_pose_line(line.substr(0, line.size() - 4) + "abc"), InvalidArgument);
}

}  // namespace
}  // namespace cpf
