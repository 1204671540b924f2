#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "cpf/correspondence.hpp"
#include "cpf/image.hpp"
#include "cpf/pose_toolkit.hpp"

namespace cpf {

// Articulated 2-D figure made of textured quads. Angles are in radians from
// straight down; positive swings the limb away from the body.
struct PuppetPose {
  double cx = 0.0;  // neck position
  double cy = 0.0;
  double scale = 1.0;  // neck-to-hip distance in pixels
  // right shoulder, right elbow, left shoulder, left elbow,
  // right hip, right knee, left hip, left knee
  std::array<double, 8> angles{};
};

inline constexpr int kPuppetParts = 10;

struct PuppetStyle {
  std::array<std::array<float, 3>, kPuppetParts> colors{};
  double stripe_phase = 0.0;
};

PuppetStyle make_puppet_style(uint64_t seed);

std::array<Point2, kNumJoints> puppet_joints(const PuppetPose& pose);
PoseFrame puppet_keypoints(const PuppetPose& pose, double confidence = 0.9);
// Two triangles per part; face ids are stable across poses.
std::vector<Triangle2D> puppet_faces(const PuppetPose& pose);
TextureFn puppet_texture(const PuppetStyle& style);

RenderResult render_puppet(const PuppetPose& pose, const PuppetStyle& style, int64_t height, int64_t width);

// Figure centred on a canvas of the given size, filling about 70% of its height.
PuppetPose centred_pose(int64_t height, int64_t width);
// Smooth periodic motion used by the synthetic videos.
PuppetPose animated_pose(int t, int64_t height, int64_t width, uint64_t seed);
PuppetPose random_pose(std::mt19937_64& rng, int64_t height, int64_t width);

CorrespondenceScene puppet_scene(const PuppetPose& source, const PuppetPose& target, int64_t height, int64_t width);

Frame synthetic_background(int64_t height, int64_t width, uint64_t seed);

struct SyntheticVideo {
  Frame background;
  FrameSequence frames;
  FrameSequence foregrounds;  // rendered figure, zero elsewhere
  std::vector<ParsingMap> parsing;
  std::vector<torch::Tensor> masks;  // float [H, W] coverage
  PoseSequence poses;
  std::vector<PuppetPose> puppet;
};

SyntheticVideo make_synthetic_video(int num_frames, int64_t height, int64_t width, uint64_t seed);

struct FixturePaths {
  std::filesystem::path root;
  std::filesystem::path manifest;
  std::filesystem::path config;
  std::filesystem::path appearance;
  std::filesystem::path appearance_parsing;
  std::filesystem::path appearance_pose;
  std::filesystem::path source_poses;
  std::filesystem::path background;
};

struct FixtureOptions {
  int num_videos = 2;
  int num_frames = 10;
  int64_t height = 64;
  int64_t width = 64;
  int64_t working_size = 64;
  uint64_t seed = 1;
  int64_t train_steps = 2;
};

// Writes videos, a manifest, a small-network pipeline config and the
// inputs of one transfer run (appearance from video 0, poses of video 1).
FixturePaths write_synthetic_fixture(const std::filesystem::path& dir, const FixtureOptions& options);

}  // namespace cpf
