#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <utility>
#include <vector>

namespace cpf {

inline constexpr int kNumJoints = 18;

// OpenPose COCO-18 joint order.
enum class Joint : int {
  kNose = 0, kNeck, kRShoulder, kRElbow, kRWrist, kLShoulder, kLElbow, kLWrist,
  kRHip, kRKnee, kRAnkle, kLHip, kLKnee, kLAnkle, kREye, kLEye, kREar, kLEar
};

// Limb segments rasterized into the pose map, as (joint, joint) pairs.
inline constexpr std::array<std::pair<int, int>, 17> kLimbs = {{
    {1, 2}, {1, 5}, {2, 3}, {3, 4}, {5, 6}, {6, 7}, {1, 8}, {8, 9}, {9, 10},
    {1, 11}, {11, 12}, {12, 13}, {1, 0}, {0, 14}, {14, 16}, {0, 15}, {15, 17}}};

inline constexpr int kNumLimbs = static_cast<int>(kLimbs.size());
inline constexpr int kPoseMapChannels = kNumJoints + kNumLimbs;

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  // 0 marks an undetected joint.
  double confidence = 0.0;

  bool detected() const { return confidence > 0.0; }
};

using PoseFrame = std::array<Keypoint, kNumJoints>;

struct PoseSequence {
  std::vector<PoseFrame> frames;
  double fps = 30.0;

  size_t size() const { return frames.size(); }
};

struct SmoothingConfig {
  int window = 11;
  int polyorder = 3;
};

// Savitzky-Golay smoothing applied per joint and per coordinate. Points near
// the sequence ends are evaluated on the polynomial fitted to the first (or
// last) `window` samples. Undetected samples are left out of every fit and
// keep their own value; confidences pass through.
PoseSequence smooth_sequence(const PoseSequence& seq, int window, int polyorder);
inline PoseSequence smooth_sequence(const PoseSequence& seq, const SmoothingConfig& cfg) {
  return smooth_sequence(seq, cfg.window, cfg.polyorder);
}

// Savitzky-Golay on a single scalar series with optional per-sample validity.
std::vector<double> savgol_filter(const std::vector<double>& values, int window, int polyorder,
                                  const std::vector<bool>& valid = {});

double confidence_sum(const PoseFrame& frame);

// Index of the frame with the largest confidence sum, lowest index on ties.
size_t select_appearance_frame(const PoseSequence& seq);

// [kPoseMapChannels, height, width] float tensor: one Gaussian heatmap per joint
// followed by one anti-aliased segment per limb.
torch::Tensor rasterize_pose(const PoseFrame& frame, int64_t height, int64_t width,
                             double sigma = 6.0);

// Thickness, in pixels, of limb segments for a given heatmap sigma.
double limb_thickness(double sigma);

PoseSequence load_keypoints(const std::filesystem::path& path, double fps = 30.0);
void save_keypoints(const PoseSequence& seq, const std::filesystem::path& path);
PoseFrame parse_pose_line(const std::string& line);
std::string format_pose_line(const PoseFrame& frame);

}  // namespace cpf
