#pragma once

#include <torch/torch.h>

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "cpf/image.hpp"

namespace cpf {

constexpr int kFvdClipLength = 30;

// Maps a fixed-length clip to a d-dimensional vector. Implementations are
// deterministic and safe to call from several threads.
class ClipEmbedder {
 public:
  virtual ~ClipEmbedder() = default;
  virtual Eigen::VectorXd embed(const FrameSequence& clip) const = 0;
  virtual int64_t dim() const = 0;
};

// Frames are resized to side x side, flattened and multiplied by a fixed
// Gaussian matrix drawn from `seed` (scaled by 1/sqrt(input size)).
class RandomProjectionEmbedder final : public ClipEmbedder {
 public:
  explicit RandomProjectionEmbedder(int64_t dim = 64, uint64_t seed = 2024, int64_t side = 16);
  Eigen::VectorXd embed(const FrameSequence& clip) const override;
  int64_t dim() const override { return dim_; }

 private:
  torch::Tensor projection(int64_t input_size) const;

  int64_t dim_;
  uint64_t seed_;
  int64_t side_;
  mutable std::mutex mutex_;
  mutable std::map<int64_t, torch::Tensor> cache_;
};

// Conv3d stack loaded from a tensor container. Names: "conv<i>.weight" [O, I,
// kt, kh, kw], "conv<i>.bias" [O], optional "conv<i>.stride" (3 values), and
// an optional "fc.weight"/"fc.bias" head. An optional "input_size" tensor
// (2 values) fixes the frame resolution. Each conv is followed by ReLU; the
// embedding is the global average of the last feature map, then the head.
class I3dEmbedder final : public ClipEmbedder {
 public:
  explicit I3dEmbedder(const std::filesystem::path& weights);
  Eigen::VectorXd embed(const FrameSequence& clip) const override;
  int64_t dim() const override { return dim_; }

 private:
  struct Layer {
    torch::Tensor weight;
    torch::Tensor bias;
    std::vector<int64_t> stride;
  };
  std::vector<Layer> layers_;
  torch::Tensor fc_weight_;
  torch::Tensor fc_bias_;
  int64_t input_h_ = 0;
  int64_t input_w_ = 0;
  int64_t dim_ = 0;
};

// "random", "random:<seed>" or "i3d:<weights path>".
std::unique_ptr<ClipEmbedder> make_embedder(const std::string& spec);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  int64_t n = 0;
};

// Sample mean and unbiased covariance; at least two samples.
GaussianStats fit_gaussian(const std::vector<Eigen::VectorXd>& samples);

double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// First `length` frames of the video, or nothing (with a warning) if shorter.
std::vector<FrameSequence> extract_clips(const FrameSequence& video, int length = kFvdClipLength);

struct FvdReport {
  double fvd = 0.0;
  int64_t n_real = 0;
  int64_t n_fake = 0;
  int64_t d = 0;
};

FvdReport compute_fvd(const std::vector<FrameSequence>& real, const std::vector<FrameSequence>& fake,
                      const ClipEmbedder& embedder, int clip_length = kFvdClipLength);

// A directory of PNG frames is one video; otherwise each subdirectory (sorted)
// holding PNG frames is one video.
std::vector<FrameSequence> load_video_set(const std::filesystem::path& dir);

}  // namespace cpf
