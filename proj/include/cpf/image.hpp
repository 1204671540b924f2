#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <vector>

namespace cpf {

// RGB frame stored as a float tensor of shape [3, H, W] with values in [0, 1].
struct Frame {
  torch::Tensor rgb;

  static Frame zeros(int64_t height, int64_t width);
  int64_t height() const { return rgb.size(1); }
  int64_t width() const { return rgb.size(2); }
};

using FrameSequence = std::vector<Frame>;

// Per-pixel semantic labels, int64 tensor [H, W]. Label 0 is background.
struct ParsingMap {
  torch::Tensor labels;
  int num_classes = 20;

  int64_t height() const { return labels.size(0); }
  int64_t width() const { return labels.size(1); }
  // Float [H, W] tensor, 1 where labels != 0.
  torch::Tensor foreground_mask() const;
  // Float [C, H, W] one-hot encoding.
  torch::Tensor one_hot() const;
};

void check_frame(const Frame& frame, const char* what);
void check_parsing(const ParsingMap& parsing, const char* what);

Frame load_frame_png(const std::filesystem::path& path);
void save_frame_png(const Frame& frame, const std::filesystem::path& path);
ParsingMap load_parsing_png(const std::filesystem::path& path, int num_classes);
void save_parsing_png(const ParsingMap& parsing, const std::filesystem::path& path);

// Single-channel 8-bit label image, values written verbatim.
torch::Tensor load_label_png(const std::filesystem::path& path);
void save_label_png(const torch::Tensor& labels, const std::filesystem::path& path);

// Frames named 000000.png, 000001.png, ... in a directory.
FrameSequence load_frame_dir(const std::filesystem::path& dir);
void save_frame_dir(const FrameSequence& frames, const std::filesystem::path& dir);
std::vector<std::filesystem::path> list_png(const std::filesystem::path& dir);
std::string frame_filename(size_t index);

}  // namespace cpf
