#include "cpf/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>

#include "cpf/errors.hpp"

namespace cpf {

namespace fs = std::filesystem;

void warn(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

Frame Frame::zeros(int64_t height, int64_t width) {
  return Frame{torch::zeros({3, height, width}, torch::kFloat32)};
}

torch::Tensor ParsingMap::foreground_mask() const { return labels.ne(0).to(torch::kFloat32); }

torch::Tensor ParsingMap::one_hot() const {
  return torch::one_hot(labels, num_classes).permute({2, 0, 1}).to(torch::kFloat32).contiguous();
}

void check_frame(const Frame& frame, const char* what) {
  if (!frame.rgb.defined() || frame.rgb.dim() != 3 || frame.rgb.size(0) != 3) {
    throw InvalidArgument(std::string(what) + ": frame must be a [3, H, W] tensor");
  }
}

void check_parsing(const ParsingMap& parsing, const char* what) {
  if (!parsing.labels.defined() || parsing.labels.dim() != 2) {
    throw InvalidArgument(std::string(what) + ": parsing map must be a [H, W] tensor");
  }
  if (parsing.num_classes < 1) throw InvalidArgument(std::string(what) + ": num_classes < 1");
  if (parsing.labels.numel() > 0 &&
      (parsing.labels.min().item<int64_t>() < 0 ||
       parsing.labels.max().item<int64_t>() >= parsing.num_classes)) {
    throw InvalidArgument(std::string(what) + ": label outside [0, num_classes)");
  }
}

Frame load_frame_png(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto hwc = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8);
  return Frame{hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous()};
}

void save_frame_png(const Frame& frame, const fs::path& path) {
  check_frame(frame, "save_frame_png");
  auto hwc = frame.rgb.detach()
                 .clamp(0.0, 1.0)
                 .mul(255.0)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat rgb(static_cast<int>(frame.height()), static_cast<int>(frame.width()), CV_8UC3,
              hwc.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("cannot write " + path.string());
}

torch::Tensor load_label_png(const fs::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (gray.empty()) throw std::runtime_error("cannot read image " + path.string());
  if (gray.channels() != 1 || gray.depth() != CV_8U) {
    throw InvalidArgument(path.string() + ": expected single-channel 8-bit label image");
  }
  return torch::from_blob(gray.data, {gray.rows, gray.cols}, torch::kUInt8).to(torch::kInt64);
}

void save_label_png(const torch::Tensor& labels, const fs::path& path) {
  auto u8 = labels.detach().clamp(0, 255).to(torch::kUInt8).contiguous();
  cv::Mat gray(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1,
               u8.data_ptr<uint8_t>());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), gray)) throw std::runtime_error("cannot write " + path.string());
}

ParsingMap load_parsing_png(const fs::path& path, int num_classes) {
  ParsingMap map{load_label_png(path), num_classes};
  check_parsing(map, path.string().c_str());
  return map;
}

void save_parsing_png(const ParsingMap& parsing, const fs::path& path) {
  check_parsing(parsing, "save_parsing_png");
  save_label_png(parsing.labels, path);
}

std::string frame_filename(size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu.png", index);
  return buf;
}

std::vector<fs::path> list_png(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

FrameSequence load_frame_dir(const fs::path& dir) {
  FrameSequence frames;
  for (const auto& file : list_png(dir)) frames.push_back(load_frame_png(file));
  return frames;
}

void save_frame_dir(const FrameSequence& frames, const fs::path& dir) {
  fs::create_directories(dir);
  for (size_t i = 0; i < frames.size(); ++i) save_frame_png(frames[i], dir / frame_filename(i));
}

}  // namespace cpf
