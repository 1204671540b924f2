#pragma once

#include "json.hpp"
#include <torch/torch.h>

#include <optional>

#include "cpf/image.hpp"
#include "cpf/pose_toolkit.hpp"

namespace cpf {

inline constexpr int64_t kWorkingSize = 448;

// Maps the square working-resolution crop back to the source frame.
//
// The source box [top, bottom) x [left, right) is pasted into a zero square of
// side max(bottom - top, right - left) at (pad_top, pad_left) and that square
// is resized by `scale` to the working size. Pixel centers follow the
// half-pixel convention: working = (padded + 0.5) * scale - 0.5.
struct CropRecord {
  int64_t top = 0;
  int64_t left = 0;
  int64_t bottom = 0;
  int64_t right = 0;
  int64_t pad_top = 0;
  int64_t pad_left = 0;
  double scale = 1.0;
  int64_t source_h = 0;
  int64_t source_w = 0;

  int64_t box_height() const { return bottom - top; }
  int64_t box_width() const { return right - left; }
  int64_t side() const { return std::max(box_height(), box_width()); }
  int64_t target() const;

  // Source-frame pixel coordinates (x = column, y = row) to working coordinates.
  std::pair<double, double> to_working(double x, double y) const;
  std::pair<double, double> to_source(double x, double y) const;

  void validate() const;
  bool operator==(const CropRecord&) const = default;
};

void to_json(nlohmann::json& j, const CropRecord& rec);
void from_json(const nlohmann::json& j, CropRecord& rec);
CropRecord load_crop_record(const std::filesystem::path& path);
void save_crop_record(const CropRecord& rec, const std::filesystem::path& path);

// Builds a record for an arbitrary box; the box is clamped to the frame.
CropRecord make_crop_record(int64_t top, int64_t left, int64_t bottom, int64_t right,
                            int64_t source_h, int64_t source_w, int64_t target);

// Default crop margin: 10% of the larger bounding-box side.
int64_t default_margin(int64_t box_h, int64_t box_w);

struct CropResult {
  Frame frame;
  ParsingMap parsing;
  CropRecord record;
};

// Tight foreground box of `parsing`, grown by `margin` (default_margin when
// unset), zero-padded to a square and resized to target x target. Throws
// NoForeground when the parsing map is all background.
CropResult crop_foreground(const Frame& frame, const ParsingMap& parsing,
                           std::optional<int64_t> margin = std::nullopt,
                           int64_t target = kWorkingSize);

// Crops with a known record (used to re-crop or to crop auxiliary images).
Frame crop_with_record(const Frame& frame, const CropRecord& rec);
ParsingMap crop_parsing_with_record(const ParsingMap& parsing, const CropRecord& rec);

Frame restore_to_frame(const Frame& cropped, const CropRecord& rec);
// Soft [H, W] mask restore (bilinear) and label restore (nearest).
torch::Tensor restore_mask(const torch::Tensor& mask, const CropRecord& rec);
ParsingMap restore_parsing(const ParsingMap& cropped, const CropRecord& rec);

// Crop box derived from detected keypoints, for frames without a parsing map.
CropRecord crop_record_from_pose(const PoseFrame& pose, int64_t source_h, int64_t source_w,
                                 double relative_margin = 0.25, int64_t target = kWorkingSize);
PoseFrame pose_to_working(const PoseFrame& pose, const CropRecord& rec);

// Frame with background pixels (label 0) zeroed.
Frame extract_foreground(const Frame& frame, const ParsingMap& parsing);

// fg * mask + bg * (1 - mask). Mask is [H, W] or [1, H, W].
Frame composite(const Frame& fg, const Frame& bg, const torch::Tensor& mask);
// Batched, differentiable form: fg, bg [B, 3, H, W]; mask [B, 1, H, W].
torch::Tensor composite(const torch::Tensor& fg, const torch::Tensor& bg, const torch::Tensor& mask);

// Bilinear resize of a [C, H, W] or [B, C, H, W] float tensor (antialiased
// when shrinking unless disabled) and nearest-neighbour resize of an integer label map.
torch::Tensor resize_bilinear(const torch::Tensor& image, int64_t height, int64_t width, bool antialias = true);
torch::Tensor resize_nearest(const torch::Tensor& labels, int64_t height, int64_t width);

}  // namespace cpf
