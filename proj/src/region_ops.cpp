#include "cpf/region_ops.hpp"

#include <cmath>
#include <fstream>

#include "cpf/errors.hpp"

namespace cpf {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

int64_t CropRecord::target() const {
  return static_cast<int64_t>(std::llround(static_cast<double>(side()) * scale));
}

std::pair<double, double> CropRecord::to_working(double x, double y) const {
  return {(x - static_cast<double>(left - pad_left) + 0.5) * scale - 0.5,
          (y - static_cast<double>(top - pad_top) + 0.5) * scale - 0.5};
}

std::pair<double, double> CropRecord::to_source(double x, double y) const {
  return {(x + 0.5) / scale - 0.5 + static_cast<double>(left - pad_left),
          (y + 0.5) / scale - 0.5 + static_cast<double>(top - pad_top)};
}

void CropRecord::validate() const {
  if (!(0 <= top && top < bottom && bottom <= source_h)) {
    throw InvalidArgument("crop record: vertical box outside source frame");
  }
  if (!(0 <= left && left < right && right <= source_w)) {
    throw InvalidArgument("crop record: horizontal box outside source frame");
  }
  if (!(scale > 0.0) || !std::isfinite(scale)) throw InvalidArgument("crop record: scale must be positive");
  if (pad_top < 0 || pad_left < 0 || pad_top + box_height() > side() || pad_left + box_width() > side()) {
    throw InvalidArgument("crop record: padding inconsistent with box");
  }
}

void to_json(nlohmann::json& j, const CropRecord& rec) {
  j = nlohmann::json{{"top", rec.top},         {"left", rec.left},         {"bottom", rec.bottom},
                     {"right", rec.right},     {"pad_top", rec.pad_top},   {"pad_left", rec.pad_left},
                     {"scale", rec.scale},     {"source_h", rec.source_h}, {"source_w", rec.source_w}};
}

void from_json(const nlohmann::json& j, CropRecord& rec) {
  j.at("top").get_to(rec.top);
  j.at("left").get_to(rec.left);
  j.at("bottom").get_to(rec.bottom);
  j.at("right").get_to(rec.right);
  j.at("pad_top").get_to(rec.pad_top);
  j.at("pad_left").get_to(rec.pad_left);
  j.at("scale").get_to(rec.scale);
  j.at("source_h").get_to(rec.source_h);
  j.at("source_w").get_to(rec.source_w);
}

CropRecord load_crop_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto rec = nlohmann::json::parse(in).get<CropRecord>();
  rec.validate();
  return rec;
}

void save_crop_record(const CropRecord& rec, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << nlohmann::json(rec).dump() << '\n';
}

int64_t default_margin(int64_t box_h, int64_t box_w) {
  return static_cast<int64_t>(std::llround(0.1 * static_cast<double>(std::max(box_h, box_w))));
}

CropRecord make_crop_record(int64_t top, int64_t left, int64_t bottom, int64_t right,
                            int64_t source_h, int64_t source_w, int64_t target) {
  if (target <= 0) throw InvalidArgument("crop: target size must be positive");
  CropRecord rec;
  rec.source_h = source_h;
  rec.source_w = source_w;
  rec.top = std::clamp<int64_t>(top, 0, source_h);
  rec.bottom = std::clamp<int64_t>(bottom, 0, source_h);
  rec.left = std::clamp<int64_t>(left, 0, source_w);
  rec.right = std::clamp<int64_t>(right, 0, source_w);
  if (rec.bottom <= rec.top || rec.right <= rec.left) throw InvalidArgument("crop: empty box");
  const int64_t side = rec.side();
  rec.pad_top = (side - rec.box_height()) / 2;
  rec.pad_left = (side - rec.box_width()) / 2;
  rec.scale = static_cast<double>(target) / static_cast<double>(side);
  rec.validate();
  return rec;
}

torch::Tensor resize_bilinear(const torch::Tensor& image, int64_t height, int64_t width, bool antialias) {
  const bool batched = image.dim() == 4;
  auto input = batched ? image : image.unsqueeze(0);
  if (input.size(2) == height && input.size(3) == width) return image;
  const bool shrink = antialias && (height < input.size(2) || width < input.size(3));
  auto out = F::interpolate(input, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{height, width})
                                       .mode(torch::kBilinear)
                                       .align_corners(false)
                                       .antialias(shrink));
  return batched ? out : out.squeeze(0);
}

torch::Tensor resize_nearest(const torch::Tensor& labels, int64_t height, int64_t width) {
  if (labels.size(-2) == height && labels.size(-1) == width) return labels;
  // Nearest-exact: output pixel i reads input floor((i + 0.5) * in / out).
  const auto source_index = [&](int64_t in, int64_t out) {
    auto idx = ((torch::arange(out, torch::kFloat64) + 0.5) * (static_cast<double>(in) / static_cast<double>(out))).floor();
    return idx.clamp(0, in - 1).to(torch::kLong).to(labels.device());
  };
  return labels.index_select(-2, source_index(labels.size(-2), height))
      .index_select(-1, source_index(labels.size(-1), width))
      .contiguous();
}

namespace {

torch::Tensor pad_to_square(const torch::Tensor& chw, const CropRecord& rec) {
  const int64_t side = rec.side();
  auto square = torch::zeros({chw.size(0), side, side}, chw.options());
  square.index_put_({Slice(), Slice(rec.pad_top, rec.pad_top + rec.box_height()),
                     Slice(rec.pad_left, rec.pad_left + rec.box_width())},
                    chw.index({Slice(), Slice(rec.top, rec.bottom), Slice(rec.left, rec.right)}));
  return square;
}

torch::Tensor unpad_to_canvas(const torch::Tensor& square, const CropRecord& rec) {
  auto canvas = torch::zeros({square.size(0), rec.source_h, rec.source_w}, square.options());
  canvas.index_put_({Slice(), Slice(rec.top, rec.bottom), Slice(rec.left, rec.right)},
                    square.index({Slice(), Slice(rec.pad_top, rec.pad_top + rec.box_height()),
                                  Slice(rec.pad_left, rec.pad_left + rec.box_width())}));
  return canvas;
}

void check_source(const CropRecord& rec, int64_t h, int64_t w) {
  rec.validate();
  if (rec.source_h != h || rec.source_w != w) {
    throw InvalidArgument("crop record source size does not match the frame");
  }
}

}  // namespace

Frame crop_with_record(const Frame& frame, const CropRecord& rec) {
  check_frame(frame, "crop");
  check_source(rec, frame.height(), frame.width());
  const int64_t target = rec.target();
  return Frame{resize_bilinear(pad_to_square(frame.rgb, rec), target, target).clamp(0.0, 1.0).contiguous()};
}

ParsingMap crop_parsing_with_record(const ParsingMap& parsing, const CropRecord& rec) {
  check_source(rec, parsing.height(), parsing.width());
  const int64_t target = rec.target();
  auto square = pad_to_square(parsing.labels.unsqueeze(0), rec).squeeze(0);
  return ParsingMap{resize_nearest(square, target, target).contiguous(), parsing.num_classes};
}

CropResult crop_foreground(const Frame& frame, const ParsingMap& parsing, std::optional<int64_t> margin,
                           int64_t target) {
  check_frame(frame, "crop_foreground");
  check_parsing(parsing, "crop_foreground");
  if (frame.height() != parsing.height() || frame.width() != parsing.width()) {
    throw InvalidArgument("crop_foreground: frame and parsing sizes differ");
  }
  if (margin && *margin < 0) throw InvalidArgument("crop_foreground: negative margin");
  const auto fg = parsing.labels.ne(0);
  const auto rows = torch::nonzero(fg.any(1)).flatten();
  const auto cols = torch::nonzero(fg.any(0)).flatten();
  if (rows.numel() == 0) throw NoForeground("crop_foreground: parsing map has no foreground");
  const int64_t top = rows.min().item<int64_t>();
  const int64_t bottom = rows.max().item<int64_t>() + 1;
  const int64_t left = cols.min().item<int64_t>();
  const int64_t right = cols.max().item<int64_t>() + 1;
  const int64_t m = margin.value_or(default_margin(bottom - top, right - left));
  const auto rec = make_crop_record(top - m, left - m, bottom + m, right + m, frame.height(),
                                    frame.width(), target);
  return CropResult{crop_with_record(frame, rec), crop_parsing_with_record(parsing, rec), rec};
}

Frame restore_to_frame(const Frame& cropped, const CropRecord& rec) {
  check_frame(cropped, "restore_to_frame");
  rec.validate();
  if (cropped.height() != cropped.width()) throw InvalidArgument("restore_to_frame: crop must be square");
  const int64_t side = rec.side();
  auto square = resize_bilinear(cropped.rgb, side, side, false).clamp(0.0, 1.0);
  return Frame{unpad_to_canvas(square, rec).contiguous()};
}

torch::Tensor restore_mask(const torch::Tensor& mask, const CropRecord& rec) {
  rec.validate();
  const int64_t side = rec.side();
  auto m = mask.dim() == 2 ? mask.unsqueeze(0) : mask;
  auto square = resize_bilinear(m.to(torch::kFloat32), side, side, false).clamp(0.0, 1.0);
  return unpad_to_canvas(square, rec).squeeze(0).contiguous();
}

ParsingMap restore_parsing(const ParsingMap& cropped, const CropRecord& rec) {
  rec.validate();
  const int64_t side = rec.side();
  auto square = resize_nearest(cropped.labels, side, side).unsqueeze(0);
  return ParsingMap{unpad_to_canvas(square, rec).squeeze(0).contiguous(), cropped.num_classes};
}

CropRecord crop_record_from_pose(const PoseFrame& pose, int64_t source_h, int64_t source_w,
                                 double relative_margin, int64_t target) {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  bool any = false;
  for (const Keypoint& kp : pose) {
    if (!kp.detected()) continue;
    any = true;
    x0 = std::min(x0, kp.x);
    y0 = std::min(y0, kp.y);
    x1 = std::max(x1, kp.x);
    y1 = std::max(y1, kp.y);
  }
  if (!any) throw NoForeground("crop_record_from_pose: no detected keypoints");
  const double extent = std::max({x1 - x0, y1 - y0, 1.0});
  const double m = relative_margin * extent;
  return make_crop_record(static_cast<int64_t>(std::floor(y0 - m)), static_cast<int64_t>(std::floor(x0 - m)),
                          static_cast<int64_t>(std::ceil(y1 + m)) + 1, static_cast<int64_t>(std::ceil(x1 + m)) + 1,
                          source_h, source_w, target);
}

PoseFrame pose_to_working(const PoseFrame& pose, const CropRecord& rec) {
  PoseFrame out = pose;
  for (Keypoint& kp : out) {
    const auto [x, y] = rec.to_working(kp.x, kp.y);
    kp.x = x;
    kp.y = y;
  }
  return out;
}

Frame extract_foreground(const Frame& frame, const ParsingMap& parsing) {
  check_frame(frame, "extract_foreground");
  if (frame.height() != parsing.height() || frame.width() != parsing.width()) {
    throw InvalidArgument("extract_foreground: frame and parsing sizes differ");
  }
  return Frame{frame.rgb * parsing.foreground_mask().unsqueeze(0)};
}

Frame composite(const Frame& fg, const Frame& bg, const torch::Tensor& mask) {
  check_frame(fg, "composite");
  check_frame(bg, "composite");
  if (!fg.rgb.sizes().equals(bg.rgb.sizes())) throw InvalidArgument("composite: fg/bg shape mismatch");
  auto m = mask.dim() == 2 ? mask.unsqueeze(0) : mask;
  if (m.dim() != 3 || m.size(0) != 1 || m.size(1) != fg.height() || m.size(2) != fg.width()) {
    throw InvalidArgument("composite: mask shape mismatch");
  }
  return Frame{fg.rgb * m + bg.rgb * (1.0 - m)};
}

torch::Tensor composite(const torch::Tensor& fg, const torch::Tensor& bg, const torch::Tensor& mask) {
  if (!fg.sizes().equals(bg.sizes()) || mask.dim() != 4 || mask.size(1) != 1 ||
      mask.size(0) != fg.size(0) || mask.size(2) != fg.size(2) || mask.size(3) != fg.size(3)) {
    throw InvalidArgument("composite: shape mismatch");
  }
  return fg * mask + bg * (1.0 - mask);
}

}  // namespace cpf
