#include <gtest/gtest.h>

#include <cmath>

#include "cpf/errors.hpp"
#include "cpf/region_ops.hpp"
#include "cpf/synth.hpp"
#include "test_util.hpp"

namespace cpf {
namespace {

using torch::indexing::Slice;

ParsingMap box_parsing(int64_t h, int64_t w, int64_t top, int64_t left, int64_t bottom, int64_t right) {
  auto labels = torch::zeros({h, w}, torch::kLong);
  labels.index_put_({Slice(top, bottom), Slice(left, right)}, 5);
  return ParsingMap{labels, 20};
}

TEST(RegionCrop, TightBoxAndScale) {
  const auto frame = testing::random_frame(300, 320, 1);
  const auto res = crop_foreground(frame, box_parsing(300, 320, 100, 100, 200, 200), 0, 448);
  EXPECT_EQ(res.record.top, 100);
  EXPECT_EQ(res.record.left, 100);
  EXPECT_EQ(res.record.bottom, 200);
  EXPECT_EQ(res.record.right, 200);
  EXPECT_DOUBLE_EQ(res.record.scale, 448.0 / 100.0);
  EXPECT_EQ(res.frame.height(), 448);
  EXPECT_EQ(res.frame.width(), 448);
  EXPECT_EQ(res.parsing.height(), 448);
}

TEST(RegionCrop, NonSquarePadsSymmetrically) {
  const auto frame = testing::random_frame(300, 300, 2);
  const auto res = crop_foreground(frame, box_parsing(300, 300, 100, 100, 200, 150), 0, 448);
  EXPECT_EQ(res.record.side(), 100);
  EXPECT_EQ(res.record.pad_left, 25);
  EXPECT_EQ(res.record.pad_top, 0);
  // Padding columns are black.
  const int64_t pad_px = static_cast<int64_t>(25 * 4.48) - 2;
  EXPECT_EQ(res.frame.rgb.index({Slice(), Slice(), Slice(0, pad_px)}).abs().max().item<double>(), 0.0);
  EXPECT_EQ(res.parsing.labels.index({Slice(), Slice(0, pad_px)}).abs().max().item<int64_t>(), 0);
}

TEST(RegionCrop, DefaultMarginIsTenPercent) {
  const auto frame = testing::random_frame(400, 400, 3);
  const auto res = crop_foreground(frame, box_parsing(400, 400, 100, 120, 200, 170));
  EXPECT_EQ(default_margin(100, 50), 10);
  EXPECT_EQ(res.record.top, 90);
  EXPECT_EQ(res.record.left, 110);
  EXPECT_EQ(res.record.bottom, 210);
  EXPECT_EQ(res.record.right, 180);
}

TEST(RegionCrop, EmptyForegroundThrows) {
  const auto frame = testing::random_frame(32, 32, 4);
  EXPECT_THROW(crop_foreground(frame, ParsingMap{torch::zeros({32, 32}, torch::kLong), 20}), NoForeground);
  EXPECT_THROW(crop_foreground(frame, box_parsing(32, 32, 1, 1, 5, 5), -1), InvalidArgument);
}

TEST(RegionRestore, IdentityRecord) {
  const auto frame = testing::random_frame(64, 64, 5);
  const auto rec = make_crop_record(0, 0, 64, 64, 64, 64, 64);
  EXPECT_DOUBLE_EQ(rec.scale, 1.0);
  const auto back = restore_to_frame(crop_with_record(frame, rec), rec);
  EXPECT_EQ(testing::max_abs_diff(back.rgb, frame.rgb), 0.0);
}

TEST(RegionRestore, SinglePixelLandsAtPredictedSourceCoordinates) {
  const auto rec = make_crop_record(50, 60, 150, 160, 200, 300, 200);
  for (auto [wx, wy] : std::vector<std::pair<int64_t, int64_t>>{{41, 61}, {150, 20}, {7, 190}}) {
    Frame crop = Frame::zeros(200, 200);
    crop.rgb.index_put_({Slice(), wy, wx}, 1.0);
    const auto restored = restore_to_frame(crop, rec);
    const auto flat = restored.rgb[0].flatten().argmax().item<int64_t>();
    const auto [sx, sy] = rec.to_source(static_cast<double>(wx), static_cast<double>(wy));
    EXPECT_EQ(flat / 300, static_cast<int64_t>(std::lround(sy)));
    EXPECT_EQ(flat % 300, static_cast<int64_t>(std::lround(sx)));
  }
}

TEST(RegionRestore, CoordinateMapsAreInverse) {
  const auto rec = make_crop_record(13, 40, 97, 101, 120, 160, 448);
  for (double x : {0.0, 17.5, 99.0}) {
    for (double y : {3.0, 50.25}) {
      const auto [wx, wy] = rec.to_working(x, y);
      const auto [sx, sy] = rec.to_source(wx, wy);
      EXPECT_NEAR(sx, x, 1e-9);
      EXPECT_NEAR(sy, y, 1e-9);
    }
  }
}

TEST(RegionRestore, ForegroundRoundTripWithinTolerance) {
  const auto pose = centred_pose(160, 240);
  const auto render = render_puppet(pose, make_puppet_style(9), 160, 240);
  const Frame frame = composite(render.rgb, synthetic_background(160, 240, 9), render.coverage);
  const auto res = crop_foreground(frame, render.parsing, std::nullopt, 448);
  const auto restored = restore_to_frame(res.frame, res.record);
  const auto mask = render.coverage.unsqueeze(0).expand({3, 160, 240});
  const double mae = ((restored.rgb - frame.rgb).abs() * mask).sum().item<double>() / mask.sum().item<double>();
  EXPECT_LE(mae, 2.0 / 255.0);
}

TEST(RegionRestore, RecropIsIdempotent) {
  const auto render = render_puppet(centred_pose(120, 90), make_puppet_style(6), 120, 90);
  const Frame frame = composite(render.rgb, synthetic_background(120, 90, 6), render.coverage);
  const auto rec = make_crop_record(10, 5, 110, 85, 120, 90, 64);
  const auto crop = crop_with_record(frame, rec);
  const auto again = crop_with_record(restore_to_frame(crop, rec), rec);
  EXPECT_LE((again.rgb - crop.rgb).abs().mean().item<double>(), 2.0 / 255.0);
}

TEST(RegionRestore, ParsingRoundTripKeepsLabels) {
  const auto parsing = box_parsing(100, 100, 20, 30, 80, 60);
  const auto frame = testing::random_frame(100, 100, 7);
  const auto res = crop_foreground(frame, parsing, 0, 60);
  const auto back = restore_parsing(res.parsing, res.record);
  EXPECT_TRUE(torch::equal(back.labels, parsing.labels));
}

TEST(RegionRestore, InconsistentRecordRejected) {
  CropRecord rec = make_crop_record(0, 0, 10, 10, 20, 20, 10);
  rec.bottom = 30;
  EXPECT_THROW(restore_to_frame(Frame::zeros(10, 10), rec), InvalidArgument);
  rec = make_crop_record(0, 0, 10, 10, 20, 20, 10);
  rec.scale = 0.0;
  EXPECT_THROW(rec.validate(), InvalidArgument);
}

TEST(RegionRecord, JsonRoundTripIsLossless) {
  CropRecord rec = make_crop_record(17, 3, 229, 190, 720, 1280, 448);
  rec.scale = 448.0 / 212.0;
  const auto dir = testing::fresh_dir("region_json");
  save_crop_record(rec, dir / "r.json");
  const auto back = load_crop_record(dir / "r.json");
  EXPECT_EQ(back, rec);
  EXPECT_EQ(back.scale, rec.scale);
}

TEST(RegionComposite, Endpoints) {
  const auto fg = testing::random_frame(8, 9, 8);
  const auto bg = testing::random_frame(8, 9, 9);
  EXPECT_TRUE(torch::equal(composite(fg, bg, torch::ones({8, 9})).rgb, fg.rgb));
  EXPECT_TRUE(torch::equal(composite(fg, bg, torch::zeros({8, 9})).rgb, bg.rgb));
  const auto half = composite(Frame{torch::ones({3, 8, 9})}, Frame{torch::zeros({3, 8, 9})}, torch::full({8, 9}, 0.5));
  EXPECT_TRUE(torch::equal(half.rgb, torch::full({3, 8, 9}, 0.5)));
}

TEST(RegionComposite, ConvexBoundsAndShapeErrors) {
  const auto fg = testing::random_frame(16, 16, 10);
  const auto bg = testing::random_frame(16, 16, 11);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(12);
  const auto out = composite(fg, bg, torch::rand({16, 16}, gen)).rgb;
  EXPECT_TRUE(out.ge(torch::minimum(fg.rgb, bg.rgb) - 1e-7).all().item<bool>());
  EXPECT_TRUE(out.le(torch::maximum(fg.rgb, bg.rgb) + 1e-7).all().item<bool>());
  EXPECT_THROW(composite(fg, testing::random_frame(16, 15, 1), torch::ones({16, 16})), InvalidArgument);
  EXPECT_THROW(composite(fg, bg, torch::ones({15, 16})), InvalidArgument);
}

TEST(RegionResize, NearestKeepsLabelSet) {
  auto labels = torch::randint(0, 20, {37, 23}, torch::kLong);
  const auto up = resize_nearest(labels, 100, 61);
  EXPECT_EQ(up.scalar_type(), torch::kLong);
  EXPECT_TRUE(torch::isin(up.flatten(), labels.flatten()).all().item<bool>());
  EXPECT_TRUE(torch::equal(resize_nearest(resize_nearest(labels, 74, 46), 37, 23), labels));
}

}  // namespace
}  // namespace cpf
