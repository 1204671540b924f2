#include "cpf/synth.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "cpf/errors.hpp"
#include "cpf/pipeline.hpp"
#include "cpf/region_ops.hpp"

namespace cpf {

namespace {

namespace fs = std::filesystem;

enum Part : int {
  kHead = 0, kTorso, kRUpperArm, kRLowerArm, kLUpperArm, kLLowerArm, kRUpperLeg, kRLowerLeg, kLUpperLeg, kLLowerLeg
};

struct PartSpec {
  int from;
  int to;
  double half_width;  // in units of PuppetPose::scale
  double depth;
  int label;
};

// Joint indices beyond the keypoint list used only for geometry.
constexpr int kHeadTop = kNumJoints;
constexpr int kMidHip = kNumJoints + 1;

const std::array<PartSpec, kPuppetParts>& part_specs() {
  static const std::array<PartSpec, kPuppetParts> specs = {{
      {kHeadTop, 1, 0.17, 1.0, 13},
      {1, kMidHip, 0.30, 2.0, 5},
      {2, 3, 0.08, 0.1, 15},
      {3, 4, 0.07, 0.0, 15},
      {5, 6, 0.08, 3.1, 14},
      {6, 7, 0.07, 3.0, 14},
      {8, 9, 0.10, 2.4, 17},
      {9, 10, 0.09, 2.3, 17},
      {11, 12, 0.10, 2.6, 16},
      {12, 13, 0.09, 2.5, 16},
  }};
  return specs;
}

using JointArray = std::array<Point2, kNumJoints + 2>;

JointArray all_joints(const PuppetPose& p) {
  JointArray j{};
  const double s = p.scale;
  const auto at = [&](double x, double y) { return Point2{p.cx + x * s, p.cy + y * s}; };
  const auto step = [&](Point2 from, double angle, double length, double side) {
    return Point2{from.x + side * std::sin(angle) * length * s, from.y + std::cos(angle) * length * s};
  };
  const auto& a = p.angles;
  j[1] = at(0.0, 0.0);
  j[0] = at(0.0, -0.32);
  j[14] = at(-0.07, -0.40);
  j[15] = at(0.07, -0.40);
  j[16] = at(-0.14, -0.36);
  j[17] = at(0.14, -0.36);
  j[kHeadTop] = at(0.0, -0.60);
  j[2] = at(-0.30, 0.05);
  j[5] = at(0.30, 0.05);
  j[3] = step(j[2], a[0], 0.42, -1.0);
  j[4] = step(j[3], a[0] + a[1], 0.38, -1.0);
  j[6] = step(j[5], a[2], 0.42, 1.0);
  j[7] = step(j[6], a[2] + a[3], 0.38, 1.0);
  j[8] = at(-0.17, 1.0);
  j[11] = at(0.17, 1.0);
  j[kMidHip] = at(0.0, 1.05);
  j[9] = step(j[8], a[4], 0.5, -1.0);
  j[10] = step(j[9], a[4] + a[5], 0.5, -1.0);
  j[12] = step(j[11], a[6], 0.5, 1.0);
  j[13] = step(j[12], a[6] + a[7], 0.5, 1.0);
  return j;
}

double unit_rand(uint64_t seed, uint64_t salt) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + salt);
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace

PuppetStyle make_puppet_style(uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.15, 0.95);
  PuppetStyle style;
  for (auto& c : style.colors) c = {static_cast<float>(u(rng)), static_cast<float>(u(rng)), static_cast<float>(u(rng))};
  style.stripe_phase = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
  return style;
}

std::array<Point2, kNumJoints> puppet_joints(const PuppetPose& pose) {
  const auto all = all_joints(pose);
  std::array<Point2, kNumJoints> out{};
  std::copy_n(all.begin(), kNumJoints, out.begin());
  return out;
}

PoseFrame puppet_keypoints(const PuppetPose& pose, double confidence) {
  const auto joints = puppet_joints(pose);
  PoseFrame frame{};
  for (int i = 0; i < kNumJoints; ++i) frame[i] = Keypoint{joints[i].x, joints[i].y, confidence};
  return frame;
}

std::vector<Triangle2D> puppet_faces(const PuppetPose& pose) {
  const auto j = all_joints(pose);
  std::vector<Triangle2D> faces;
  faces.reserve(2 * kPuppetParts);
  const auto& specs = part_specs();
  for (int part = 0; part < kPuppetParts; ++part) {
    const PartSpec& spec = specs[part];
    const Point2 a = j[spec.from];
    const Point2 b = j[spec.to];
    const double dx = b.x - a.x;
    const double dy = b.y - a.y;
    const double len = std::max(std::hypot(dx, dy), 1e-9);
    const double ux = dx / len;
    const double uy = dy / len;
    const double hw = spec.half_width * pose.scale;
    // Extend past both joints so neighbouring parts overlap.
    const double ext = 0.5 * hw;
    const Point2 a0{a.x - ux * ext, a.y - uy * ext};
    const Point2 b0{b.x + ux * ext, b.y + uy * ext};
    const double nx = -uy * hw;
    const double ny = ux * hw;
    const Point2 a_minus{a0.x - nx, a0.y - ny};
    const Point2 a_plus{a0.x + nx, a0.y + ny};
    const Point2 b_minus{b0.x - nx, b0.y - ny};
    const Point2 b_plus{b0.x + nx, b0.y + ny};
    Triangle2D t1{2 * part, {a_minus, a_plus, b_plus}, spec.depth, {Point2{0, 0}, Point2{1, 0}, Point2{1, 1}}, spec.label};
    Triangle2D t2{2 * part + 1, {a_minus, b_plus, b_minus}, spec.depth, {Point2{0, 0}, Point2{1, 1}, Point2{0, 1}},
                  spec.label};
    faces.push_back(t1);
    faces.push_back(t2);
  }
  return faces;
}

TextureFn puppet_texture(const PuppetStyle& style) {
  return [style](const Triangle2D& face, double u, double v) {
    const auto& base = style.colors.at(static_cast<size_t>(face.id / 2));
    const double shade = 0.7 + 0.3 * (0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * (u + 2.0 * v) + style.stripe_phase));
    return std::array<float, 3>{static_cast<float>(base[0] * shade), static_cast<float>(base[1] * shade),
                                static_cast<float>(base[2] * shade)};
  };
}

RenderResult render_puppet(const PuppetPose& pose, const PuppetStyle& style, int64_t height, int64_t width) {
  return render_faces(puppet_faces(pose), height, width, puppet_texture(style));
}

PuppetPose centred_pose(int64_t height, int64_t width) {
  PuppetPose p;
  p.scale = 0.7 * static_cast<double>(height) / 2.65;
  p.cx = 0.5 * static_cast<double>(width);
  p.cy = 0.15 * static_cast<double>(height) + 0.6 * p.scale;
  p.angles = {0.25, 0.1, 0.25, 0.1, 0.08, 0.0, 0.08, 0.0};
  return p;
}

PuppetPose animated_pose(int t, int64_t height, int64_t width, uint64_t seed) {
  PuppetPose p = centred_pose(height, width);
  const double phase = 2.0 * std::numbers::pi * unit_rand(seed, 1);
  const double w = 2.0 * std::numbers::pi / 12.0;
  const double s = std::sin(w * t + phase);
  const double c = std::cos(w * t + phase);
  p.cx += 0.04 * static_cast<double>(width) * s;
  p.angles = {0.2 + 0.7 * s, 0.3 + 0.3 * c, 0.3 - 0.4 * s, 0.2 + 0.2 * s, 0.1 + 0.25 * s, 0.15 * (1 + c), 0.1 - 0.25 * s,
              0.15 * (1 - c)};
  return p;
}

PuppetPose random_pose(std::mt19937_64& rng, int64_t height, int64_t width) {
  PuppetPose p = centred_pose(height, width);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  p.cx += 0.05 * static_cast<double>(width) * jitter(rng);
  p.cy += 0.03 * static_cast<double>(height) * jitter(rng);
  p.scale *= 1.0 + 0.05 * jitter(rng);
  p.angles = {0.3 + 0.8 * jitter(rng), 0.3 + 0.3 * jitter(rng), 0.3 + 0.8 * jitter(rng), 0.3 + 0.3 * jitter(rng),
              0.1 + 0.25 * jitter(rng), 0.15 + 0.15 * jitter(rng), 0.1 + 0.25 * jitter(rng), 0.15 + 0.15 * jitter(rng)};
  return p;
}

CorrespondenceScene puppet_scene(const PuppetPose& source, const PuppetPose& target, int64_t height, int64_t width) {
  return CorrespondenceScene{puppet_faces(source), puppet_faces(target), height, width};
}

Frame synthetic_background(int64_t height, int64_t width, uint64_t seed) {
  const double p0 = 2.0 * std::numbers::pi * unit_rand(seed, 11);
  const double p1 = 2.0 * std::numbers::pi * unit_rand(seed, 12);
  auto ys = torch::linspace(0.0, 1.0, height, torch::kFloat64).view({height, 1});
  auto xs = torch::linspace(0.0, 1.0, width, torch::kFloat64).view({1, width});
  auto r = 0.35 + 0.25 * xs + 0.1 * torch::sin(6.0 * ys + p0);
  auto g = 0.45 + 0.2 * ys + 0.1 * torch::cos(5.0 * xs + p1);
  auto b = 0.55 - 0.2 * xs * ys + 0.05 * torch::sin(9.0 * (xs + ys));
  auto rgb = torch::stack({r.expand({height, width}), g.expand({height, width}), b.expand({height, width})});
  return Frame{rgb.to(torch::kFloat32).clamp(0.0, 1.0).contiguous()};
}

SyntheticVideo make_synthetic_video(int num_frames, int64_t height, int64_t width, uint64_t seed) {
  if (num_frames <= 0) throw InvalidArgument("make_synthetic_video: num_frames must be positive");
  SyntheticVideo video;
  video.background = synthetic_background(height, width, seed);
  const PuppetStyle style = make_puppet_style(seed);
  video.poses.fps = 30.0;
  for (int t = 0; t < num_frames; ++t) {
    const PuppetPose pose = animated_pose(t, height, width, seed);
    const RenderResult r = render_puppet(pose, style, height, width);
    video.puppet.push_back(pose);
    video.frames.push_back(composite(r.rgb, video.background, r.coverage));
    video.foregrounds.push_back(r.rgb);
    video.parsing.push_back(r.parsing);
    video.masks.push_back(r.coverage);
    // Confidence varies so the appearance frame is well defined.
    const double conf = 0.8 + 0.15 * unit_rand(seed, 100 + static_cast<uint64_t>(t));
    video.poses.frames.push_back(puppet_keypoints(pose, conf));
  }
  return video;
}

FixturePaths write_synthetic_fixture(const fs::path& dir, const FixtureOptions& o) {
  if (o.num_videos < 2) throw InvalidArgument("write_synthetic_fixture: need at least two videos");
  fs::create_directories(dir);
  FixturePaths paths;
  paths.root = dir;
  DatasetManifest manifest;
  std::vector<SyntheticVideo> videos;
  for (int v = 0; v < o.num_videos; ++v) {
    const std::string name = "video" + std::to_string(v);
    const fs::path vdir = dir / "videos" / name;
    SyntheticVideo video = make_synthetic_video(o.num_frames, o.height, o.width, o.seed + static_cast<uint64_t>(v));
    save_frame_dir(video.frames, vdir / "frames");
    fs::create_directories(vdir / "parsing");
    for (size_t t = 0; t < video.parsing.size(); ++t) save_parsing_png(video.parsing[t], vdir / "parsing" / frame_filename(t));
    save_keypoints(video.poses, vdir / "keypoints.txt");
    save_frame_png(video.background, vdir / "background.png");
    VideoEntry entry;
    entry.name = name;
    entry.frames = fs::path("videos") / name / "frames";
    entry.parsing = fs::path("videos") / name / "parsing";
    entry.keypoints = fs::path("videos") / name / "keypoints.txt";
    entry.background = fs::path("videos") / name / "background.png";
    entry.width = o.width;
    entry.height = o.height;
    entry.split = v + 1 == o.num_videos ? "test" : "train";
    manifest.videos.push_back(entry);
    videos.push_back(std::move(video));
  }
  paths.manifest = dir / "manifest.json";
  save_manifest(manifest, paths.manifest);

  const SyntheticVideo& app = videos.front();
  const size_t idx = select_appearance_frame(app.poses);
  paths.appearance = dir / "appearance.png";
  paths.appearance_parsing = dir / "appearance_parsing.png";
  paths.appearance_pose = dir / "appearance_pose.txt";
  paths.source_poses = dir / "source_poses.txt";
  paths.background = dir / "background.png";
  save_frame_png(app.frames[idx], paths.appearance);
  save_parsing_png(app.parsing[idx], paths.appearance_parsing);
  save_keypoints(PoseSequence{{app.poses.frames[idx]}, app.poses.fps}, paths.appearance_pose);
  save_keypoints(videos.back().poses, paths.source_poses);
  save_frame_png(videos.back().background, paths.background);

  PipelineConfig cfg;
  cfg.manifest = "manifest.json";
  cfg.prepared_dir = "prepared";
  cfg.models_dir = "models";
  cfg.working_size = o.working_size;
  cfg.seed = o.seed;
  cfg.flow_scenes = 4;
  cfg.parsing.image_size = o.working_size;
  cfg.parsing.base_width = 8;
  cfg.parsing.num_res_blocks = 1;
  cfg.parsing.pose_sigma = 2.0;
  cfg.parsing.max_steps = o.train_steps;
  cfg.flow.image_size = o.working_size;
  cfg.flow.base_width = 8;
  cfg.flow.depth = 3;
  cfg.flow.pose_sigma = 2.0;
  cfg.flow.batch_size = 2;
  cfg.flow.max_steps = o.train_steps;
  cfg.foreground.image_size = o.working_size;
  cfg.foreground.base_width = 8;
  cfg.foreground.levels = 3;
  cfg.foreground.disc_base_width = 8;
  cfg.foreground.disc_layers = 2;
  cfg.foreground.batch_size = 2;
  cfg.foreground.max_steps = o.train_steps;
  cfg.fusion.base_width = 8;
  cfg.fusion.num_res_blocks = 1;
  cfg.fusion.max_steps = o.train_steps;
  paths.config = dir / "config.json";
  std::ofstream(paths.config) << nlohmann::json(cfg).dump(2) << '\n';
  return paths;
}

}  // namespace cpf
