#pragma once

#include <cmath>
#include <limits>
#include <random>

#include "cpf/correspondence.hpp"
#include "cpf/flow_stage.hpp"
#include "cpf/foreground_stage.hpp"
#include "cpf/fusion_stage.hpp"
#include "cpf/parsing_stage.hpp"
#include "cpf/synth.hpp"

namespace cpf::testing {

// Axis-aligned square [x0, x0 + side] x [y0, y0 + side] as two triangles with ids 2k, 2k+1.
inline std::vector<Triangle2D> square_faces(int k, double x0, double y0, double side, double depth) {
  const Point2 a{x0, y0}, b{x0 + side, y0}, c{x0 + side, y0 + side}, d{x0, y0 + side};
  return {Triangle2D{2 * k, {a, b, c}, depth, {Point2{0, 0}, Point2{1, 0}, Point2{1, 1}}, 1},
          Triangle2D{2 * k + 1, {a, c, d}, depth, {Point2{0, 0}, Point2{1, 1}, Point2{0, 1}}, 1}};
}

inline std::array<float, 3> wavy_texture(const Triangle2D&, double u, double v) {
  const float a = static_cast<float>(0.5 + 0.4 * std::sin(9.0 * u) * std::cos(7.0 * v));
  return {a, static_cast<float>(u), static_cast<float>(v)};
}

// Nearest face containing q by exhaustive search; first listed wins ties.
inline int brute_nearest_face(const std::vector<Triangle2D>& faces, Point2 q) {
  int best = -1;
  double depth = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < faces.size(); ++i) {
    const auto b = barycentric(faces[i].vertices, q);
    if (!b || (*b)[0] < -1e-9 || (*b)[1] < -1e-9 || (*b)[2] < -1e-9) continue;
    if (faces[i].depth < depth) {
      depth = faces[i].depth;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// Per-pixel visibility labels of a scene by brute-force point tests in both views.
inline torch::Tensor brute_force_visibility(const CorrespondenceScene& scene) {
  auto labels = torch::zeros({scene.height, scene.width}, torch::kLong);
  for (int64_t y = 0; y < scene.height; ++y) {
    for (int64_t x = 0; x < scene.width; ++x) {
      const Point2 p{static_cast<double>(x), static_cast<double>(y)};
      const int f = brute_nearest_face(scene.target_faces, p);
      if (f < 0) continue;
      const auto& tf = scene.target_faces[static_cast<size_t>(f)];
      const auto b = *barycentric(tf.vertices, p);
      size_t s = 0;
      while (scene.source_faces[s].id != tf.id) ++s;
      const auto& sv = scene.source_faces[s].vertices;
      const Point2 q{b[0] * sv[0].x + b[1] * sv[1].x + b[2] * sv[2].x, b[0] * sv[0].y + b[1] * sv[1].y + b[2] * sv[2].y};
      labels[y][x] = brute_nearest_face(scene.source_faces, q) == static_cast<int>(s) ? kVisible : kInvisible;
    }
  }
  return labels;
}

// Back square moving by (+2, +1) target -> source, partly hidden in the source by a
// front square that moves out of the way in the target. The hidden patch is 9 x 9.
inline CorrespondenceScene occlusion_scene() {
  CorrespondenceScene scene;
  scene.height = 48;
  scene.width = 48;
  for (const auto& f : square_faces(0, 12, 11, 20, 5.0)) scene.source_faces.push_back(f);
  for (const auto& f : square_faces(1, 16, 14, 8, 1.0)) scene.source_faces.push_back(f);
  for (const auto& f : square_faces(0, 10, 10, 20, 5.0)) scene.target_faces.push_back(f);
  for (const auto& f : square_faces(1, 36, 36, 8, 1.0)) scene.target_faces.push_back(f);
  return scene;
}

// Appearance in one puppet pose, target in another, on a size x size canvas.
struct PuppetPair {
  PuppetPose source;
  PuppetPose target;
  RenderResult source_render;
  RenderResult target_render;
  OracleResult oracle;
};

inline PuppetPair puppet_pair(int64_t size, uint64_t seed) {
  std::mt19937_64 rng(seed);
  PuppetPair p;
  p.source = random_pose(rng, size, size);
  p.target = random_pose(rng, size, size);
  const PuppetStyle style = make_puppet_style(seed);
  p.source_render = render_puppet(p.source, style, size, size);
  p.target_render = render_puppet(p.target, style, size, size);
  p.oracle = oracle_flow(puppet_scene(p.source, p.target, size, size));
  return p;
}

inline ParsingSample puppet_parsing_sample(int64_t size, double sigma, uint64_t seed) {
  const PuppetPair p = puppet_pair(size, seed);
  return ParsingSample{p.source_render.parsing, rasterize_pose(puppet_keypoints(p.target), size, size, sigma),
                       p.target_render.parsing};
}

inline FlowSample puppet_flow_sample(int64_t size, double sigma, uint64_t seed) {
  const PuppetPair p = puppet_pair(size, seed);
  return FlowSample{rasterize_pose(puppet_keypoints(p.source), size, size, sigma),
                    rasterize_pose(puppet_keypoints(p.target), size, size, sigma), p.oracle.flow, p.oracle.visibility};
}

inline ForegroundSample puppet_foreground_sample(int64_t size, uint64_t seed) {
  const PuppetPair p = puppet_pair(size, seed);
  return ForegroundSample{p.source_render.rgb, p.target_render.parsing, p.oracle.flow, p.oracle.visibility,
                          p.target_render.rgb};
}

inline FusionClip puppet_fusion_clip(int num_frames, int64_t height, int64_t width, uint64_t seed) {
  const SyntheticVideo v = make_synthetic_video(num_frames, height, width, seed);
  FusionClip clip;
  clip.background = v.background;
  clip.foregrounds = v.foregrounds;
  clip.targets = v.frames;
  for (const auto& m : v.masks) clip.masks.push_back(m.gt(0.5).to(torch::kFloat32));
  return clip;
}

}  // namespace cpf::testing
