#pragma once

#include <torch/torch.h>

#include <array>
#include <functional>
#include <optional>
#include <vector>

#include "cpf/image.hpp"

namespace cpf {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

// Textured triangle in one view. Faces with the same `id` in the source and
// target lists are the same surface patch seen in two poses. Smaller depth is
// nearer the camera.
struct Triangle2D {
  int id = 0;
  std::array<Point2, 3> vertices{};
  double depth = 0.0;
  std::array<Point2, 3> uv{};
  int label = 1;
};

// Two views of one set of faces on a common canvas. "source" is the view the
// appearance is taken from, "target" the view being synthesized.
struct CorrespondenceScene {
  std::vector<Triangle2D> source_faces;
  std::vector<Triangle2D> target_faces;
  int64_t height = 0;
  int64_t width = 0;
};

enum Visibility : int64_t { kBackground = 0, kVisible = 1, kInvisible = 2 };

// Displacements [2, H, W] (du, dv) in pixels, target -> source: target pixel p
// samples the source image at p + flow(p).
struct FlowField {
  torch::Tensor flow;

  static FlowField zeros(int64_t height, int64_t width);
  int64_t height() const { return flow.size(1); }
  int64_t width() const { return flow.size(2); }
};

// Labels [H, W] int64 in {kBackground, kVisible, kInvisible}.
struct VisibilityMap {
  torch::Tensor labels;

  static VisibilityMap all_visible(int64_t height, int64_t width);
  torch::Tensor visible_mask() const;    // float [H, W]
  torch::Tensor invisible_mask() const;  // float [H, W]
};

struct OracleResult {
  FlowField flow;
  VisibilityMap visibility;
  int skipped_faces = 0;
};

// Barycentric coordinates of p in `tri`, or nullopt when the triangle is
// degenerate. Coverage is |area| > kDegenerateArea and all weights >= -tol.
std::optional<std::array<double, 3>> barycentric(const std::array<Point2, 3>& tri, Point2 p);
inline constexpr double kDegenerateArea = 1e-12;
bool is_degenerate(const Triangle2D& face);

// Per-pixel z-buffer over faces: index into `faces` of the nearest covering
// face (first listed wins ties), -1 where uncovered. Pixel (x, y) is sampled
// at its integer coordinates.
std::vector<int> rasterize_face_index(const std::vector<Triangle2D>& faces, int64_t height, int64_t width);

// Ground-truth flow and visibility for a scene. Target pixels covered by face f
// map barycentrically to f in the source view; they are visible when f is the
// nearest source face at that point and invisible otherwise (zero flow).
// Degenerate faces are skipped with a warning.
OracleResult oracle_flow(const CorrespondenceScene& scene);

using TextureFn = std::function<std::array<float, 3>(const Triangle2D& face, double u, double v)>;

struct RenderResult {
  Frame rgb;                // zero where uncovered
  ParsingMap parsing;       // face labels, 0 where uncovered
  torch::Tensor coverage;   // float [H, W] in {0, 1}
};

RenderResult render_faces(const std::vector<Triangle2D>& faces, int64_t height, int64_t width,
                          const TextureFn& texture, int num_classes = 20);

}  // namespace cpf
