#include "cpf/correspondence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "cpf/errors.hpp"

namespace cpf {

namespace {

constexpr double kInsideTol = 1e-9;

double signed_area2(const std::array<Point2, 3>& t) {
  return (t[1].x - t[0].x) * (t[2].y - t[0].y) - (t[2].x - t[0].x) * (t[1].y - t[0].y);
}

bool inside(const std::array<double, 3>& b) {
  return b[0] >= -kInsideTol && b[1] >= -kInsideTol && b[2] >= -kInsideTol;
}

struct PixelBounds {
  int64_t x0, x1, y0, y1;
};

PixelBounds bounds(const std::array<Point2, 3>& t, int64_t height, int64_t width) {
  const double minx = std::min({t[0].x, t[1].x, t[2].x});
  const double maxx = std::max({t[0].x, t[1].x, t[2].x});
  const double miny = std::min({t[0].y, t[1].y, t[2].y});
  const double maxy = std::max({t[0].y, t[1].y, t[2].y});
  return {std::max<int64_t>(0, static_cast<int64_t>(std::ceil(minx - kInsideTol))),
          std::min<int64_t>(width - 1, static_cast<int64_t>(std::floor(maxx + kInsideTol))),
          std::max<int64_t>(0, static_cast<int64_t>(std::ceil(miny - kInsideTol))),
          std::min<int64_t>(height - 1, static_cast<int64_t>(std::floor(maxy + kInsideTol)))};
}

// Nearest face containing point p (exact point query), -1 if none.
int nearest_face_at(const std::vector<Triangle2D>& faces, Point2 p) {
  int best = -1;
  double best_depth = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < faces.size(); ++i) {
    if (faces[i].depth >= best_depth) continue;
    const auto b = barycentric(faces[i].vertices, p);
    if (b && inside(*b)) {
      best = static_cast<int>(i);
      best_depth = faces[i].depth;
    }
  }
  return best;
}

}  // namespace

FlowField FlowField::zeros(int64_t height, int64_t width) {
  return FlowField{torch::zeros({2, height, width}, torch::kFloat32)};
}

VisibilityMap VisibilityMap::all_visible(int64_t height, int64_t width) {
  return VisibilityMap{torch::full({height, width}, static_cast<int64_t>(kVisible), torch::kInt64)};
}

torch::Tensor VisibilityMap::visible_mask() const { return labels.eq(kVisible).to(torch::kFloat32); }
torch::Tensor VisibilityMap::invisible_mask() const { return labels.eq(kInvisible).to(torch::kFloat32); }

std::optional<std::array<double, 3>> barycentric(const std::array<Point2, 3>& t, Point2 p) {
  const double area = signed_area2(t);
  if (std::abs(area) <= kDegenerateArea) return std::nullopt;
  const double w0 = ((t[1].x - p.x) * (t[2].y - p.y) - (t[2].x - p.x) * (t[1].y - p.y)) / area;
  const double w1 = ((t[2].x - p.x) * (t[0].y - p.y) - (t[0].x - p.x) * (t[2].y - p.y)) / area;
  return std::array<double, 3>{w0, w1, 1.0 - w0 - w1};
}

bool is_degenerate(const Triangle2D& face) { return std::abs(signed_area2(face.vertices)) <= kDegenerateArea; }

std::vector<int> rasterize_face_index(const std::vector<Triangle2D>& faces, int64_t height, int64_t width) {
  std::vector<int> index(static_cast<size_t>(height * width), -1);
  std::vector<double> zbuf(index.size(), std::numeric_limits<double>::infinity());
  for (size_t f = 0; f < faces.size(); ++f) {
    if (is_degenerate(faces[f])) continue;
    const auto bb = bounds(faces[f].vertices, height, width);
    for (int64_t y = bb.y0; y <= bb.y1; ++y) {
      for (int64_t x = bb.x0; x <= bb.x1; ++x) {
        const auto b = barycentric(faces[f].vertices, {static_cast<double>(x), static_cast<double>(y)});
        if (!b || !inside(*b)) continue;
        const auto k = static_cast<size_t>(y * width + x);
        if (faces[f].depth < zbuf[k]) {
          zbuf[k] = faces[f].depth;
          index[k] = static_cast<int>(f);
        }
      }
    }
  }
  return index;
}

OracleResult oracle_flow(const CorrespondenceScene& scene) {
  if (scene.height <= 0 || scene.width <= 0) throw InvalidArgument("oracle_flow: empty canvas");
  std::set<int> source_ids, target_ids;
  std::map<int, size_t> source_by_id;
  for (size_t i = 0; i < scene.source_faces.size(); ++i) {
    const auto& face = scene.source_faces[i];
    if (!std::isfinite(face.depth)) throw InvalidArgument("oracle_flow: non-finite depth");
    if (!source_by_id.emplace(face.id, i).second) throw InvalidArgument("oracle_flow: duplicate source face id");
    source_ids.insert(face.id);
  }
  for (const auto& face : scene.target_faces) {
    if (!std::isfinite(face.depth)) throw InvalidArgument("oracle_flow: non-finite depth");
    if (!target_ids.insert(face.id).second) throw InvalidArgument("oracle_flow: duplicate target face id");
  }
  if (source_ids != target_ids) throw InvalidArgument("oracle_flow: source and target face ids differ");

  // Degenerate faces leave both views so they can neither cover nor occlude.
  OracleResult result{FlowField::zeros(scene.height, scene.width),
                      VisibilityMap{torch::zeros({scene.height, scene.width}, torch::kInt64)}, 0};
  std::set<int> skipped;
  for (const auto& face : scene.source_faces) if (is_degenerate(face)) skipped.insert(face.id);
  for (const auto& face : scene.target_faces) if (is_degenerate(face)) skipped.insert(face.id);
  for (int id : skipped) warn("oracle_flow: skipping degenerate face " + std::to_string(id));
  result.skipped_faces = static_cast<int>(skipped.size());

  std::vector<Triangle2D> source, target;
  for (const auto& face : scene.source_faces) if (!skipped.count(face.id)) source.push_back(face);
  for (const auto& face : scene.target_faces) if (!skipped.count(face.id)) target.push_back(face);
  source_by_id.clear();
  for (size_t i = 0; i < source.size(); ++i) source_by_id.emplace(source[i].id, i);

  const auto coverage = rasterize_face_index(target, scene.height, scene.width);
  auto flow = result.flow.flow.accessor<float, 3>();
  auto vis = result.visibility.labels.accessor<int64_t, 2>();
  for (int64_t y = 0; y < scene.height; ++y) {
    for (int64_t x = 0; x < scene.width; ++x) {
      const int f = coverage[static_cast<size_t>(y * scene.width + x)];
      if (f < 0) continue;
      const Triangle2D& tface = target[static_cast<size_t>(f)];
      const Point2 p{static_cast<double>(x), static_cast<double>(y)};
      const auto b = *barycentric(tface.vertices, p);
      const size_t s = source_by_id.at(tface.id);
      const auto& sv = source[s].vertices;
      const Point2 q{b[0] * sv[0].x + b[1] * sv[1].x + b[2] * sv[2].x,
                     b[0] * sv[0].y + b[1] * sv[1].y + b[2] * sv[2].y};
      if (nearest_face_at(source, q) == static_cast<int>(s)) {
        vis[y][x] = kVisible;
        const auto& tv = tface.vertices;
        flow[0][y][x] = static_cast<float>(b[0] * (sv[0].x - tv[0].x) + b[1] * (sv[1].x - tv[1].x) + b[2] * (sv[2].x - tv[2].x));
        flow[1][y][x] = static_cast<float>(b[0] * (sv[0].y - tv[0].y) + b[1] * (sv[1].y - tv[1].y) + b[2] * (sv[2].y - tv[2].y));
      } else {
        vis[y][x] = kInvisible;
      }
    }
  }
  return result;
}

RenderResult render_faces(const std::vector<Triangle2D>& faces, int64_t height, int64_t width,
                          const TextureFn& texture, int num_classes) {
  const auto index = rasterize_face_index(faces, height, width);
  RenderResult out{Frame::zeros(height, width), ParsingMap{torch::zeros({height, width}, torch::kInt64), num_classes},
                   torch::zeros({height, width}, torch::kFloat32)};
  auto rgb = out.rgb.rgb.accessor<float, 3>();
  auto labels = out.parsing.labels.accessor<int64_t, 2>();
  auto cover = out.coverage.accessor<float, 2>();
  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width; ++x) {
      const int f = index[static_cast<size_t>(y * width + x)];
      if (f < 0) continue;
      const Triangle2D& face = faces[static_cast<size_t>(f)];
      const auto b = *barycentric(face.vertices, {static_cast<double>(x), static_cast<double>(y)});
      const double u = b[0] * face.uv[0].x + b[1] * face.uv[1].x + b[2] * face.uv[2].x;
      const double v = b[0] * face.uv[0].y + b[1] * face.uv[1].y + b[2] * face.uv[2].y;
      const auto color = texture(face, u, v);
      for (int c = 0; c < 3; ++c) rgb[c][y][x] = std::clamp(color[static_cast<size_t>(c)], 0.0f, 1.0f);
      if (face.label < 0 || face.label >= num_classes) throw InvalidArgument("render_faces: face label out of range");
      labels[y][x] = face.label;
      cover[y][x] = 1.0f;
    }
  }
  return out;
}

}  // namespace cpf
