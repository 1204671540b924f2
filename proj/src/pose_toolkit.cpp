#include "cpf/pose_toolkit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cpf/errors.hpp"

namespace cpf {

namespace {

// Value at offset 0 of the degree-`order` least-squares polynomial through
// (offsets[i], values[i]).
double fit_at_origin(const std::vector<double>& offsets, const std::vector<double>& values,
                     int order, double scale) {
  const auto m = static_cast<Eigen::Index>(offsets.size());
  Eigen::MatrixXd design(m, order + 1);
  Eigen::VectorXd rhs(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double s = offsets[static_cast<size_t>(i)] / scale;
    double power = 1.0;
    for (int k = 0; k <= order; ++k) {
      design(i, k) = power;
      power *= s;
    }
    rhs(i) = values[static_cast<size_t>(i)];
  }
  const Eigen::VectorXd coeffs = design.colPivHouseholderQr().solve(rhs);
  return coeffs(0);
}

}  // namespace

std::vector<double> savgol_filter(const std::vector<double>& values, int window, int polyorder,
                                  const std::vector<bool>& valid) {
  const auto n = static_cast<int>(values.size());
  if (window <= 0 || window % 2 == 0) throw InvalidArgument("savgol: window must be odd and positive");
  if (polyorder < 0 || polyorder >= window) throw InvalidArgument("savgol: need 0 <= polyorder < window");
  if (window > n) throw InvalidArgument("savgol: window longer than the sequence");
  if (!valid.empty() && valid.size() != values.size()) {
    throw InvalidArgument("savgol: validity mask length mismatch");
  }
  auto is_valid = [&](int i) { return valid.empty() || valid[static_cast<size_t>(i)]; };

  const int half = window / 2;
  std::vector<double> out(values);
  std::vector<double> offsets;
  std::vector<double> samples;
  offsets.reserve(static_cast<size_t>(window));
  samples.reserve(static_cast<size_t>(window));
  for (int t = 0; t < n; ++t) {
    if (!is_valid(t)) continue;
    const int start = std::clamp(t - half, 0, n - window);
    offsets.clear();
    samples.clear();
    for (int i = start; i < start + window; ++i) {
      if (!is_valid(i)) continue;
      offsets.push_back(static_cast<double>(i - t));
      samples.push_back(values[static_cast<size_t>(i)]);
    }
    const int order = std::min(polyorder, static_cast<int>(samples.size()) - 1);
    out[static_cast<size_t>(t)] = fit_at_origin(offsets, samples, order, std::max(half, 1));
  }
  return out;
}

PoseSequence smooth_sequence(const PoseSequence& seq, int window, int polyorder) {
  if (seq.frames.empty()) throw InvalidArgument("smooth_sequence: empty sequence");
  const size_t n = seq.size();
  PoseSequence out = seq;
  std::vector<double> xs(n), ys(n);
  std::vector<bool> valid(n);
  for (int j = 0; j < kNumJoints; ++j) {
    for (size_t t = 0; t < n; ++t) {
      const Keypoint& kp = seq.frames[t][static_cast<size_t>(j)];
      xs[t] = kp.x;
      ys[t] = kp.y;
      valid[t] = kp.detected();
    }
    const auto sx = savgol_filter(xs, window, polyorder, valid);
    const auto sy = savgol_filter(ys, window, polyorder, valid);
    for (size_t t = 0; t < n; ++t) {
      out.frames[t][static_cast<size_t>(j)].x = sx[t];
      out.frames[t][static_cast<size_t>(j)].y = sy[t];
    }
  }
  return out;
}

double confidence_sum(const PoseFrame& frame) {
  double sum = 0.0;
  for (const Keypoint& kp : frame) sum += kp.confidence;
  return sum;
}

size_t select_appearance_frame(const PoseSequence& seq) {
  if (seq.frames.empty()) throw InvalidArgument("select_appearance_frame: empty sequence");
  size_t best = 0;
  double best_sum = confidence_sum(seq.frames[0]);
  for (size_t t = 1; t < seq.size(); ++t) {
    const double s = confidence_sum(seq.frames[t]);
    if (s > best_sum) {
      best = t;
      best_sum = s;
    }
  }
  return best;
}

double limb_thickness(double sigma) { return std::max(1.0, sigma / 3.0); }

torch::Tensor rasterize_pose(const PoseFrame& frame, int64_t height, int64_t width, double sigma) {
  if (height <= 0 || width <= 0) throw InvalidArgument("rasterize_pose: empty canvas");
  if (!(sigma > 0.0)) throw InvalidArgument("rasterize_pose: sigma must be positive");
  auto map = torch::zeros({kPoseMapChannels, height, width}, torch::kFloat32);
  auto acc = map.accessor<float, 3>();
  const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
  const double reach = 4.0 * sigma;

  for (int j = 0; j < kNumJoints; ++j) {
    const Keypoint& kp = frame[static_cast<size_t>(j)];
    if (!kp.detected()) continue;
    const auto v0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(kp.y - reach)));
    const auto v1 = std::min<int64_t>(height - 1, static_cast<int64_t>(std::ceil(kp.y + reach)));
    const auto u0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(kp.x - reach)));
    const auto u1 = std::min<int64_t>(width - 1, static_cast<int64_t>(std::ceil(kp.x + reach)));
    for (int64_t v = v0; v <= v1; ++v) {
      for (int64_t u = u0; u <= u1; ++u) {
        const double du = static_cast<double>(u) - kp.x;
        const double dv = static_cast<double>(v) - kp.y;
        acc[j][v][u] = static_cast<float>(std::exp(-(du * du + dv * dv) * inv_two_sigma2));
      }
    }
  }

  const double half = limb_thickness(sigma) / 2.0;
  for (int l = 0; l < kNumLimbs; ++l) {
    const Keypoint& a = frame[static_cast<size_t>(kLimbs[static_cast<size_t>(l)].first)];
    const Keypoint& b = frame[static_cast<size_t>(kLimbs[static_cast<size_t>(l)].second)];
    if (!a.detected() || !b.detected()) continue;
    const double ex = b.x - a.x;
    const double ey = b.y - a.y;
    const double len2 = ex * ex + ey * ey;
    const double pad = half + 1.0;
    const auto v0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(a.y, b.y) - pad)));
    const auto v1 = std::min<int64_t>(height - 1, static_cast<int64_t>(std::ceil(std::max(a.y, b.y) + pad)));
    const auto u0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(a.x, b.x) - pad)));
    const auto u1 = std::min<int64_t>(width - 1, static_cast<int64_t>(std::ceil(std::max(a.x, b.x) + pad)));
    for (int64_t v = v0; v <= v1; ++v) {
      for (int64_t u = u0; u <= u1; ++u) {
        const double px = static_cast<double>(u) - a.x;
        const double py = static_cast<double>(v) - a.y;
        const double s = len2 > 0.0 ? std::clamp((px * ex + py * ey) / len2, 0.0, 1.0) : 0.0;
        const double dist = std::hypot(px - s * ex, py - s * ey);
        const double cover = std::clamp(half + 0.5 - dist, 0.0, 1.0);
        float& cell = acc[kNumJoints + l][v][u];
        cell = std::max(cell, static_cast<float>(cover));
      }
    }
  }
  return map;
}

PoseFrame parse_pose_line(const std::string& line) {
  std::istringstream in(line);
  PoseFrame frame{};
  for (int j = 0; j < kNumJoints; ++j) {
    Keypoint& kp = frame[static_cast<size_t>(j)];
    if (!(in >> kp.x >> kp.y >> kp.confidence)) {
      throw InvalidArgument("keypoint line must hold 54 numbers (18 x {x, y, c})");
    }
    if (!std::isfinite(kp.x) || !std::isfinite(kp.y)) throw InvalidArgument("non-finite keypoint");
    if (kp.confidence < 0.0 || kp.confidence > 1.0) {
      throw InvalidArgument("keypoint confidence outside [0, 1]");
    }
  }
  std::string extra;
  if (in >> extra) throw InvalidArgument("keypoint line holds more than 54 numbers");
  return frame;
}

std::string format_pose_line(const PoseFrame& frame) {
  std::string line;
  char buf[64];
  for (const Keypoint& kp : frame) {
    for (double value : {kp.x, kp.y, kp.confidence}) {
      if (!line.empty()) line.push_back(' ');
      const auto res = std::to_chars(buf, buf + sizeof(buf), value);
      line.append(buf, res.ptr);
    }
  }
  return line;
}

PoseSequence load_keypoints(const std::filesystem::path& path, double fps) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open keypoint file " + path.string());
  PoseSequence seq;
  seq.fps = fps;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      seq.frames.push_back(parse_pose_line(line));
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (seq.frames.empty()) throw InvalidArgument(path.string() + ": no frames");
  return seq;
}

void save_keypoints(const PoseSequence& seq, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const PoseFrame& frame : seq.frames) out << format_pose_line(frame) << '\n';
}

}  // namespace cpf
