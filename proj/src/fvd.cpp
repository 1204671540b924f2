#include "cpf/fvd.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "cpf/checkpoint.hpp"
#include "cpf/errors.hpp"
#include "cpf/region_ops.hpp"

namespace cpf {

namespace {

constexpr double kEigenClamp = 1e-6;

torch::Tensor stack_clip(const FrameSequence& clip, int64_t h, int64_t w) {
  if (clip.empty()) throw InvalidArgument("embed: empty clip");
  std::vector<torch::Tensor> frames;
  frames.reserve(clip.size());
  for (const auto& f : clip) {
    check_frame(f, "embed");
    frames.push_back(f.rgb);
  }
  auto x = torch::stack(frames);  // [T, 3, H, W]
  if (h > 0 && w > 0 && (x.size(2) != h || x.size(3) != w)) x = resize_bilinear(x, h, w);
  return x;
}

Eigen::VectorXd to_eigen(const torch::Tensor& v) {
  auto d = v.to(torch::kFloat64).contiguous();
  return Eigen::Map<const Eigen::VectorXd>(d.data_ptr<double>(), d.numel());
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericalFailure(std::string("frechet_distance: eigendecomposition failed for ") + what);
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -kEigenClamp) throw NumericalFailure(std::string("frechet_distance: ") + what + " is not positive semidefinite");
    ev[i] = std::sqrt(std::max(0.0, ev[i]));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

RandomProjectionEmbedder::RandomProjectionEmbedder(int64_t dim, uint64_t seed, int64_t side)
    : dim_(dim), seed_(seed), side_(side) {
  if (dim <= 0 || side <= 0) throw InvalidArgument("RandomProjectionEmbedder: dim and side must be positive");
}

torch::Tensor RandomProjectionEmbedder::projection(int64_t input_size) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = cache_.find(input_size);
  if (it != cache_.end()) return it->second;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed_);
  auto p = torch::randn({input_size, dim_}, gen, torch::kFloat64) / std::sqrt(static_cast<double>(input_size));
  cache_.emplace(input_size, p);
  return p;
}

Eigen::VectorXd RandomProjectionEmbedder::embed(const FrameSequence& clip) const {
  torch::NoGradGuard no_grad;
  const auto x = stack_clip(clip, side_, side_).reshape({-1}).to(torch::kFloat64);
  return to_eigen(torch::matmul(x, projection(x.numel())));
}

I3dEmbedder::I3dEmbedder(const std::filesystem::path& weights) {
  const TensorMap tensors = load_tensors(weights);
  for (int i = 0;; ++i) {
    const std::string prefix = "conv" + std::to_string(i);
    auto w = tensors.find(prefix + ".weight");
    if (w == tensors.end()) break;
    if (w->second.dim() != 5) throw InvalidArgument("I3dEmbedder: " + prefix + ".weight must be 5-D");
    Layer layer{w->second, {}, {1, 1, 1}};
    if (auto b = tensors.find(prefix + ".bias"); b != tensors.end()) layer.bias = b->second;
    if (auto s = tensors.find(prefix + ".stride"); s != tensors.end()) {
      if (s->second.numel() != 3) throw InvalidArgument("I3dEmbedder: " + prefix + ".stride must hold 3 values");
      auto sv = s->second.to(torch::kFloat64);
      layer.stride.clear();
      for (int k = 0; k < 3; ++k) layer.stride.push_back(static_cast<int64_t>(std::llround(sv[k].item<double>())));
    }
    const int64_t expected_in = layers_.empty() ? 3 : layers_.back().weight.size(0);
    if (layer.weight.size(1) != expected_in) throw InvalidArgument("I3dEmbedder: channel mismatch at " + prefix);
    layers_.push_back(std::move(layer));
  }
  if (layers_.empty()) throw InvalidArgument("I3dEmbedder: no conv0.weight in " + weights.string());
  dim_ = layers_.back().weight.size(0);
  if (auto fw = tensors.find("fc.weight"); fw != tensors.end()) {
    fc_weight_ = fw->second;
    if (fc_weight_.dim() != 2 || fc_weight_.size(1) != dim_) throw InvalidArgument("I3dEmbedder: fc.weight shape mismatch");
    if (auto fb = tensors.find("fc.bias"); fb != tensors.end()) fc_bias_ = fb->second;
    dim_ = fc_weight_.size(0);
  }
  if (auto sz = tensors.find("input_size"); sz != tensors.end()) {
    auto s = sz->second.to(torch::kFloat64);
    if (s.numel() != 2) throw InvalidArgument("I3dEmbedder: input_size must hold 2 values");
    input_h_ = static_cast<int64_t>(std::llround(s[0].item<double>()));
    input_w_ = static_cast<int64_t>(std::llround(s[1].item<double>()));
  }
}

Eigen::VectorXd I3dEmbedder::embed(const FrameSequence& clip) const {
  torch::NoGradGuard no_grad;
  auto x = stack_clip(clip, input_h_, input_w_).permute({1, 0, 2, 3}).unsqueeze(0);  // [1, 3, T, H, W]
  x = x * 2.0 - 1.0;
  for (const auto& layer : layers_) {
    const auto& w = layer.weight;
    std::vector<int64_t> pad = {w.size(2) / 2, w.size(3) / 2, w.size(4) / 2};
    x = torch::relu(torch::conv3d(x, w, layer.bias, layer.stride, pad));
  }
  auto v = x.mean({2, 3, 4}).squeeze(0);
  if (fc_weight_.defined()) v = torch::matmul(fc_weight_, v) + (fc_bias_.defined() ? fc_bias_ : torch::zeros({dim_}));
  return to_eigen(v);
}

std::unique_ptr<ClipEmbedder> make_embedder(const std::string& spec) {
  if (spec == "random") return std::make_unique<RandomProjectionEmbedder>();
  if (spec.rfind("random:", 0) == 0) {
    return std::make_unique<RandomProjectionEmbedder>(64, std::stoull(spec.substr(7)));
  }
  if (spec.rfind("i3d:", 0) == 0) return std::make_unique<I3dEmbedder>(spec.substr(4));
  throw InvalidArgument("unknown embedder '" + spec + "' (expected random, random:<seed> or i3d:<path>)");
}

GaussianStats fit_gaussian(const std::vector<Eigen::VectorXd>& samples) {
  if (samples.size() < 2) throw InvalidArgument("fit_gaussian: need at least two samples");
  const Eigen::Index d = samples.front().size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(samples.size()), d);
  for (size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].size() != d) throw InvalidArgument("fit_gaussian: inconsistent dimensions");
    x.row(static_cast<Eigen::Index>(i)) = samples[i].transpose();
  }
  GaussianStats s;
  s.n = static_cast<int64_t>(samples.size());
  s.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(s.n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  const auto d = a.mean.size();
  if (b.mean.size() != d || a.cov.rows() != d || a.cov.cols() != d || b.cov.rows() != d || b.cov.cols() != d) {
    throw InvalidArgument("frechet_distance: dimension mismatch");
  }
  const Eigen::MatrixXd sqrt_a = symmetric_sqrt(a.cov, "first covariance");
  const Eigen::MatrixXd m = sqrt_a * b.cov * sqrt_a;
  const double trace_sqrt = symmetric_sqrt(m, "covariance product").trace();
  const double value = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt;
  return std::max(0.0, value);
}

std::vector<FrameSequence> extract_clips(const FrameSequence& video, int length) {
  if (length <= 0) throw InvalidArgument("extract_clips: length must be positive");
  if (video.size() < static_cast<size_t>(length)) {
    warn("extract_clips: video of " + std::to_string(video.size()) + " frames is shorter than " +
         std::to_string(length) + "; skipped");
    return {};
  }
  return {FrameSequence(video.begin(), video.begin() + length)};
}

FvdReport compute_fvd(const std::vector<FrameSequence>& real, const std::vector<FrameSequence>& fake,
                      const ClipEmbedder& embedder, int clip_length) {
  const auto embed_all = [&](const std::vector<FrameSequence>& videos) {
    std::vector<Eigen::VectorXd> out;
    for (const auto& v : videos) {
      for (const auto& clip : extract_clips(v, clip_length)) out.push_back(embedder.embed(clip));
    }
    return out;
  };
  const auto real_emb = embed_all(real);
  const auto fake_emb = embed_all(fake);
  if (real_emb.size() < 2 || fake_emb.size() < 2) {
    throw InvalidArgument("compute_fvd: need at least two clips per side (real " + std::to_string(real_emb.size()) +
                          ", fake " + std::to_string(fake_emb.size()) + ")");
  }
  FvdReport r;
  r.fvd = frechet_distance(fit_gaussian(real_emb), fit_gaussian(fake_emb));
  r.n_real = static_cast<int64_t>(real_emb.size());
  r.n_fake = static_cast<int64_t>(fake_emb.size());
  r.d = static_cast<int64_t>(real_emb.front().size());
  return r;
}

std::vector<FrameSequence> load_video_set(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InvalidArgument("not a directory: " + dir.string());
  if (!list_png(dir).empty()) return {load_frame_dir(dir)};
  std::vector<std::filesystem::path> subdirs;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_directory()) subdirs.push_back(e.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  std::vector<FrameSequence> videos;
  for (const auto& s : subdirs) {
    if (!list_png(s).empty()) videos.push_back(load_frame_dir(s));
  }
  return videos;
}

}  // namespace cpf
