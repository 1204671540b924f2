#include "cpf/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "cpf/checkpoint.hpp"
#include "cpf/correspondence.hpp"
#include "cpf/errors.hpp"
#include "cpf/synth.hpp"

namespace cpf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Runs fn(i) for i in [0, n) on up to hardware_concurrency threads and
// rethrows the first exception.
template <typename Fn>
void parallel_for(size_t n, Fn fn) {
  const size_t workers = std::max<size_t>(1, std::min<size_t>(n, std::thread::hardware_concurrency()));
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto work = [&] {
    torch::NoGradGuard no_grad;
    for (size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> threads;
    for (size_t w = 0; w < workers; ++w) threads.emplace_back(work);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);
}

template <typename Fn>
auto in_stage(const char* stage, Fn fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

int64_t lcm_stride(const PipelineConfig& c) {
  int64_t s = ParsingGeneratorImpl::kStride;
  s = std::lcm(s, int64_t{1} << std::max(0, c.flow.depth - 1));
  s = std::lcm(s, int64_t{1} << std::max(0, c.foreground.levels - 1));
  return s;
}

}  // namespace

void to_json(json& j, const VideoEntry& v) {
  j = json{{"name", v.name},
           {"frames", v.frames.generic_string()},
           {"keypoints", v.keypoints.generic_string()},
           {"parsing", v.parsing.generic_string()},
           {"background", v.background.generic_string()},
           {"appearance_index", v.appearance_index},
           {"resolution", {v.width, v.height}},
           {"split", v.split}};
}

void from_json(const json& j, VideoEntry& v) {
  v.name = j.at("name").get<std::string>();
  v.frames = j.at("frames").get<std::string>();
  v.keypoints = j.at("keypoints").get<std::string>();
  v.parsing = j.at("parsing").get<std::string>();
  v.background = j.at("background").get<std::string>();
  v.appearance_index = j.value("appearance_index", -1);
  if (j.contains("resolution")) {
    const auto& r = j.at("resolution");
    if (!r.is_array() || r.size() != 2) throw InvalidArgument("manifest: resolution must be [width, height]");
    v.width = r[0].get<int64_t>();
    v.height = r[1].get<int64_t>();
  }
  v.split = j.value("split", std::string("train"));
}

DatasetManifest load_manifest(const fs::path& path) {
  const json j = read_json(path);
  if (!j.contains("videos") || !j.at("videos").is_array()) throw InvalidArgument("manifest: missing \"videos\" array");
  fs::path base = path.parent_path();
  if (const char* root = std::getenv(kDataRootEnv); root != nullptr && *root != '\0') base = root;
  DatasetManifest m;
  std::vector<std::string> names;
  for (const auto& item : j.at("videos")) {
    VideoEntry v;
    try {
      v = item.get<VideoEntry>();
    } catch (const json::exception& e) {
      throw InvalidArgument(std::string("manifest: malformed entry: ") + e.what());
    }
    if (v.name.empty() || v.name.find('/') != std::string::npos) throw InvalidArgument("manifest: invalid video name '" + v.name + "'");
    if (v.split != "train" && v.split != "test") throw InvalidArgument("manifest: split of " + v.name + " must be train or test");
    if (v.width <= 0 || v.height <= 0) throw InvalidArgument("manifest: non-positive resolution for " + v.name);
    if (std::find(names.begin(), names.end(), v.name) != names.end()) throw InvalidArgument("manifest: duplicate video " + v.name);
    names.push_back(v.name);
    v.frames = resolve(v.frames, base);
    v.keypoints = resolve(v.keypoints, base);
    v.parsing = resolve(v.parsing, base);
    v.background = resolve(v.background, base);
    m.videos.push_back(std::move(v));
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  write_json(json{{"videos", manifest.videos}}, path);
}

std::vector<std::string> validate_entry(const VideoEntry& e) {
  std::vector<std::string> problems;
  if (!fs::is_directory(e.frames)) problems.push_back("missing frame directory " + e.frames.string());
  if (!fs::is_directory(e.parsing)) problems.push_back("missing parsing directory " + e.parsing.string());
  if (!fs::is_regular_file(e.keypoints)) problems.push_back("missing keypoint file " + e.keypoints.string());
  if (!fs::is_regular_file(e.background)) problems.push_back("missing background " + e.background.string());
  if (e.split != "train" && e.split != "test") problems.push_back("split must be train or test");
  if (e.appearance_index < -1) problems.push_back("appearance index must be >= 0 (or -1 for automatic)");
  if (e.appearance_index >= 0 && fs::is_directory(e.frames) &&
      static_cast<size_t>(e.appearance_index) >= list_png(e.frames).size()) {
    problems.push_back("appearance index " + std::to_string(e.appearance_index) + " is past the last frame");
  }
  return problems;
}

void PipelineConfig::validate() const {
  if (working_size <= 0) throw InvalidArgument("config: working_size must be positive");
  const int64_t stride = lcm_stride(*this);
  if (working_size % stride != 0) {
    throw InvalidArgument("config: working_size " + std::to_string(working_size) + " is not a multiple of the generators' stride " +
                          std::to_string(stride));
  }
  if (parsing.image_size != working_size || flow.image_size != working_size || foreground.image_size != working_size) {
    throw InvalidArgument("config: stage image_size differs from working_size");
  }
  if (parsing.num_classes != foreground.num_classes) throw InvalidArgument("config: parsing and foreground class counts differ");
  if (fusion.clip_length < 2) throw InvalidArgument("config: fusion clip_length < 2");
}

void to_json(json& j, const PipelineConfig& c) {
  j = json{{"manifest", c.manifest.generic_string()},
           {"prepared_dir", c.prepared_dir.generic_string()},
           {"models_dir", c.models_dir.generic_string()},
           {"working_size", c.working_size},
           {"no_flow", c.no_flow},
           {"no_fusion", c.no_fusion},
           {"seed", c.seed},
           {"smoothing", {{"window", c.smoothing.window}, {"polyorder", c.smoothing.polyorder}}},
           {"pose_crop_margin", c.pose_crop_margin},
           {"flow_scenes", c.flow_scenes},
           {"parsing", c.parsing},
           {"flow", c.flow},
           {"foreground", c.foreground},
           {"fusion", c.fusion}};
}

void from_json(const json& j, PipelineConfig& c) {
  c.manifest = j.value("manifest", c.manifest.generic_string());
  c.prepared_dir = j.value("prepared_dir", c.prepared_dir.generic_string());
  c.models_dir = j.value("models_dir", c.models_dir.generic_string());
  c.working_size = j.value("working_size", c.working_size);
  c.no_flow = j.value("no_flow", c.no_flow);
  c.no_fusion = j.value("no_fusion", c.no_fusion);
  c.seed = j.value("seed", c.seed);
  if (j.contains("smoothing")) {
    c.smoothing.window = j.at("smoothing").value("window", c.smoothing.window);
    c.smoothing.polyorder = j.at("smoothing").value("polyorder", c.smoothing.polyorder);
  }
  c.pose_crop_margin = j.value("pose_crop_margin", c.pose_crop_margin);
  c.flow_scenes = j.value("flow_scenes", c.flow_scenes);
  // Stage resolutions default to the working size.
  const auto stage = [&](const char* key, auto& cfg) {
    json sj = j.contains(key) ? j.at(key) : json::object();
    if (!sj.contains("image_size") && std::string(key) != "fusion") sj["image_size"] = c.working_size;
    sj.get_to(cfg);
  };
  stage("parsing", c.parsing);
  stage("flow", c.flow);
  stage("foreground", c.foreground);
  stage("fusion", c.fusion);
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  PipelineConfig c;
  try {
    c = read_json(path).get<PipelineConfig>();
  } catch (const json::exception& e) {
    throw InvalidArgument("config " + path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  c.manifest = resolve(c.manifest, base);
  c.prepared_dir = resolve(c.prepared_dir, base);
  c.models_dir = resolve(c.models_dir, base);
  c.validate();
  return c;
}

PoseSequence smooth_for_length(const PoseSequence& seq, const SmoothingConfig& cfg) {
  const int n = static_cast<int>(seq.size());
  int window = std::min(cfg.window, n % 2 == 1 ? n : n - 1);
  if (window <= cfg.polyorder) {
    if (n > 0) warn("sequence of " + std::to_string(n) + " frames is too short to smooth; left unchanged");
    return seq;
  }
  return smooth_sequence(seq, window, cfg.polyorder);
}

namespace {

void prepare_video(const VideoEntry& entry, const PipelineConfig& cfg, const fs::path& out, int& appearance_index) {
  if (const auto problems = validate_entry(entry); !problems.empty()) {
    std::string msg = problems.front();
    for (size_t i = 1; i < problems.size(); ++i) msg += "; " + problems[i];
    throw InvalidArgument(msg);
  }
  const auto frame_files = list_png(entry.frames);
  const auto parsing_files = list_png(entry.parsing);
  const PoseSequence raw = load_keypoints(entry.keypoints);
  if (frame_files.empty()) throw InvalidArgument("no frames in " + entry.frames.string());
  if (frame_files.size() != parsing_files.size() || frame_files.size() != raw.size()) {
    throw InvalidArgument("frame, parsing and keypoint counts differ (" + std::to_string(frame_files.size()) + ", " +
                          std::to_string(parsing_files.size()) + ", " + std::to_string(raw.size()) + ")");
  }
  const PoseSequence smoothed = smooth_for_length(raw, cfg.smoothing);
  const size_t selected = select_appearance_frame(smoothed);
  size_t index = selected;
  if (entry.appearance_index >= 0) {
    if (static_cast<size_t>(entry.appearance_index) >= raw.size()) throw InvalidArgument("appearance index out of range");
    index = static_cast<size_t>(entry.appearance_index);
  }
  const Frame background = load_frame_png(entry.background);
  if (background.height() != entry.height || background.width() != entry.width) {
    throw InvalidArgument("background resolution differs from the manifest");
  }

  fs::create_directories(out / "foreground");
  fs::create_directories(out / "parsing");
  fs::create_directories(out / "records");
  save_keypoints(smoothed, out / "keypoints_smoothed.txt");
  save_frame_png(background, out / "background.png");
  write_json(json{{"appearance_index", index}, {"selected_index", selected}, {"frames", frame_files.size()},
                  {"frames_dir", fs::absolute(entry.frames).generic_string()},
                  {"parsing_dir", fs::absolute(entry.parsing).generic_string()}},
             out / "appearance.json");
  for (size_t t = 0; t < frame_files.size(); ++t) {
    const Frame frame = load_frame_png(frame_files[t]);
    const ParsingMap parsing = load_parsing_png(parsing_files[t], cfg.parsing.num_classes);
    if (frame.height() != entry.height || frame.width() != entry.width || parsing.height() != entry.height ||
        parsing.width() != entry.width) {
      throw InvalidArgument("frame " + std::to_string(t) + " resolution differs from the manifest");
    }
    CropResult crop;
    try {
      crop = crop_foreground(frame, parsing, std::nullopt, cfg.working_size);
    } catch (const NoForeground& e) {
      throw NoForeground("frame " + std::to_string(t) + ": " + e.what());
    }
    const std::string name = frame_filename(t);
    save_frame_png(extract_foreground(crop.frame, crop.parsing), out / "foreground" / name);
    save_parsing_png(crop.parsing, out / "parsing" / name);
    save_crop_record(crop.record, out / "records" / (name.substr(0, name.size() - 4) + ".json"));
  }
  appearance_index = static_cast<int>(index);
}

}  // namespace

PrepareReport prepare(const DatasetManifest& manifest, const PipelineConfig& cfg) {
  cfg.validate();
  const size_t n = manifest.videos.size();
  std::vector<std::string> errors(n);
  std::vector<int> indices(n, -1);
  parallel_for(n, [&](size_t i) {
    const VideoEntry& e = manifest.videos[i];
    try {
      prepare_video(e, cfg, cfg.prepared_dir / e.name, indices[i]);
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  });
  PrepareReport report;
  DatasetManifest filled;
  json jerrors = json::array();
  for (size_t i = 0; i < n; ++i) {
    const VideoEntry& e = manifest.videos[i];
    if (errors[i].empty()) {
      report.prepared.push_back(e.name);
      VideoEntry copy = e;
      copy.frames = fs::absolute(e.frames);
      copy.parsing = fs::absolute(e.parsing);
      copy.keypoints = fs::absolute(e.keypoints);
      copy.background = fs::absolute(e.background);
      copy.appearance_index = indices[i];
      filled.videos.push_back(copy);
    } else {
      report.errors.emplace_back(e.name, errors[i]);
      jerrors.push_back(json{{"video", e.name}, {"error", errors[i]}});
      warn("prepare: " + e.name + ": " + errors[i]);
    }
  }
  save_manifest(filled, cfg.prepared_dir / "manifest.json");
  write_json(json{{"prepared", report.prepared}, {"errors", jerrors}}, cfg.prepared_dir / "report.json");
  return report;
}

std::vector<PreparedVideo> load_prepared(const PipelineConfig& cfg, const std::string& split) {
  const fs::path manifest_path = cfg.prepared_dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw InvalidArgument("no prepared dataset at " + cfg.prepared_dir.string() + " (run prepare)");
  const json j = read_json(manifest_path);
  std::vector<PreparedVideo> out;
  for (const auto& item : j.at("videos")) {
    const VideoEntry e = item.get<VideoEntry>();
    if (e.split != split) continue;
    const fs::path dir = cfg.prepared_dir / e.name;
    PreparedVideo v;
    v.name = e.name;
    v.split = e.split;
    v.frames_dir = e.frames;
    v.parsing_dir = e.parsing;
    v.background = load_frame_png(dir / "background.png");
    v.appearance_index = static_cast<size_t>(e.appearance_index);
    v.poses = load_keypoints(dir / "keypoints_smoothed.txt");
    const auto fg_files = list_png(dir / "foreground");
    const auto parsing_files = list_png(dir / "parsing");
    if (fg_files.size() != v.poses.size() || parsing_files.size() != v.poses.size()) {
      throw InvalidArgument("prepared video " + e.name + " is incomplete");
    }
    for (size_t t = 0; t < fg_files.size(); ++t) {
      v.foreground_crops.push_back(load_frame_png(fg_files[t]));
      v.parsing_crops.push_back(load_parsing_png(parsing_files[t], cfg.parsing.num_classes));
      const std::string stem = fg_files[t].stem().string();
      v.records.push_back(load_crop_record(dir / "records" / (stem + ".json")));
    }
    out.push_back(std::move(v));
  }
  return out;
}

torch::Tensor working_pose_map(const PoseFrame& pose, const CropRecord& rec, double sigma) {
  return rasterize_pose(pose_to_working(pose, rec), rec.target(), rec.target(), sigma);
}

std::vector<ParsingSample> build_parsing_dataset(const std::vector<PreparedVideo>& videos, const PipelineConfig& cfg) {
  std::vector<ParsingSample> samples;
  for (const auto& v : videos) {
    const ParsingMap& app = v.parsing_crops.at(v.appearance_index);
    for (size_t t = 0; t < v.poses.size(); ++t) {
      samples.push_back(ParsingSample{app, working_pose_map(v.poses.frames[t], v.records[t], cfg.parsing.pose_sigma),
                                      v.parsing_crops[t]});
    }
  }
  return samples;
}

std::vector<FlowSample> build_flow_dataset(const PipelineConfig& cfg, uint64_t seed) {
  if (cfg.flow_scenes < 1) throw InvalidArgument("config: flow_scenes must be positive");
  const int64_t s = cfg.working_size;
  std::mt19937_64 rng(seed);
  std::vector<FlowSample> samples;
  for (int i = 0; i < cfg.flow_scenes; ++i) {
    const PuppetPose source = random_pose(rng, s, s);
    const PuppetPose target = random_pose(rng, s, s);
    const OracleResult oracle = oracle_flow(puppet_scene(source, target, s, s));
    samples.push_back(FlowSample{rasterize_pose(puppet_keypoints(source), s, s, cfg.flow.pose_sigma),
                                 rasterize_pose(puppet_keypoints(target), s, s, cfg.flow.pose_sigma), oracle.flow,
                                 oracle.visibility});
  }
  return samples;
}

fs::path checkpoint_path(const PipelineConfig& cfg, const std::string& stage, bool no_flow) {
  const std::string suffix = (stage == "foreground" && no_flow) ? "_noflow" : "";
  return cfg.models_dir / (stage + suffix + ".ckpt");
}

namespace {

json sidecar(const std::string& stage, const json& stage_cfg, const PipelineConfig& cfg, uint64_t seed, size_t samples,
             size_t steps, double final_loss) {
  return json{{"stage", stage},       {"config", stage_cfg},  {"working_size", cfg.working_size},
              {"seed", seed},         {"samples", samples},   {"steps", steps},
              {"final_loss", final_loss}};
}

template <typename Module, typename Make>
Module load_stage(const PipelineConfig& cfg, const std::string& stage, const fs::path& path, Make make) {
  return in_stage(stage.c_str(), [&] {
    if (!fs::exists(path)) throw StageError(stage, "missing checkpoint " + path.string() + " (run train " + stage + ")");
    const json side = load_sidecar(path);
    const int64_t ws = side.value("working_size", int64_t{-1});
    if (stage != "fusion" && ws != cfg.working_size) {
      throw StageError(stage, "resolution mismatch: model trained at " + std::to_string(ws) + ", working size is " +
                                  std::to_string(cfg.working_size));
    }
    Module m = make(side.at("config"));
    load_module_state(*m, load_tensors(path));
    m->eval();
    return m;
  });
}

DualPathGenerator load_foreground(const PipelineConfig& cfg, bool no_flow) {
  fs::path path = checkpoint_path(cfg, "foreground", no_flow);
  if (no_flow && !fs::exists(path)) {
    warn("no flow-free foreground checkpoint; using " + checkpoint_path(cfg, "foreground").string());
    path = checkpoint_path(cfg, "foreground");
  }
  return load_stage<DualPathGenerator>(cfg, "foreground", path, [](const json& j) {
    const auto c = j.get<ForegroundStageConfig>();
    return DualPathGenerator(c.num_classes, c.base_width, c.levels);
  });
}

FlowRegressor load_flow(const PipelineConfig& cfg) {
  return load_stage<FlowRegressor>(cfg, "flow", checkpoint_path(cfg, "flow"), [](const json& j) {
    const auto c = j.get<FlowStageConfig>();
    return FlowRegressor(c.base_width, c.depth);
  });
}

std::vector<ForegroundSample> build_foreground_dataset(const std::vector<PreparedVideo>& videos,
                                                       const PipelineConfig& cfg, bool no_flow) {
  FlowRegressor reg{nullptr};
  double sigma = cfg.flow.pose_sigma;
  if (!no_flow) {
    reg = load_flow(cfg);
    sigma = load_sidecar(checkpoint_path(cfg, "flow")).at("config").value("pose_sigma", sigma);
  }
  std::vector<ForegroundSample> samples;
  torch::NoGradGuard no_grad;
  for (const auto& v : videos) {
    const size_t a = v.appearance_index;
    const torch::Tensor app_map = working_pose_map(v.poses.frames[a], v.records[a], sigma);
    for (size_t t = 0; t < v.poses.size(); ++t) {
      const int64_t s = cfg.working_size;
      FlowField flow = FlowField::zeros(s, s);
      VisibilityMap vis = VisibilityMap::all_visible(s, s);
      if (!no_flow) {
        auto pred = predict_flow(reg, app_map, working_pose_map(v.poses.frames[t], v.records[t], sigma));
        flow = pred.flow;
        vis = pred.visibility;
      }
      samples.push_back(ForegroundSample{v.foreground_crops[a], v.parsing_crops[t], flow, vis, v.foreground_crops[t]});
    }
  }
  return samples;
}

std::vector<FusionClip> build_fusion_dataset(const std::vector<PreparedVideo>& videos, const PipelineConfig& cfg) {
  auto gen = load_foreground(cfg, cfg.no_flow);
  FlowRegressor reg{nullptr};
  double sigma = cfg.flow.pose_sigma;
  if (!cfg.no_flow) {
    reg = load_flow(cfg);
    sigma = load_sidecar(checkpoint_path(cfg, "flow")).at("config").value("pose_sigma", sigma);
  }
  std::vector<FusionClip> clips;
  torch::NoGradGuard no_grad;
  for (const auto& v : videos) {
    FusionClip clip;
    clip.background = v.background;
    const auto frame_files = list_png(v.frames_dir);
    if (frame_files.size() != v.poses.size()) throw InvalidArgument("video " + v.name + ": frame count changed since prepare");
    const size_t a = v.appearance_index;
    const torch::Tensor app_map = working_pose_map(v.poses.frames[a], v.records[a], sigma);
    for (size_t t = 0; t < v.poses.size(); ++t) {
      const int64_t s = cfg.working_size;
      FlowField flow = FlowField::zeros(s, s);
      VisibilityMap vis = VisibilityMap::all_visible(s, s);
      if (!cfg.no_flow) {
        auto pred = predict_flow(reg, app_map, working_pose_map(v.poses.frames[t], v.records[t], sigma));
        flow = pred.flow;
        vis = pred.visibility;
      }
      const Frame fg = generate_foreground(gen, v.foreground_crops[a], v.parsing_crops[t], flow, vis);
      clip.foregrounds.push_back(restore_to_frame(fg, v.records[t]));
      clip.masks.push_back(restore_mask(v.parsing_crops[t].foreground_mask(), v.records[t]).gt(0.5).to(torch::kFloat32));
      clip.targets.push_back(load_frame_png(frame_files[t]));
    }
    clips.push_back(std::move(clip));
  }
  return clips;
}

template <typename T>
double last_or_zero(const std::vector<T>& v) {
  return v.empty() ? 0.0 : static_cast<double>(v.back());
}

}  // namespace

json train_stage(const std::string& stage, const PipelineConfig& cfg, uint64_t seed, bool no_flow) {
  cfg.validate();
  const auto videos = stage == "flow" ? std::vector<PreparedVideo>{} : load_prepared(cfg, "train");
  if (stage != "flow" && videos.empty()) throw InvalidArgument("no prepared training videos");
  json side;
  if (stage == "parsing") {
    const auto data = build_parsing_dataset(videos, cfg);
    auto r = train_parsing_stage(data, cfg.parsing, seed);
    side = sidecar(stage, cfg.parsing, cfg, seed, data.size(), r.step_loss.size(), last_or_zero(r.step_loss));
    save_checkpoint(*r.generator, side, checkpoint_path(cfg, stage));
  } else if (stage == "flow") {
    const auto data = build_flow_dataset(cfg, seed);
    auto r = train_flow_stage(data, cfg.flow, seed);
    side = sidecar(stage, cfg.flow, cfg, seed, data.size(), r.step_loss.size(), last_or_zero(r.step_loss));
    save_checkpoint(*r.regressor, side, checkpoint_path(cfg, stage));
  } else if (stage == "foreground") {
    ForegroundStageConfig fc = cfg.foreground;
    fc.no_flow = fc.no_flow || no_flow;
    const auto data = build_foreground_dataset(videos, cfg, fc.no_flow);
    auto r = train_foreground_stage(data, fc, seed);
    side = sidecar(stage, fc, cfg, seed, data.size(), r.curves.total.size(), last_or_zero(r.curves.total));
    save_checkpoint(*r.generator, side, checkpoint_path(cfg, stage, fc.no_flow));
  } else if (stage == "fusion") {
    PipelineConfig c = cfg;
    c.no_flow = cfg.no_flow || no_flow;
    const auto clips = build_fusion_dataset(videos, c);
    auto r = train_fusion_stage(clips, cfg.fusion, seed);
    side = sidecar(stage, cfg.fusion, cfg, seed, clips.size(), r.step_loss.size(), last_or_zero(r.step_loss));
    save_checkpoint(*r.network, side, checkpoint_path(cfg, stage));
  } else {
    throw InvalidArgument("unknown stage '" + stage + "' (expected parsing, flow, foreground or fusion)");
  }
  return side;
}

StageModels load_models(const PipelineConfig& cfg, bool no_flow, bool no_fusion) {
  StageModels m;
  m.parsing = load_stage<ParsingGenerator>(cfg, "parsing", checkpoint_path(cfg, "parsing"), [&](const json& j) {
    const auto c = j.get<ParsingStageConfig>();
    m.parsing_sigma = c.pose_sigma;
    return ParsingGenerator(c.num_classes, c.base_width, c.num_res_blocks);
  });
  if (!no_flow) {
    m.flow = load_flow(cfg);
    m.flow_sigma = load_sidecar(checkpoint_path(cfg, "flow")).at("config").value("pose_sigma", m.flow_sigma);
  }
  m.foreground = load_foreground(cfg, no_flow);
  if (m.foreground->num_classes() != m.parsing->num_classes()) {
    throw StageError("foreground", "class count differs from the parsing model");
  }
  if (!no_fusion) {
    m.fusion = load_stage<FusionNetwork>(cfg, "fusion", checkpoint_path(cfg, "fusion"), [](const json& j) {
      const auto c = j.get<FusionStageConfig>();
      return FusionNetwork(c.base_width, c.num_res_blocks, c.internal_scale);
    });
  }
  return m;
}

TransferResult transfer(const AppearanceInput& appearance, const PoseSequence& source, StageModels& models,
                        const Frame& background, const TransferOptions& options) {
  check_frame(appearance.frame, "transfer appearance");
  check_parsing(appearance.parsing, "transfer appearance parsing");
  check_frame(background, "transfer background");
  if (source.size() == 0) throw InvalidArgument("transfer: empty source pose sequence");
  if (appearance.parsing.height() != appearance.frame.height() || appearance.parsing.width() != appearance.frame.width()) {
    throw InvalidArgument("transfer: appearance frame and parsing sizes differ");
  }
  if (!models.parsing || !models.foreground || (!options.no_flow && !models.flow) || (!options.no_fusion && !models.fusion)) {
    throw InvalidArgument("transfer: a required stage model is not loaded");
  }
  torch::NoGradGuard no_grad;
  const int64_t s = options.working_size;
  const int64_t h = background.height();
  const int64_t w = background.width();

  const CropResult app = in_stage("parsing", [&] { return crop_foreground(appearance.frame, appearance.parsing, std::nullopt, s); });
  const Frame app_fg = extract_foreground(app.frame, app.parsing);
  torch::Tensor app_flow_map;
  if (!options.no_flow) app_flow_map = working_pose_map(appearance.pose, app.record, models.flow_sigma);

  const size_t n = source.size();
  TransferResult out;
  out.parsing.resize(n);
  out.foregrounds.resize(n);
  out.masks.resize(n);
  out.records.resize(n);
  parallel_for(n, [&](size_t t) {
    const PoseFrame& pose = source.frames[t];
    const CropRecord rec = crop_record_from_pose(pose, h, w, options.pose_crop_margin, s);
    const ParsingMap parsing = in_stage("parsing", [&] {
      return generate_parsing(models.parsing, app.parsing, working_pose_map(pose, rec, models.parsing_sigma));
    });
    FlowField flow = FlowField::zeros(s, s);
    VisibilityMap vis = VisibilityMap::all_visible(s, s);
    if (!options.no_flow) {
      auto pred = in_stage("flow", [&] {
        return predict_flow(models.flow, app_flow_map, working_pose_map(pose, rec, models.flow_sigma));
      });
      flow = pred.flow;
      vis = pred.visibility;
    }
    const Frame fg = in_stage("foreground", [&] { return generate_foreground(models.foreground, app_fg, parsing, flow, vis); });
    out.foregrounds[t] = restore_to_frame(fg, rec);
    out.masks[t] = restore_mask(parsing.foreground_mask(), rec).gt(0.5).to(torch::kFloat32);
    out.parsing[t] = parsing;
    out.records[t] = rec;
  });

  if (options.no_fusion || n < 2) {
    if (!options.no_fusion) warn("transfer: single-frame source; first frame is the direct overlay");
    out.frames = overlay_sequence(background, out.foregrounds, out.masks);
  } else {
    out.frames = in_stage("fusion", [&] { return fuse_sequence(models.fusion, background, out.foregrounds, out.masks[0]); });
  }
  return out;
}

}  // namespace cpf
