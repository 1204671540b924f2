#include "cpf/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cpf/errors.hpp"
#include "cpf/fvd.hpp"
#include "cpf/pipeline.hpp"
#include "json.hpp"

namespace cpf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void report_error(const std::string& kind, const std::string& message, const std::string& stage = "") {
  json j{{"error", message}, {"kind", kind}};
  if (!stage.empty()) j["stage"] = stage;
  std::cerr << j.dump() << std::endl;
}

PipelineConfig config_or_default(const std::string& path) {
  if (!path.empty()) return load_pipeline_config(path);
  PipelineConfig cfg;
  cfg.validate();
  return cfg;
}

fs::path sibling(const fs::path& p, const std::string& suffix, const std::string& ext) {
  return p.parent_path() / (p.stem().string() + suffix + ext);
}

bool on_path(const std::string& exe) {
  const char* path = std::getenv("PATH");
  if (path == nullptr) return false;
  std::stringstream ss(path);
  std::string dir;
  while (std::getline(ss, dir, ':')) {
    if (!dir.empty() && fs::exists(fs::path(dir) / exe)) return true;
  }
  return false;
}

std::string quoted(const fs::path& p) {
  std::string s = "'";
  for (char c : p.string()) s += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return s + "'";
}

struct TransferArgs {
  std::string appearance;
  std::string appearance_parsing;
  std::string appearance_pose;
  std::string source;
  std::string background;
  std::string out;
  std::string config;
  std::string models;
  uint64_t seed = 0;
  bool no_flow = false;
  bool no_fusion = false;
  bool mux = false;
};

int do_transfer(const TransferArgs& a) {
  PipelineConfig cfg = config_or_default(a.config);
  if (!a.models.empty()) cfg.models_dir = a.models;
  torch::manual_seed(a.seed);
  const fs::path app_path = a.appearance;
  AppearanceInput app;
  app.frame = load_frame_png(app_path);
  app.parsing = load_parsing_png(a.appearance_parsing.empty() ? sibling(app_path, "_parsing", ".png")
                                                                : fs::path(a.appearance_parsing),
                                 cfg.parsing.num_classes);
  const PoseSequence app_pose =
      load_keypoints(a.appearance_pose.empty() ? sibling(app_path, "_pose", ".txt") : fs::path(a.appearance_pose));
  if (app_pose.size() != 1) throw InvalidArgument("appearance pose file must hold exactly one line");
  app.pose = app_pose.frames.front();
  const Frame bg = load_frame_png(a.background.empty() ? app_path.parent_path() / "background.png" : fs::path(a.background));
  const PoseSequence source = smooth_for_length(load_keypoints(a.source), cfg.smoothing);

  const bool no_flow = a.no_flow || cfg.no_flow;
  const bool no_fusion = a.no_fusion || cfg.no_fusion;
  StageModels models = load_models(cfg, no_flow, no_fusion);
  TransferOptions opts{cfg.working_size, no_flow, no_fusion, cfg.pose_crop_margin};
  const TransferResult result = transfer(app, source, models, bg, opts);
  save_frame_dir(result.frames, a.out);
  if (a.mux) {
    if (on_path("ffmpeg")) {
      const std::string cmd = "ffmpeg -y -loglevel error -framerate " + std::to_string(source.fps) + " -i " +
                              quoted(fs::path(a.out) / "%06d.png") + " -c:v ffv1 " + quoted(fs::path(a.out) / "video.mkv");
      if (std::system(cmd.c_str()) != 0) warn("ffmpeg failed; frames were written");
    } else {
      warn("ffmpeg not found; wrote frames only");
    }
  }
  std::cout << json{{"frames", result.frames.size()},
                    {"height", bg.height()},
                    {"width", bg.width()},
                    {"out", a.out},
                    {"no_flow", no_flow},
                    {"no_fusion", no_fusion}}
                   .dump()
            << std::endl;
  return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  CLI::App app{"Pose-guided human video motion transfer"};
  app.name("cpfnet");
  app.require_subcommand(1);

  std::string prepare_config;
  std::string prepare_manifest;
  auto* prepare_cmd = app.add_subcommand("prepare", "Smooth keypoints, select appearance frames and crop a dataset");
  prepare_cmd->add_option("--config", prepare_config, "Pipeline config (JSON)")->required();
  prepare_cmd->add_option("--manifest", prepare_manifest, "Dataset manifest overriding the config");

  std::string train_stage_name;
  std::string train_config;
  int64_t train_seed = -1;
  bool train_no_flow = false;
  auto* train_cmd = app.add_subcommand("train", "Train one stage on a prepared dataset");
  train_cmd->add_option("stage", train_stage_name, "parsing | flow | foreground | fusion")
      ->required()
      ->check(CLI::IsMember({"parsing", "flow", "foreground", "fusion"}));
  train_cmd->add_option("--config", train_config, "Pipeline config (JSON)")->required();
  train_cmd->add_option("--seed", train_seed, "Random seed (default: config seed)");
  train_cmd->add_flag("--no-flow", train_no_flow, "Train without appearance flow");

  TransferArgs ta;
  auto* transfer_cmd = app.add_subcommand("transfer", "Synthesize a video of the appearance person in the source poses");
  transfer_cmd->add_option("--appearance", ta.appearance, "Appearance image (PNG)")->required();
  transfer_cmd->add_option("--appearance-parsing", ta.appearance_parsing, "Parsing of the appearance image");
  transfer_cmd->add_option("--appearance-pose", ta.appearance_pose, "Keypoints of the appearance image (one line)");
  transfer_cmd->add_option("--source", ta.source, "Source keypoint file")->required();
  transfer_cmd->add_option("--background", ta.background, "Background image");
  transfer_cmd->add_option("--out", ta.out, "Output frame directory")->required();
  transfer_cmd->add_option("--config", ta.config, "Pipeline config (JSON)");
  transfer_cmd->add_option("--models", ta.models, "Checkpoint directory overriding the config");
  transfer_cmd->add_option("--seed", ta.seed, "Random seed");
  transfer_cmd->add_flag("--no-flow", ta.no_flow, "Zero flow, all pixels visible");
  transfer_cmd->add_flag("--no-fusion", ta.no_fusion, "Overlay foregrounds with their parsing masks");
  transfer_cmd->add_flag("--mux", ta.mux, "Also encode video.mkv when ffmpeg is available");

  std::string real_dir;
  std::string fake_dir;
  std::string embedder_spec = "random";
  int clip_len = kFvdClipLength;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluation metrics");
  eval_cmd->require_subcommand(1);
  auto* fvd_cmd = eval_cmd->add_subcommand("fvd", "Frechet video distance between two video sets");
  fvd_cmd->add_option("--real", real_dir, "Real videos")->required();
  fvd_cmd->add_option("--fake", fake_dir, "Generated videos")->required();
  fvd_cmd->add_option("--embedder", embedder_spec, "random | random:<seed> | i3d:<weights>");
  fvd_cmd->add_option("--clip-len", clip_len, "Frames per clip")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    report_error("usage", e.what());
    return kExitUsage;
  }

  try {
    if (*prepare_cmd) {
      PipelineConfig cfg = load_pipeline_config(prepare_config);
      if (!prepare_manifest.empty()) cfg.manifest = prepare_manifest;
      const PrepareReport report = prepare(load_manifest(cfg.manifest), cfg);
      json errors = json::array();
      for (const auto& [video, msg] : report.errors) errors.push_back(json{{"video", video}, {"error", msg}});
      std::cout << json{{"prepared", report.prepared}, {"errors", errors}}.dump() << std::endl;
      if (!report.errors.empty()) {
        report_error("runtime", std::to_string(report.errors.size()) + " video(s) failed to prepare");
        return kExitFailure;
      }
      return kExitOk;
    }
    if (*train_cmd) {
      const PipelineConfig cfg = load_pipeline_config(train_config);
      const uint64_t seed = train_seed >= 0 ? static_cast<uint64_t>(train_seed) : cfg.seed;
      const json summary = train_stage(train_stage_name, cfg, seed, train_no_flow);
      std::cout << summary.dump() << std::endl;
      return kExitOk;
    }
    if (*transfer_cmd) return do_transfer(ta);
    if (*fvd_cmd) {
      const auto embedder = make_embedder(embedder_spec);
      const FvdReport r = compute_fvd(load_video_set(real_dir), load_video_set(fake_dir), *embedder, clip_len);
      std::cout << json{{"fvd", r.fvd}, {"n_real", r.n_real}, {"n_fake", r.n_fake}, {"d", r.d}}.dump() << std::endl;
      return kExitOk;
    }
  } catch (const StageError& e) {
    report_error("stage", e.what(), e.stage());
    return kExitFailure;
  } catch (const InvalidArgument& e) {
    report_error("invalid_argument", e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    report_error("runtime", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace cpf
