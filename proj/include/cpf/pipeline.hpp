#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cpf/flow_stage.hpp"
#include "cpf/foreground_stage.hpp"
#include "cpf/fusion_stage.hpp"
#include "cpf/image.hpp"
#include "cpf/parsing_stage.hpp"
#include "cpf/pose_toolkit.hpp"
#include "cpf/region_ops.hpp"
#include "json.hpp"

namespace cpf {

// Relative manifest paths resolve against this directory when it is set.
inline constexpr const char* kDataRootEnv = "CPF_DATA_ROOT";

struct VideoEntry {
  std::string name;
  std::filesystem::path frames;     // directory of PNG frames
  std::filesystem::path keypoints;  // one pose line per frame
  std::filesystem::path parsing;    // directory of label PNGs
  std::filesystem::path background;
  int appearance_index = -1;  // -1: chosen by select_appearance_frame
  int64_t width = 1280;
  int64_t height = 720;
  std::string split = "train";
};

void to_json(nlohmann::json& j, const VideoEntry& v);
void from_json(const nlohmann::json& j, VideoEntry& v);

struct DatasetManifest {
  std::vector<VideoEntry> videos;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
// Problems with one entry (missing files, bad split, bad index); empty when valid.
std::vector<std::string> validate_entry(const VideoEntry& entry);

struct PipelineConfig {
  std::filesystem::path manifest;
  std::filesystem::path prepared_dir = "prepared";
  std::filesystem::path models_dir = "models";
  int64_t working_size = kWorkingSize;
  bool no_flow = false;
  bool no_fusion = false;
  uint64_t seed = 0;
  SmoothingConfig smoothing;
  double pose_crop_margin = 0.25;
  int flow_scenes = 64;  // synthetic correspondence scenes for flow training
  ParsingStageConfig parsing;
  FlowStageConfig flow;
  ForegroundStageConfig foreground;
  FusionStageConfig fusion;

  // Throws InvalidArgument when the working size is not a multiple of every
  // generator's stride or a stage resolution disagrees with it.
  void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);
// Relative paths inside the file resolve against the file's directory.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// Savitzky-Golay smoothing with the window shrunk (odd, > polyorder) for
// sequences shorter than it; sequences too short for any fit are returned unchanged.
PoseSequence smooth_for_length(const PoseSequence& seq, const SmoothingConfig& cfg);

struct PrepareReport {
  std::vector<std::string> prepared;
  std::vector<std::pair<std::string, std::string>> errors;  // (video, message)
};

// Per video: smoothed keypoints, appearance index, working-size foreground and
// parsing crops with their CropRecords. Videos are processed in parallel; a
// failing video is reported and the others continue. Writes
// <prepared>/manifest.json and <prepared>/report.json.
PrepareReport prepare(const DatasetManifest& manifest, const PipelineConfig& cfg);

struct PreparedVideo {
  std::string name;
  std::string split;
  Frame background;
  size_t appearance_index = 0;
  PoseSequence poses;  // smoothed, source-frame coordinates
  std::vector<CropRecord> records;
  FrameSequence foreground_crops;
  std::vector<ParsingMap> parsing_crops;
  std::filesystem::path frames_dir;
  std::filesystem::path parsing_dir;
};

std::vector<PreparedVideo> load_prepared(const PipelineConfig& cfg, const std::string& split = "train");

// Pose map of `pose` in the working crop defined by `rec`.
torch::Tensor working_pose_map(const PoseFrame& pose, const CropRecord& rec, double sigma);

std::vector<ParsingSample> build_parsing_dataset(const std::vector<PreparedVideo>& videos, const PipelineConfig& cfg);
std::vector<FlowSample> build_flow_dataset(const PipelineConfig& cfg, uint64_t seed);

struct StageModels {
  ParsingGenerator parsing{nullptr};
  FlowRegressor flow{nullptr};
  DualPathGenerator foreground{nullptr};
  FusionNetwork fusion{nullptr};
  double parsing_sigma = 6.0;
  double flow_sigma = 6.0;
};

std::filesystem::path checkpoint_path(const PipelineConfig& cfg, const std::string& stage, bool no_flow = false);

// Trains one stage ("parsing", "flow", "foreground", "fusion") on the prepared
// data and writes its checkpoint plus config sidecar. Returns a JSON summary.
nlohmann::json train_stage(const std::string& stage, const PipelineConfig& cfg, uint64_t seed, bool no_flow);

// Loads every checkpoint needed for inference. Missing files or a resolution
// different from the working size raise a StageError naming the stage.
StageModels load_models(const PipelineConfig& cfg, bool no_flow, bool no_fusion);

struct AppearanceInput {
  Frame frame;
  ParsingMap parsing;
  PoseFrame pose;
};

struct TransferOptions {
  int64_t working_size = kWorkingSize;
  bool no_flow = false;
  bool no_fusion = false;
  double pose_crop_margin = 0.25;
};

struct TransferResult {
  FrameSequence frames;
  std::vector<ParsingMap> parsing;     // working resolution
  FrameSequence foregrounds;           // restored to the output frame
  std::vector<torch::Tensor> masks;    // binary [H, W] restored parsing masks
  std::vector<CropRecord> records;
};

// Stages 1 and 2 run per frame (in parallel), then fusion runs over the
// sequence. `source` should already be smoothed. Models are not modified.
TransferResult transfer(const AppearanceInput& appearance, const PoseSequence& source, StageModels& models,
                        const Frame& background, const TransferOptions& options);

}  // namespace cpf
