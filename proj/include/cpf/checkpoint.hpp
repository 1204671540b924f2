#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"

namespace cpf {

// Binary container of named float32 tensors:
//   "CPFT" | u32 version | u32 count | count x { u32 name_len | name |
//   u32 ndim | ndim x i64 dims | float32 data }
// All integers little-endian. Tensors are written in name order so the bytes
// depend only on the contents.
using TensorMap = std::map<std::string, torch::Tensor>;

void save_tensors(const TensorMap& tensors, const std::filesystem::path& path);
TensorMap load_tensors(const std::filesystem::path& path);

// Parameters and buffers of a module keyed by their dotted names.
TensorMap module_state(const torch::nn::Module& module);
// Copies tensors into a module; every parameter and buffer must be present
// with a matching shape.
void load_module_state(torch::nn::Module& module, const TensorMap& tensors);

// Writes `<path>` (tensors) and `<path>.json` (config sidecar).
void save_checkpoint(const torch::nn::Module& module, const nlohmann::json& config,
                     const std::filesystem::path& path);
nlohmann::json load_sidecar(const std::filesystem::path& checkpoint_path);
std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint_path);

}  // namespace cpf
