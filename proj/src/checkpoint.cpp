#include "cpf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cpf/errors.hpp"

namespace cpf {

namespace {

constexpr char kMagic[4] = {'C', 'P', 'F', 'T'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw std::runtime_error("truncated tensor file");
  return value;
}

}  // namespace

void save_tensors(const TensorMap& tensors, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, 4);
  put<uint32_t>(out, kVersion);
  put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint32_t>(out, static_cast<uint32_t>(tensor.dim()));
    for (int64_t d : tensor.sizes()) put<int64_t>(out, d);
    auto data = tensor.detach().to(torch::kFloat32).contiguous();
    out.write(reinterpret_cast<const char*>(data.data_ptr<float>()),
              static_cast<std::streamsize>(data.numel() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

TensorMap load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw InvalidArgument(path.string() + ": not a tensor container");
  }
  if (get<uint32_t>(in) != kVersion) throw InvalidArgument(path.string() + ": unsupported version");
  const auto count = get<uint32_t>(in);
  TensorMap tensors;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name(get<uint32_t>(in), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw std::runtime_error("truncated tensor file");
    const auto ndim = get<uint32_t>(in);
    std::vector<int64_t> dims(ndim);
    for (auto& d : dims) {
      d = get<int64_t>(in);
      if (d < 0) throw InvalidArgument(path.string() + ": negative dimension");
    }
    auto tensor = torch::empty(dims, torch::kFloat32);
    if (!in.read(reinterpret_cast<char*>(tensor.data_ptr<float>()),
                 static_cast<std::streamsize>(tensor.numel() * sizeof(float)))) {
      throw std::runtime_error("truncated tensor file");
    }
    tensors.emplace(std::move(name), std::move(tensor));
  }
  return tensors;
}

TensorMap module_state(const torch::nn::Module& module) {
  TensorMap state;
  for (const auto& item : module.named_parameters(true)) state[item.key()] = item.value();
  for (const auto& item : module.named_buffers(true)) state[item.key()] = item.value();
  return state;
}

void load_module_state(torch::nn::Module& module, const TensorMap& tensors) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw InvalidArgument("checkpoint is missing tensor " + name);
    if (!it->second.sizes().equals(target.sizes())) {
      throw InvalidArgument("checkpoint tensor " + name + " has the wrong shape");
    }
    target.copy_(it->second);
  };
  for (auto& item : module.named_parameters(true)) assign(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) assign(item.key(), item.value());
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint_path) {
  return std::filesystem::path(checkpoint_path.string() + ".json");
}

void save_checkpoint(const torch::nn::Module& module, const nlohmann::json& config,
                     const std::filesystem::path& path) {
  save_tensors(module_state(module), path);
  std::ofstream out(sidecar_path(path), std::ios::binary);
  if (!out) throw std::runtime_error("cannot write sidecar for " + path.string());
  out << config.dump(2) << '\n';
}

nlohmann::json load_sidecar(const std::filesystem::path& checkpoint_path) {
  std::ifstream in(sidecar_path(checkpoint_path));
  if (!in) throw std::runtime_error("missing config sidecar for " + checkpoint_path.string());
  return nlohmann::json::parse(in);
}

}  // namespace cpf
