#pragma once

// Single-file checkpoint container:
//
//   8 bytes   magic "DTRATCKP"
//   u32       format version
//   u64       manifest length in bytes
//   ...       manifest (UTF-8 JSON)
//   ...       tensor blobs, little endian, at the offsets listed in
//             manifest["tensors"] relative to the end of the manifest
//
// The manifest carries config_hash, epoch, task, metrics, format_version and
// the full model/train configuration.

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dtrattunet/model.hpp"
#include "dtrattunet/training.hpp"

namespace dtrattunet {

inline constexpr uint32_t kCheckpointFormatVersion = 1;

struct TensorBlob {
  std::string name;
  torch::Tensor value;
};

struct Container {
  nlohmann::json manifest;
  std::vector<TensorBlob> tensors;
};

void write_container(const std::filesystem::path& path, nlohmann::json manifest, const std::vector<TensorBlob>& tensors);
Container read_container(const std::filesystem::path& path);

// Parameters and buffers (prefix "model/") plus Adam moments (prefix "adam/").
void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const DTrAttUnetImpl& model,
                     const torch::optim::Adam* optimizer, const TrainConfig& train_config,
                     const nlohmann::json& metrics = {});

struct LoadedCheckpoint {
  nlohmann::json manifest;
  TrainState state;
  ModelConfig model_config;
  TrainConfig train_config;
};

// Reads only the manifest; used to build a matching model before loading.
LoadedCheckpoint read_checkpoint_info(const std::filesystem::path& path);

// Copies every stored tensor into the model (and the optimizer when given).
// Throws ConfigError when the stored config hash differs from the model's and
// allow_config_mismatch is false.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, DTrAttUnetImpl& model,
                                 torch::optim::Adam* optimizer = nullptr, bool allow_config_mismatch = false);

// Initializes the transformer path from the "model/transformer." tensors of a checkpoint.
void load_transformer_weights(DTrAttUnetImpl& model, const std::filesystem::path& path);

}  // namespace dtrattunet
