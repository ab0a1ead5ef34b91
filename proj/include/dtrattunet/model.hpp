#pragma once

// D-TrAttUnet: a transformer path whose intermediate layers are laddered up
// and fused into a residual CNN encoder, followed by one or two
// attention-gated decoders (infection and lung).

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtrattunet/blocks.hpp"

namespace dtrattunet {

enum class Task { Binary, Multiclass };

std::string to_string(Task task);
Task task_from_string(const std::string& name);

struct ModelConfig {
  int64_t input_channels = 3;
  int64_t image_size = 224;
  int64_t patch_size = 16;
  int64_t embed_dim = 768;
  int64_t depth = 12;
  int64_t heads = 12;
  int64_t mlp_dim = 3072;
  std::vector<int64_t> tap_layers{4, 7, 10, 12};
  std::vector<int64_t> encoder_channels{64, 128, 256, 512, 1024};
  int64_t num_infection_classes = 1;
  bool use_attention_gates = true;
  bool use_dual_decoder = true;
  bool use_transformer_encoder = true;
  bool use_position_embedding = true;
  // Checkpoint whose "transformer." tensors initialize the transformer path.
  std::string pretrained_transformer;

  // Full-size configuration: 224 input, ViT-Base transformer.
  static ModelConfig standard();
  // CPU-sized configuration used by the test suites.
  static ModelConfig desk();

  void validate() const;  // throws ConfigError

  Task task() const { return num_infection_classes == 1 ? Task::Binary : Task::Multiclass; }
  int64_t grid_size() const { return image_size / patch_size; }
  int64_t token_count() const { return grid_size() * grid_size(); }
  // Widths of the four transformer injections (half of the matching encoder stage).
  std::array<int64_t, 4> injection_channels() const;
  // Number of x2 upsamplings needed to bring tap i (0-based) to encoder stage i + 2.
  int64_t ladder_upsamplings(std::size_t tap) const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  // Stable hex digest of everything that shapes the parameter set.
  std::string hash() const;
};

// Names of the ablation variants, e.g. "d-trattunet", "unet".
std::string variant_name(const ModelConfig& config);
// Sets the three variant flags from a name; throws ConfigError for unknown names.
ModelConfig with_variant(ModelConfig config, const std::string& name);
const std::vector<std::string>& variant_names();

struct EncoderBundle {
  std::array<torch::Tensor, 5> stages;  // x1 (full resolution) ... x5 (1/16)
};

struct DualOutput {
  torch::Tensor infection_logits;  // (B, classes, H, W)
  torch::Tensor lung_logits;       // (B, 1, H, W); undefined without the dual decoder
};

/// Patch embedding followed by `depth` transformer layers run once; the
/// outputs after the tap layers are returned.
struct TransformerPathImpl : torch::nn::Module {
  explicit TransformerPathImpl(const ModelConfig& config);

  std::vector<torch::Tensor> forward(const torch::Tensor& x);

  std::vector<int64_t> taps;
  PatchEmbedding embedding{nullptr};
  torch::nn::ModuleList layers{nullptr};
  int64_t layer_invocations = 0;  // running count of transformer layer calls
};
TORCH_MODULE(TransformerPath);

/// Reshapes the four tapped token sequences to grids and brings each one to
/// the resolution of its encoder stage with a chain of UpResBlocks (a single
/// ResBlock when no upsampling is needed).
struct TransformerLadderImpl : torch::nn::Module {
  explicit TransformerLadderImpl(const ModelConfig& config);

  std::vector<torch::Tensor> forward(const std::vector<torch::Tensor>& taps);

  std::vector<torch::nn::Sequential> chains;
};
TORCH_MODULE(TransformerLadder);

/// Five ResBlock stages; stages 2..5 consume [injection, maxpool(previous)].
struct FusionEncoderImpl : torch::nn::Module {
  explicit FusionEncoderImpl(const ModelConfig& config);

  // `injections` is empty when the transformer encoder is disabled.
  EncoderBundle forward(const torch::Tensor& x, const std::vector<torch::Tensor>& injections);

  bool fused;
  std::vector<ResBlock> stages;
};
TORCH_MODULE(FusionEncoder);

/// Four upsample / gate / concat / ResBlock stages from x5 back to full
/// resolution. Without gates the raw skip is concatenated.
struct DecoderImpl : torch::nn::Module {
  DecoderImpl(const std::vector<int64_t>& encoder_channels, bool use_attention_gates);

  torch::Tensor forward(const EncoderBundle& bundle);

  bool gated;
  std::vector<AttentionGate> gates;  // empty when not gated
  std::vector<ResBlock> blocks;
};
TORCH_MODULE(Decoder);

struct DTrAttUnetImpl : torch::nn::Module {
  explicit DTrAttUnetImpl(ModelConfig config);

  DualOutput forward(const torch::Tensor& x);
  EncoderBundle encode(const torch::Tensor& x);

  const ModelConfig& config() const { return config_; }
  std::string name() const { return variant_name(config_); }

  TransformerPath transformer{nullptr};
  TransformerLadder ladder{nullptr};
  FusionEncoder encoder{nullptr};
  Decoder infection_decoder{nullptr};
  Decoder lung_decoder{nullptr};
  torch::nn::Conv2d infection_head{nullptr};
  torch::nn::Conv2d lung_head{nullptr};

 private:
  ModelConfig config_;
};
TORCH_MODULE(DTrAttUnet);

// Validates the configuration and constructs the matching variant.
DTrAttUnet build_variant(const ModelConfig& config);

int64_t parameter_count(const torch::nn::Module& module);

struct ManifestEntry {
  std::string name;
  std::vector<int64_t> shape;
  int64_t count = 0;
  bool trainable = true;
};

// Every parameter and buffer with its shape, in registration order.
std::vector<ManifestEntry> layer_manifest(const torch::nn::Module& module);
nlohmann::json manifest_json(const DTrAttUnetImpl& model);
std::string manifest_text(const DTrAttUnetImpl& model);

}  // namespace dtrattunet
