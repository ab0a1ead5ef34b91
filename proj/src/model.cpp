#include "dtrattunet/model.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "dtrattunet/checkpoint.hpp"
#include "dtrattunet/errors.hpp"

namespace dtrattunet {

namespace {

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

int64_t log2_exact(int64_t v) {
  int64_t n = 0;
  while (v > 1) {
    v >>= 1;
    ++n;
  }
  return n;
}

struct VariantFlags {
  const char* name;
  bool gates;
  bool dual;
  bool transformer;
};

constexpr std::array<VariantFlags, 8> kVariants{{
    {"unet", false, false, false},
    {"attunet", true, false, false},
    {"d-trunet", false, true, true},
    {"d-attunet", true, true, false},
    {"trattunet", true, false, true},
    {"d-trattunet", true, true, true},
    {"d-unet", false, true, false},
    {"trunet", false, false, true},
}};

}  // namespace

std::string to_string(Task task) { return task == Task::Binary ? "binary" : "multiclass"; }

Task task_from_string(const std::string& name) {
  if (name == "binary") return Task::Binary;
  if (name == "multiclass") return Task::Multiclass;
  throw ConfigError("unknown task '" + name + "' (expected binary or multiclass)");
}

ModelConfig ModelConfig::standard() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.image_size = 64;
  c.patch_size = 16;
  c.embed_dim = 96;
  c.depth = 4;
  c.heads = 4;
  c.mlp_dim = 384;
  c.tap_layers = {1, 2, 3, 4};
  c.encoder_channels = {16, 32, 64, 128, 256};
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (input_channels <= 0) fail("input_channels must be positive");
  if (image_size <= 0 || image_size % 16 != 0) fail("image_size must be a positive multiple of 16");
  if (encoder_channels.size() != 5) fail("encoder_channels must list exactly 5 widths");
  for (auto c : encoder_channels) {
    if (c <= 0) fail("encoder_channels must be strictly positive");
  }
  if (num_infection_classes != 1 && num_infection_classes != 3) {
    fail("num_infection_classes must be 1 (binary) or 3 (multiclass)");
  }
  if (!use_transformer_encoder) return;
  if (patch_size <= 0 || image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (!is_power_of_two(patch_size) || patch_size < 16) {
    fail("patch_size must be a power of two >= 16 so every tap aligns with an encoder stage");
  }
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (depth <= 0 || mlp_dim <= 0) fail("depth and mlp_dim must be positive");
  if (tap_layers.size() != 4) fail("tap_layers must list exactly 4 layers");
  for (std::size_t i = 0; i < tap_layers.size(); ++i) {
    if (tap_layers[i] < 1 || tap_layers[i] > depth) fail("tap_layers must lie in [1, depth]");
    if (i > 0 && tap_layers[i] <= tap_layers[i - 1]) fail("tap_layers must be strictly increasing");
  }
}

std::array<int64_t, 4> ModelConfig::injection_channels() const {
  std::array<int64_t, 4> widths{};
  for (std::size_t i = 0; i < 4; ++i) widths[i] = std::max<int64_t>(1, encoder_channels.at(i + 1) / 2);
  return widths;
}

int64_t ModelConfig::ladder_upsamplings(std::size_t tap) const {
  // Tap i feeds stage i + 2, which sits at image_size / 2^(i + 1).
  return log2_exact(patch_size) - static_cast<int64_t>(tap) - 1;
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"input_channels", input_channels},
      {"image_size", image_size},
      {"patch_size", patch_size},
      {"embed_dim", embed_dim},
      {"depth", depth},
      {"heads", heads},
      {"mlp_dim", mlp_dim},
      {"tap_layers", tap_layers},
      {"encoder_channels", encoder_channels},
      {"num_infection_classes", num_infection_classes},
      {"use_attention_gates", use_attention_gates},
      {"use_dual_decoder", use_dual_decoder},
      {"use_transformer_encoder", use_transformer_encoder},
      {"use_position_embedding", use_position_embedding},
      {"pretrained_transformer", pretrained_transformer},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.input_channels = j.at("input_channels").get<int64_t>();
    c.image_size = j.at("image_size").get<int64_t>();
    c.patch_size = j.at("patch_size").get<int64_t>();
    c.embed_dim = j.at("embed_dim").get<int64_t>();
    c.depth = j.at("depth").get<int64_t>();
    c.heads = j.at("heads").get<int64_t>();
    c.mlp_dim = j.at("mlp_dim").get<int64_t>();
    c.tap_layers = j.at("tap_layers").get<std::vector<int64_t>>();
    c.encoder_channels = j.at("encoder_channels").get<std::vector<int64_t>>();
    c.num_infection_classes = j.at("num_infection_classes").get<int64_t>();
    c.use_attention_gates = j.at("use_attention_gates").get<bool>();
    c.use_dual_decoder = j.at("use_dual_decoder").get<bool>();
    c.use_transformer_encoder = j.at("use_transformer_encoder").get<bool>();
    c.use_position_embedding = j.value("use_position_embedding", true);
    c.pretrained_transformer = j.value("pretrained_transformer", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config json: ") + e.what());
  }
  return c;
}

std::string ModelConfig::hash() const {
  auto j = to_json();
  j.erase("pretrained_transformer");
  const std::string canonical = j.dump();
  // FNV-1a, 64 bit
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string variant_name(const ModelConfig& config) {
  for (const auto& v : kVariants) {
    if (v.gates == config.use_attention_gates && v.dual == config.use_dual_decoder &&
        v.transformer == config.use_transformer_encoder) {
      return v.name;
    }
  }
  return "unknown";  // unreachable: the table covers all eight combinations
}

ModelConfig with_variant(ModelConfig config, const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const auto& v : kVariants) {
    if (lower == v.name) {
      config.use_attention_gates = v.gates;
      config.use_dual_decoder = v.dual;
      config.use_transformer_encoder = v.transformer;
      return config;
    }
  }
  throw ConfigError("unknown variant '" + name + "'");
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& v : kVariants) n.emplace_back(v.name);
    return n;
  }();
  return names;
}

// ---------------------------------------------------------------------------

TransformerPathImpl::TransformerPathImpl(const ModelConfig& config) : taps(config.tap_layers) {
  embedding = register_module(
      "embedding", PatchEmbedding(config.input_channels, config.patch_size, config.embed_dim, config.token_count(),
                                  config.use_position_embedding));
  layers = register_module("layers", torch::nn::ModuleList());
  for (int64_t i = 0; i < config.depth; ++i) {
    layers->push_back(TransformerLayer(config.embed_dim, config.heads, config.mlp_dim));
  }
}

std::vector<torch::Tensor> TransformerPathImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> tapped;
  tapped.reserve(taps.size());
  auto z = embedding(x);
  std::size_t next_tap = 0;
  for (int64_t layer = 1; layer <= taps.back(); ++layer) {
    z = layers[static_cast<std::size_t>(layer - 1)]->as<TransformerLayer>()->forward(z);
    ++layer_invocations;
    if (layer == taps[next_tap]) {
      tapped.push_back(z);
      ++next_tap;
    }
  }
  return tapped;
}

TransformerLadderImpl::TransformerLadderImpl(const ModelConfig& config) {
  const auto widths = config.injection_channels();
  for (std::size_t i = 0; i < 4; ++i) {
    torch::nn::Sequential chain;
    const int64_t ups = config.ladder_upsamplings(i);
    int64_t in = config.embed_dim;
    if (ups == 0) {
      chain->push_back(ResBlock(in, widths[i]));
    }
    for (int64_t u = 0; u < ups; ++u) {
      chain->push_back(UpResBlock(in, widths[i]));
      in = widths[i];
    }
    chains.push_back(register_module("chain" + std::to_string(i + 1), chain));
  }
}

std::vector<torch::Tensor> TransformerLadderImpl::forward(const std::vector<torch::Tensor>& taps) {
  if (taps.size() != chains.size()) {
    throw ValidationError("TransformerLadder: expected " + std::to_string(chains.size()) + " tapped sequences");
  }
  std::vector<torch::Tensor> out;
  out.reserve(taps.size());
  for (std::size_t i = 0; i < taps.size(); ++i) out.push_back(chains[i]->forward(tokens_to_map(taps[i])));
  return out;
}

FusionEncoderImpl::FusionEncoderImpl(const ModelConfig& config) : fused(config.use_transformer_encoder) {
  const auto& widths = config.encoder_channels;
  const auto inject = config.injection_channels();
  stages.push_back(register_module("stage1", ResBlock(config.input_channels, widths[0])));
  for (std::size_t i = 1; i < 5; ++i) {
    const int64_t in = widths[i - 1] + (fused ? inject[i - 1] : 0);
    stages.push_back(register_module("stage" + std::to_string(i + 1), ResBlock(in, widths[i])));
  }
}

EncoderBundle FusionEncoderImpl::forward(const torch::Tensor& x, const std::vector<torch::Tensor>& injections) {
  if (fused && injections.size() != 4) {
    throw ValidationError("FusionEncoder: expected 4 transformer injections");
  }
  EncoderBundle bundle;
  bundle.stages[0] = stages[0]->forward(x);
  for (std::size_t i = 1; i < 5; ++i) {
    auto pooled = torch::max_pool2d(bundle.stages[i - 1], {2, 2});
    if (fused) {
      const auto& z = injections[i - 1];
      if (z.size(2) != pooled.size(2) || z.size(3) != pooled.size(3)) {
        throw ValidationError("FusionEncoder: injection " + std::to_string(i) + " is " + std::to_string(z.size(2)) +
                              "x" + std::to_string(z.size(3)) + " but the pooled stage is " +
                              std::to_string(pooled.size(2)) + "x" + std::to_string(pooled.size(3)));
      }
      pooled = torch::cat({z, pooled}, 1);
    }
    bundle.stages[i] = stages[i]->forward(pooled);
  }
  return bundle;
}

DecoderImpl::DecoderImpl(const std::vector<int64_t>& widths, bool use_attention_gates) : gated(use_attention_gates) {
  // Stage k (k = 4..1) joins skip x_k with the upsampled previous map.
  int64_t previous = widths.at(4);
  for (int k = 4; k >= 1; --k) {
    const int64_t skip = widths.at(static_cast<std::size_t>(k - 1));
    if (gated) gates.push_back(register_module("gate" + std::to_string(k), AttentionGate(skip, previous)));
    blocks.push_back(register_module("block" + std::to_string(k), ResBlock(skip + previous, skip)));
    previous = skip;
  }
}

torch::Tensor DecoderImpl::forward(const EncoderBundle& bundle) {
  auto d = bundle.stages[4];
  for (std::size_t step = 0; step < 4; ++step) {
    const auto& skip = bundle.stages[3 - step];
    auto up = upsample2x(d);  // shared by the gate and the concatenation
    auto attended = gated ? gates[step]->forward(skip, up) : skip;
    d = blocks[step]->forward(torch::cat({attended, up}, 1));
  }
  return d;
}

DTrAttUnetImpl::DTrAttUnetImpl(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  if (config_.use_transformer_encoder) {
    transformer = register_module("transformer", TransformerPath(config_));
    ladder = register_module("ladder", TransformerLadder(config_));
  }
  encoder = register_module("encoder", FusionEncoder(config_));
  infection_decoder =
      register_module("infection_decoder", Decoder(config_.encoder_channels, config_.use_attention_gates));
  const int64_t head_in = config_.encoder_channels[0];
  auto make_head = [&](int64_t out) {
    auto head = torch::nn::Conv2d(torch::nn::Conv2dOptions(head_in, out, 1));
    torch::nn::init::kaiming_normal_(head->weight, 0.0, torch::kFanIn, torch::kLinear);
    torch::nn::init::zeros_(head->bias);
    return head;
  };
  infection_head = register_module("infection_head", make_head(config_.num_infection_classes));
  if (config_.use_dual_decoder) {
    lung_decoder = register_module("lung_decoder", Decoder(config_.encoder_channels, config_.use_attention_gates));
    lung_head = register_module("lung_head", make_head(1));
  }
}

EncoderBundle DTrAttUnetImpl::encode(const torch::Tensor& x) {
  require_feature_map(x, "D-TrAttUnet input");
  if (x.size(1) != config_.input_channels || x.size(2) != config_.image_size || x.size(3) != config_.image_size) {
    throw ValidationError("D-TrAttUnet: input must be Bx" + std::to_string(config_.input_channels) + "x" +
                          std::to_string(config_.image_size) + "x" + std::to_string(config_.image_size));
  }
  require_finite(x, "D-TrAttUnet input");
  std::vector<torch::Tensor> injections;
  if (config_.use_transformer_encoder) injections = ladder(transformer(x));
  return encoder(x, injections);
}

DualOutput DTrAttUnetImpl::forward(const torch::Tensor& x) {
  const auto bundle = encode(x);
  DualOutput out;
  out.infection_logits = infection_head(infection_decoder(bundle));
  if (config_.use_dual_decoder) out.lung_logits = lung_head(lung_decoder(bundle));
  return out;
}

DTrAttUnet build_variant(const ModelConfig& config) {
  config.validate();
  DTrAttUnet model(config);
  if (!config.pretrained_transformer.empty()) {
    if (!config.use_transformer_encoder) {
      throw ConfigError("pretrained_transformer given but the transformer encoder is disabled");
    }
    load_transformer_weights(*model, config.pretrained_transformer);
  }
  return model;
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t total = 0;
  for (const auto& p : module.parameters()) total += p.numel();
  return total;
}

std::vector<ManifestEntry> layer_manifest(const torch::nn::Module& module) {
  std::vector<ManifestEntry> entries;
  for (const auto& item : module.named_parameters()) {
    entries.push_back({item.key(), item.value().sizes().vec(), item.value().numel(), true});
  }
  for (const auto& item : module.named_buffers()) {
    entries.push_back({item.key(), item.value().sizes().vec(), item.value().numel(), false});
  }
  return entries;
}

nlohmann::json manifest_json(const DTrAttUnetImpl& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& e : layer_manifest(model)) {
    layers.push_back({{"name", e.name}, {"shape", e.shape}, {"count", e.count}, {"trainable", e.trainable}});
  }
  return {{"variant", model.name()},
          {"config_hash", model.config().hash()},
          {"config", model.config().to_json()},
          {"parameter_count", parameter_count(model)},
          {"layers", layers}};
}

std::string manifest_text(const DTrAttUnetImpl& model) {
  std::ostringstream os;
  os << "# " << model.name() << " config_hash=" << model.config().hash()
     << " parameters=" << parameter_count(model) << '\n';
  for (const auto& e : layer_manifest(model)) {
    os << e.name << " [";
    for (std::size_t i = 0; i < e.shape.size(); ++i) os << (i ? "x" : "") << e.shape[i];
    os << "] " << e.count << (e.trainable ? "" : " (buffer)") << '\n';
  }
  return os.str();
}

}  // namespace dtrattunet
