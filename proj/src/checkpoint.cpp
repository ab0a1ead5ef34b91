#include "dtrattunet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "dtrattunet/errors.hpp"

namespace dtrattunet {

namespace {

constexpr char kMagic[8] = {'D', 'T', 'R', 'A', 'T', 'C', 'K', 'P'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kInt32: return "int32";
    case torch::kUInt8: return "uint8";
    default: throw ValidationError(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from(const std::string& name) {
  static const std::map<std::string, torch::ScalarType> types{{"float32", torch::kFloat32},
                                                              {"float64", torch::kFloat64},
                                                              {"int64", torch::kInt64},
                                                              {"int32", torch::kInt32},
                                                              {"uint8", torch::kUInt8}};
  auto it = types.find(name);
  if (it == types.end()) throw DataError("checkpoint: unknown dtype " + name);
  return it->second;
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) throw DataError("truncated checkpoint " + path.string());
  return v;
}

std::map<std::string, torch::Tensor> by_name(const std::vector<TensorBlob>& blobs) {
  std::map<std::string, torch::Tensor> m;
  for (const auto& b : blobs) m.emplace(b.name, b.value);
  return m;
}

void copy_into(torch::Tensor& dst, const torch::Tensor& src, const std::string& name) {
  if (dst.sizes() != src.sizes()) {
    throw DataError("checkpoint tensor " + name + " has shape " + c10::str(src.sizes()) + ", model expects " +
                    c10::str(dst.sizes()));
  }
  torch::NoGradGuard no_grad;
  dst.copy_(src);
}

}  // namespace

void write_container(const std::filesystem::path& path, nlohmann::json manifest, const std::vector<TensorBlob>& tensors) {
  std::vector<torch::Tensor> data;
  nlohmann::json index = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& t : tensors) {
    auto c = t.value.detach().cpu().contiguous();
    const uint64_t nbytes = static_cast<uint64_t>(c.numel()) * c.element_size();
    index.push_back({{"name", t.name},
                     {"dtype", dtype_name(c.scalar_type())},
                     {"shape", c.sizes().vec()},
                     {"offset", offset},
                     {"nbytes", nbytes}});
    offset += nbytes;
    data.push_back(std::move(c));
  }
  manifest["tensors"] = index;
  manifest["format_version"] = kCheckpointFormatVersion;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kCheckpointFormatVersion);
    write_pod(out, static_cast<uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& c : data) {
      out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.numel() * c.element_size()));
    }
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  const auto version = read_pod<uint32_t>(in, path);
  if (version != kCheckpointFormatVersion) {
    throw DataError("unsupported checkpoint format version " + std::to_string(version) + " in " + path.string());
  }
  const auto length = read_pod<uint64_t>(in, path);
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw DataError("truncated checkpoint " + path.string());

  Container c;
  try {
    c.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
  }
  const auto base = in.tellg();
  for (const auto& entry : c.manifest.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype").get<std::string>())));
    const auto nbytes = entry.at("nbytes").get<uint64_t>();
    if (nbytes != static_cast<uint64_t>(t.numel()) * t.element_size()) {
      throw DataError("checkpoint entry size mismatch for " + entry.at("name").get<std::string>());
    }
    in.seekg(base + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    if (nbytes && !in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes))) {
      throw DataError("truncated checkpoint data in " + path.string());
    }
    c.tensors.push_back({entry.at("name").get<std::string>(), t});
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const DTrAttUnetImpl& model,
                     const torch::optim::Adam* optimizer, const TrainConfig& train_config,
                     const nlohmann::json& metrics) {
  std::vector<TensorBlob> blobs;
  for (const auto& p : model.named_parameters()) blobs.push_back({"model/" + p.key(), p.value()});
  for (const auto& b : model.named_buffers()) blobs.push_back({"model/" + b.key(), b.value()});

  nlohmann::json adam_steps = nlohmann::json::object();
  if (optimizer) {
    const auto& states = optimizer->state();
    for (const auto& p : model.named_parameters()) {
      auto it = states.find(p.value().unsafeGetTensorImpl());
      if (it == states.end()) continue;
      const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
      adam_steps[p.key()] = s.step();
      blobs.push_back({"adam/" + p.key() + "/exp_avg", s.exp_avg()});
      blobs.push_back({"adam/" + p.key() + "/exp_avg_sq", s.exp_avg_sq()});
      if (s.max_exp_avg_sq().defined()) blobs.push_back({"adam/" + p.key() + "/max_exp_avg_sq", s.max_exp_avg_sq()});
    }
  }

  nlohmann::json manifest = {{"config_hash", model.config().hash()},
                             {"epoch", state.epoch},
                             {"task", to_string(model.config().task())},
                             {"variant", model.name()},
                             {"metrics", metrics.is_null() ? nlohmann::json::object() : metrics},
                             {"loss_weights", {train_config.infection_weight, train_config.lung_weight}},
                             {"model_config", model.config().to_json()},
                             {"train_config", train_config.to_json()},
                             {"train_state", state.to_json()},
                             {"adam_steps", adam_steps}};
  write_container(path, std::move(manifest), blobs);
}

namespace {

LoadedCheckpoint parse_info(const nlohmann::json& manifest, const std::filesystem::path& path) {
  LoadedCheckpoint info;
  info.manifest = manifest;
  try {
    info.model_config = ModelConfig::from_json(manifest.at("model_config"));
    info.train_config = TrainConfig::from_json(manifest.at("train_config"));
    info.state = TrainState::from_json(manifest.at("train_state"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + " has an incomplete manifest: " + e.what());
  }
  return info;
}

}  // namespace

LoadedCheckpoint read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  read_pod<uint32_t>(in, path);
  const auto length = read_pod<uint64_t>(in, path);
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw DataError("truncated checkpoint " + path.string());
  try {
    return parse_info(nlohmann::json::parse(text), path);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, DTrAttUnetImpl& model,
                                 torch::optim::Adam* optimizer, bool allow_config_mismatch) {
  auto c = read_container(path);
  auto info = parse_info(c.manifest, path);
  const auto stored_hash = c.manifest.at("config_hash").get<std::string>();
  if (stored_hash != model.config().hash() && !allow_config_mismatch) {
    throw ConfigError("checkpoint " + path.string() + " was written for config " + stored_hash + " (" +
                      c.manifest.value("variant", "?") + ", " + c.manifest.value("task", "?") +
                      ") but the model has config " + model.config().hash() + " (" + model.name() + ", " +
                      to_string(model.config().task()) + ")");
  }

  const auto tensors = by_name(c.tensors);
  auto fetch = [&](const std::string& key) -> const torch::Tensor& {
    auto it = tensors.find(key);
    if (it == tensors.end()) throw DataError("checkpoint " + path.string() + " lacks tensor " + key);
    return it->second;
  };
  for (auto& p : model.named_parameters()) copy_into(p.value(), fetch("model/" + p.key()), p.key());
  for (auto& b : model.named_buffers()) copy_into(b.value(), fetch("model/" + b.key()), b.key());

  if (optimizer) {
    const auto& steps = c.manifest.at("adam_steps");
    auto& states = optimizer->state();
    states.clear();
    for (const auto& p : model.named_parameters()) {
      if (!steps.contains(p.key())) continue;
      auto s = std::make_unique<torch::optim::AdamParamState>();
      s->step(steps.at(p.key()).get<int64_t>());
      s->exp_avg(fetch("adam/" + p.key() + "/exp_avg").to(p.value().dtype()).clone());
      s->exp_avg_sq(fetch("adam/" + p.key() + "/exp_avg_sq").to(p.value().dtype()).clone());
      if (auto it = tensors.find("adam/" + p.key() + "/max_exp_avg_sq"); it != tensors.end()) {
        s->max_exp_avg_sq(it->second.to(p.value().dtype()).clone());
      }
      states[p.value().unsafeGetTensorImpl()] = std::move(s);
    }
  }
  return info;
}

void load_transformer_weights(DTrAttUnetImpl& model, const std::filesystem::path& path) {
  if (!model.transformer) throw ConfigError("model has no transformer path to initialize");
  const auto c = read_container(path);
  const auto tensors = by_name(c.tensors);
  const std::string prefix = "model/transformer.";
  std::size_t copied = 0;
  for (auto& p : model.transformer->named_parameters()) {
    auto it = tensors.find(prefix + p.key());
    if (it == tensors.end()) throw DataError(path.string() + " lacks transformer tensor " + p.key());
    copy_into(p.value(), it->second, p.key());
    ++copied;
  }
  if (copied == 0) throw DataError(path.string() + " holds no transformer tensors");
}

}  // namespace dtrattunet
