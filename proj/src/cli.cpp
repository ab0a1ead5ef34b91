#include "dtrattunet/cli.hpp"

#include <yaml-cpp/yaml.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "dtrattunet/checkpoint.hpp"
#include "dtrattunet/errors.hpp"
#include "dtrattunet/image_io.hpp"
#include "dtrattunet/metrics.hpp"

namespace dtrattunet {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

struct RawEntry {
  std::string key;
  YAML::Node value;
  bool from_file = false;
};

void flatten(const YAML::Node& node, const std::string& prefix, std::vector<RawEntry>& out) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      flatten(kv.second, prefix.empty() ? key : prefix + "." + key, out);
    }
    return;
  }
  out.push_back({prefix, node, true});
}

std::string type_name(const json& like) {
  if (like.is_boolean()) return "a boolean";
  if (like.is_number_unsigned()) return "a non-negative integer";
  if (like.is_number_integer()) return "an integer";
  if (like.is_number_float()) return "a number";
  if (like.is_string()) return "a string";
  if (like.is_array()) return "a list of " + type_name(like.empty() ? json(int64_t{0}) : like.front()).substr(2) + "s";
  return "a value";
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string::npos) return {};
  return s.substr(first, s.find_last_not_of(" \t") - first + 1);
}

std::optional<json> convert_scalar(const YAML::Node& node, const json& like) {
  try {
    if (like.is_string()) return node.IsNull() ? std::string() : node.as<std::string>();
    if (!node.IsScalar()) return std::nullopt;
    if (like.is_boolean()) return node.as<bool>();
    if (like.is_number_unsigned()) {
      if (trim(node.Scalar()).starts_with("-")) return std::nullopt;
      return node.as<uint64_t>();
    }
    if (like.is_number_integer()) return node.as<int64_t>();
    if (like.is_number_float()) return node.as<double>();
  } catch (const YAML::Exception&) {
  }
  return std::nullopt;
}

std::optional<json> convert(const YAML::Node& node, const json& like) {
  if (!like.is_array()) return convert_scalar(node, like);
  const json element = like.empty() ? json(int64_t{0}) : like.front();
  std::vector<YAML::Node> items;
  if (node.IsSequence()) {
    for (const auto& item : node) items.push_back(item);
  } else if (node.IsScalar()) {
    // "0,1,2" is accepted as shorthand for [0, 1, 2]
    std::stringstream ss(node.Scalar());
    std::string piece;
    while (std::getline(ss, piece, ',')) {
      if (!trim(piece).empty()) items.push_back(YAML::Load(trim(piece)));
    }
  } else if (!node.IsNull()) {
    return std::nullopt;
  }
  json out = json::array();
  for (const auto& item : items) {
    auto v = convert_scalar(item, element);
    if (!v) return std::nullopt;
    out.push_back(*v);
  }
  return out;
}

std::string yaml_text(const YAML::Node& node) {
  YAML::Emitter e;
  e << YAML::Flow << node;
  return e.c_str();
}

json unprefix(const json& values, const std::string& prefix) {
  json out = json::object();
  for (const auto& [k, v] : values.items()) {
    if (k.starts_with(prefix)) out[k.substr(prefix.size())] = v;
  }
  return out;
}

template <typename Fn>
auto for_key(const std::string& key, Fn&& fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

std::string stem_of(const fs::path& p) {
  auto name = p.filename().string();
  for (const std::string suffix : {".nii.gz", ".nii", ".png"}) {
    if (name.size() > suffix.size() && name.ends_with(suffix)) return name.substr(0, name.size() - suffix.size());
  }
  return p.stem().string();
}

bool is_image_file(const fs::path& p) {
  const auto name = p.filename().string();
  return name.ends_with(".png") || name.ends_with(".nii") || name.ends_with(".nii.gz");
}

std::vector<ConfigEntry> parse_sets(const std::vector<std::string>& sets) {
  std::vector<ConfigEntry> entries;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    entries.push_back({trim(s.substr(0, eq)), s.substr(eq + 1)});
  }
  return entries;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void print_table(const AggregateReport& report, std::ostream& out) {
  out << "task " << to_string(report.task) << ", " << report.runs << " run(s), mean ± std (%)\n";
  char line[160];
  std::snprintf(line, sizeof(line), "%-14s %8s %18s %18s %18s\n", "class", "images", "F1", "Dice", "IoU");
  out << line;
  for (const auto& c : report.classes) {
    auto cell = [](const std::vector<double>& v) {
      const auto s = summarize(v);
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", s.mean, s.std);
      return std::string(buf);
    };
    std::snprintf(line, sizeof(line), "%-14s %8zu %18s %18s %18s\n", c.name.c_str(), c.n_images, cell(c.f1).c_str(),
                  cell(c.dice).c_str(), cell(c.iou).c_str());
    out << line;
  }
}

fs::path output_root(const std::string& flag, const fs::path& fallback, RunConfig* config = nullptr) {
  fs::path chosen = fallback;
  std::string source = "default";
  if (!flag.empty()) {
    chosen = flag;
    source = "--output";
  } else if (const char* env = std::getenv(kOutputRootEnv); env && *env) {
    chosen = env;
    source = kOutputRootEnv;
  }
  if (config && source != "default") {
    config->output_dir = chosen.string();
    config->resolved["output.dir"] = config->output_dir;
    config->overrides["output.dir"] = config->output_dir;
  }
  return chosen;
}

std::vector<PreparedSample> prepare_all(const std::vector<SliceSample>& slices, const PreprocessOptions& options) {
  std::vector<PreparedSample> out;
  out.reserve(slices.size());
  for (const auto& s : slices) out.push_back(preprocess(s, options));
  return out;
}

std::vector<SliceSample> load_root(const std::string& root, const DatasetLayout& layout) {
  if (root.empty()) throw DataError("no dataset root given (set data.root or pass --data)");
  if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root);
  auto slices = load_dataset(root, layout);
  if (slices.empty()) throw DataError("no images found under " + (fs::path(root) / layout.images_dir).string());
  return slices;
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  CLI::Option* seed_option = nullptr;
  std::string output;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "YAML run configuration");
  cmd->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  c.seed_option = cmd->add_option("--seed", c.seed, "seed for every random stream");
  cmd->add_option("--output", c.output, "output directory (default: $" + std::string(kOutputRootEnv) + " or config)");
}

RunConfig resolve_common(const Common& c, std::vector<ConfigEntry> extra = {}) {
  auto entries = parse_sets(c.sets);
  entries.insert(entries.end(), extra.begin(), extra.end());
  std::optional<fs::path> file;
  if (!c.config.empty()) file = c.config;
  return resolve_run_config(file, entries);
}

struct InferenceModel {
  DTrAttUnet model{nullptr};
  LoadedCheckpoint info;
  torch::ScalarType dtype = torch::kFloat32;
};

InferenceModel load_for_inference(const std::string& checkpoint, std::optional<Task> task, std::ostream& out) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::is_regular_file(checkpoint)) throw DataError("checkpoint not found: " + checkpoint);
  InferenceModel m;
  m.info = read_checkpoint_info(checkpoint);
  out << "config_hash: " << m.info.manifest.value("config_hash", std::string("?")) << '\n';
  auto config = m.info.model_config;
  config.pretrained_transformer.clear();
  if (task && *task != config.task()) config.num_infection_classes = *task == Task::Binary ? 1 : 3;
  m.model = build_variant(config);
  // Refuses a task that differs from the checkpoint's through the config hash.
  load_checkpoint(checkpoint, *m.model);
  m.model->eval();
  m.dtype = m.model->parameters().front().scalar_type();
  return m;
}

torch::Tensor resize_labels(const torch::Tensor& labels, int64_t h, int64_t w) {
  if (labels.size(0) == h && labels.size(1) == w) return labels;
  return F::interpolate(labels.to(torch::kFloat32).unsqueeze(0).unsqueeze(0),
                        F::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(torch::kNearest))
      .squeeze(0)
      .squeeze(0)
      .round()
      .to(torch::kInt64);
}

struct NamedSlice {
  std::string name;
  torch::Tensor image;
};

std::vector<NamedSlice> read_inputs(const fs::path& path) {
  std::vector<NamedSlice> out;
  const auto stem = stem_of(path);
  if (path.filename().string().ends_with(".png")) {
    out.push_back({stem, read_png(path)});
    return out;
  }
  const auto volume = read_nifti(path);
  for (int64_t z = 0; z < volume.size(0); ++z) {
    char suffix[32];
    std::snprintf(suffix, sizeof(suffix), "_%04lld", static_cast<long long>(z));
    out.push_back({stem + suffix, volume[z].clone()});
  }
  return out;
}

std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs, std::ostream& err, std::size_t& missing) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in)) {
        if (e.is_regular_file() && is_image_file(e.path())) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::is_regular_file(in)) {
      files.emplace_back(in);
    } else {
      err << "warning: skipping " << in << ": no such file\n";
      ++missing;
    }
  }
  return files;
}

int cmd_train(const Common& common, const std::vector<uint64_t>& seeds, const std::string& variant, bool dry_run,
              std::ostream& out, std::ostream& err) {
  std::vector<ConfigEntry> extra;
  if (!variant.empty()) extra.push_back({"variant", variant});
  std::vector<uint64_t> run_seeds = seeds;
  if (run_seeds.empty() && common.seed_option->count() > 0) run_seeds = {common.seed};
  if (!run_seeds.empty()) {
    std::string list = "[";
    for (std::size_t i = 0; i < run_seeds.size(); ++i) list += (i ? "," : "") + std::to_string(run_seeds[i]);
    extra.push_back({"train.seeds", list + "]"});
    extra.push_back({"train.runs", std::to_string(run_seeds.size())});
  }
  auto config = resolve_common(common, extra);
  const fs::path out_dir = output_root(common.output, config.output_dir, &config);
  out << "config_hash: " << config.model.hash() << '\n';
  out << "variant: " << variant_name(config.model) << " (" << to_string(config.model.task()) << ")\n";

  if (dry_run) {
    auto model_config = config.model;
    model_config.pretrained_transformer.clear();
    auto model = build_variant(model_config);
    out << manifest_text(*model);
    return 0;
  }

  set_deterministic(config.deterministic);
  const auto slices = load_root(config.data_root, config.layout);
  const auto prepared = prepare_all(slices, config.preprocess);
  std::vector<PreparedSample> pool, test;
  if (!config.test_root.empty()) {
    pool = prepared;
    test = prepare_all(load_root(config.test_root, config.layout), config.preprocess);
  } else {
    SplitIndices idx;
    if (config.split_mode == SplitMode::Subset) {
      idx = split_by_subset(slices);
    } else {
      auto spec = config.split;
      spec.granularity = config.split_mode == SplitMode::Scan ? SplitGranularity::Scan : SplitGranularity::Slice;
      idx = split(std::span<const SliceSample>(slices), spec);
    }
    pool = select(prepared, idx.train);
    test = select(prepared, idx.test);
  }
  out << "data: " << pool.size() << " training pool, " << test.size() << " test slices\n";

  fs::create_directories(out_dir);
  json manifest = {{"command", "train"},
                   {"config_hash", config.model.hash()},
                   {"variant", variant_name(config.model)},
                   {"task", to_string(config.model.task())},
                   {"config_file", common.config},
                   {"file", config.file},
                   {"overrides", config.overrides},
                   {"resolved", config.resolved},
                   {"n_train_pool", pool.size()},
                   {"n_test", test.size()},
                   {"status", "running"}};
  write_json(out_dir / "run_manifest.json", manifest);

  const auto result = run_protocol(config.model, config.train, pool, test, out_dir,
                                   [&](uint64_t seed, const EpochLog& log) {
                                     char line[200];
                                     std::snprintf(line, sizeof(line),
                                                   "seed %llu epoch %lld lr %.3g loss %.5f val_f1 %.2f (%.1fs)\n",
                                                   static_cast<unsigned long long>(seed),
                                                   static_cast<long long>(log.epoch), log.lr, log.train_loss,
                                                   log.val_f1, log.seconds);
                                     out << line << std::flush;
                                   });
  json runs = json::array();
  for (const auto& r : result.runs) {
    runs.push_back({{"seed", r.seed},
                    {"dir", (out_dir / ("run_" + std::to_string(r.seed))).string()},
                    {"epochs", r.training.state.epoch},
                    {"steps", r.training.state.global_step},
                    {"best_val_f1", r.training.state.best_val_f1}});
  }
  manifest["runs"] = runs;
  manifest["status"] = "complete";
  write_json(out_dir / "run_manifest.json", manifest);
  write_text(out_dir / "report.csv", report_csv(result.aggregate));
  auto report = report_json(result.aggregate);
  report["config_hash"] = config.model.hash();
  write_json(out_dir / "report.json", report);
  print_table(result.aggregate, out);
  (void)err;
  return 0;
}

int cmd_evaluate(const Common& common, const std::string& checkpoint, const std::string& data,
                 const std::string& task_name, bool per_image, std::ostream& out) {
  std::optional<Task> task;
  if (!task_name.empty()) task = for_key("--task", [&] { return task_from_string(task_name); });
  auto config = resolve_common(common);
  set_deterministic(true);
  if (common.seed_option->count() > 0) torch::manual_seed(common.seed);
  auto m = load_for_inference(checkpoint, task, out);
  const auto& mc = m.model->config();
  auto layout = config.layout;
  layout.task = mc.task();
  auto options = config.preprocess;
  options.image_size = mc.image_size;
  options.input_channels = mc.input_channels;
  const auto slices = load_root(data.empty() ? config.data_root : data, layout);
  const auto prepared = prepare_all(slices, options);
  const auto report = evaluate(*m.model, prepared, mc.task());

  const fs::path out_dir = output_root(common.output, fs::path(checkpoint).parent_path() / "evaluation");
  fs::create_directories(out_dir);
  const std::vector<MetricsReport> one{report};
  const auto agg = aggregate(one);
  auto j = report_json(report, per_image);
  j["config_hash"] = mc.hash();
  j["checkpoint"] = checkpoint;
  write_json(out_dir / "report.json", j);
  write_text(out_dir / "report.csv", report_csv(agg));
  if (per_image) write_text(out_dir / "per_image.csv", per_image_csv(report));
  write_json(out_dir / "run_manifest.json", {{"command", "evaluate"},
                                             {"config_hash", mc.hash()},
                                             {"checkpoint", checkpoint},
                                             {"dataset", data.empty() ? config.data_root : data},
                                             {"task", to_string(mc.task())},
                                             {"n_images", report.n_images()},
                                             {"per_image", per_image},
                                             {"overrides", config.overrides},
                                             {"file", config.file}});
  print_table(agg, out);
  if (report.lung) {
    out << "lung F1 " << report.lung->f1 << " Dice " << report.lung->dice << " IoU " << report.lung->iou << '\n';
  }
  return 0;
}

int cmd_infer(bool overlay_mode, const Common& common, const std::string& checkpoint,
              const std::vector<std::string>& inputs, bool lung, std::ostream& out, std::ostream& err) {
  auto config = resolve_common(common);
  set_deterministic(true);
  if (common.seed_option->count() > 0) torch::manual_seed(common.seed);
  auto m = load_for_inference(checkpoint, std::nullopt, out);
  const auto& mc = m.model->config();
  if (lung && !mc.use_dual_decoder) err << "warning: " << variant_name(mc) << " has no lung decoder; --lung ignored\n";
  auto options = config.preprocess;
  options.image_size = mc.image_size;
  options.input_channels = mc.input_channels;

  const fs::path out_dir =
      output_root(common.output, fs::path(checkpoint).parent_path() / (overlay_mode ? "overlays" : "predictions"));
  std::size_t failed = 0, written = 0;
  const auto files = expand_inputs(inputs, err, failed);
  if (files.empty() && failed == 0) throw DataError("no input images given");
  torch::NoGradGuard no_grad;
  for (const auto& file : files) {
    std::vector<NamedSlice> slices;
    try {
      slices = read_inputs(file);
    } catch (const std::exception& e) {
      err << "warning: skipping " << file.string() << ": " << e.what() << '\n';
      ++failed;
      continue;
    }
    fs::create_directories(out_dir);
    for (const auto& s : slices) {
      const auto h = s.image.size(0), w = s.image.size(1);
      const auto prepared = preprocess(SliceSample{s.image, std::nullopt, std::nullopt, s.name, s.name, ""}, options);
      const auto output = m.model->forward(prepared.input.unsqueeze(0).to(m.dtype));
      const auto labels = resize_labels(discretize(output.infection_logits, mc.task())[0], h, w);
      torch::Tensor lung_labels;
      if (lung && output.lung_logits.defined()) {
        lung_labels = resize_labels(discretize(output.lung_logits, Task::Binary)[0], h, w);
      }
      if (overlay_mode) {
        const auto lo = s.image.min(), hi = s.image.max();
        const auto range = (hi - lo).item<double>();
        const auto unit = range > 0 ? (s.image - lo) / range : torch::zeros_like(s.image);
        write_png_rgb(out_dir / (s.name + ".png"), overlay(unit, labels, lung_labels));
      } else {
        write_png_gray(out_dir / (s.name + ".png"), labels);
        if (lung_labels.defined()) write_png_gray(out_dir / (s.name + "_lung.png"), lung_labels);
      }
      ++written;
    }
  }
  out << "wrote " << written << (overlay_mode ? " overlays" : " masks") << " to " << out_dir.string();
  if (failed) out << " (" << failed << " input(s) skipped)";
  out << '\n';
  if (written == 0) {
    err << "error: no input could be processed\n";
    return 2;
  }
  return 0;
}

int cmd_summarize(const std::vector<std::string>& dirs, const std::string& output_flag, std::ostream& out,
                  std::ostream& err) {
  std::vector<fs::path> runs;
  for (const auto& d : dirs) {
    if (fs::is_regular_file(fs::path(d) / "test_report.json")) {
      runs.emplace_back(d);
      continue;
    }
    if (!fs::is_directory(d)) throw DataError("run directory not found: " + d);
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(d)) {
      if (e.is_directory() && fs::is_regular_file(e.path() / "test_report.json")) found.push_back(e.path());
    }
    std::sort(found.begin(), found.end());
    if (found.empty()) throw DataError("no run directories with test_report.json under " + d);
    runs.insert(runs.end(), found.begin(), found.end());
  }
  if (runs.empty()) throw DataError("summarize needs at least one run directory");

  AggregateReport agg;
  std::set<std::string> hashes;
  for (const auto& run : runs) {
    json j;
    try {
      j = json::parse(std::ifstream(run / "test_report.json"));
    } catch (const json::exception& e) {
      throw DataError("cannot parse " + (run / "test_report.json").string() + ": " + e.what());
    }
    const auto task = task_from_string(j.at("task").get<std::string>());
    if (agg.runs == 0) {
      agg.task = task;
      for (const auto& c : j.at("classes")) {
        agg.classes.push_back({c.at("class").get<std::string>(), j.at("n_images").get<std::size_t>(), {}, {}, {}});
      }
    } else if (task != agg.task || j.at("classes").size() != agg.classes.size()) {
      throw DataError("run " + run.string() + " disagrees with the others on task or classes");
    }
    for (std::size_t i = 0; i < agg.classes.size(); ++i) {
      const auto& c = j.at("classes")[i];
      agg.classes[i].f1.push_back(c.at("f1").get<double>());
      agg.classes[i].dice.push_back(c.at("dice").get<double>());
      agg.classes[i].iou.push_back(c.at("iou").get<double>());
    }
    ++agg.runs;
    for (const char* name : {"best.ckpt", "last.ckpt"}) {
      if (fs::is_regular_file(run / name)) {
        hashes.insert(read_checkpoint_info(run / name).manifest.value("config_hash", std::string("?")));
        break;
      }
    }
  }
  if (hashes.empty()) out << "config_hash: unknown (no checkpoints found)\n";
  for (const auto& h : hashes) out << "config_hash: " << h << '\n';
  if (hashes.size() > 1) err << "warning: runs come from " << hashes.size() << " different configurations\n";

  const fs::path fallback = dirs.size() == 1 && !fs::is_regular_file(fs::path(dirs[0]) / "test_report.json")
                                ? fs::path(dirs[0])
                                : runs.front().parent_path();
  const fs::path out_dir = output_root(output_flag, fallback);
  fs::create_directories(out_dir);
  write_text(out_dir / "report.csv", report_csv(agg));
  auto j = report_json(agg);
  j["config_hashes"] = std::vector<std::string>(hashes.begin(), hashes.end());
  write_json(out_dir / "report.json", j);
  print_table(agg, out);
  return 0;
}

}  // namespace

json config_defaults(const std::string& preset) {
  ModelConfig model;
  if (preset == "desk") {
    model = ModelConfig::desk();
  } else if (preset != "standard") {
    throw ConfigError("key 'preset': unknown preset '" + preset + "' (expected standard or desk)");
  }
  const TrainConfig train;
  const DatasetLayout layout;
  const PreprocessOptions pre;
  const SplitSpec split;
  json d = json::object();
  d["preset"] = preset;
  d["task"] = to_string(model.task());
  d["variant"] = "";
  const json model_json = model.to_json();
  const json train_json = train.to_json();
  for (const auto& [k, v] : model_json.items()) {
    if (k != "num_infection_classes") d["model." + k] = v;
  }
  for (const auto& [k, v] : train_json.items()) {
    if (k != "task") d["train." + k] = v;
  }
  d["data.root"] = "";
  d["data.test_root"] = "";
  d["data.images_dir"] = layout.images_dir;
  d["data.infection_dir"] = layout.infection_dir;
  d["data.lung_dir"] = layout.lung_dir;
  d["data.manifest_file"] = layout.manifest_file;
  d["data.binarize_infection"] = layout.binarize_infection;
  d["data.intensity"] = "minmax";
  d["data.window_low"] = pre.window_low;
  d["data.window_high"] = pre.window_high;
  d["split.mode"] = "slice";
  d["split.train_fraction"] = split.train_fraction;
  d["split.seed"] = split.seed;
  d["output.dir"] = "runs";
  d["deterministic"] = true;
  return d;
}

RunConfig resolve_run_config(const std::optional<fs::path>& config_file, const std::vector<ConfigEntry>& overrides) {
  std::vector<RawEntry> raw;
  std::vector<std::string> problems;
  if (config_file) {
    if (!fs::is_regular_file(*config_file)) throw ConfigError("config file not found: " + config_file->string());
    YAML::Node root;
    try {
      root = YAML::LoadFile(config_file->string());
    } catch (const YAML::Exception& e) {
      throw ConfigError("cannot parse " + config_file->string() + ": " + e.what());
    }
    if (!root.IsNull() && !root.IsMap()) throw ConfigError(config_file->string() + ": expected a mapping of keys");
    if (root.IsMap()) flatten(root, "", raw);
  }
  for (const auto& o : overrides) {
    try {
      raw.push_back({o.key, YAML::Load(o.value), false});
    } catch (const YAML::Exception& e) {
      problems.push_back("key '" + o.key + "': cannot parse value '" + o.value + "'");
    }
  }

  std::string preset = "standard";
  for (const auto& r : raw) {
    if (r.key == "preset" && r.value.IsScalar()) preset = r.value.Scalar();
  }
  if (preset != "standard" && preset != "desk") {
    problems.push_back("key 'preset': unknown preset '" + preset + "' (expected standard or desk)");
    preset = "standard";
  }
  const json defaults = config_defaults(preset);

  RunConfig config;
  json values = defaults;
  config.file = json::object();
  config.overrides = json::object();
  std::set<std::string> given;
  for (const auto& r : raw) {
    if (!defaults.contains(r.key)) {
      problems.push_back("key '" + r.key + "': unknown key");
      continue;
    }
    const auto v = convert(r.value, defaults[r.key]);
    if (!v) {
      problems.push_back("key '" + r.key + "': expected " + type_name(defaults[r.key]) + ", got '" +
                         yaml_text(r.value) + "'");
      continue;
    }
    values[r.key] = *v;
    (r.from_file ? config.file : config.overrides)[r.key] = *v;
    given.insert(r.key);
  }
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  if (given.count("train.seeds") && !given.count("train.runs")) {
    values["train.runs"] = values["train.seeds"].size();
  }

  const auto task = for_key("task", [&] { return task_from_string(values["task"].get<std::string>()); });
  auto model_json = unprefix(values, "model.");
  model_json["num_infection_classes"] = task == Task::Binary ? 1 : 3;
  config.model = ModelConfig::from_json(model_json);
  if (const auto variant = values["variant"].get<std::string>(); !variant.empty()) {
    config.model = for_key("variant", [&] { return with_variant(config.model, variant); });
  }
  auto train_json = unprefix(values, "train.");
  train_json["task"] = to_string(task);
  config.train = TrainConfig::from_json(train_json);
  config.model.validate();
  config.train.validate();

  config.data_root = values["data.root"].get<std::string>();
  config.test_root = values["data.test_root"].get<std::string>();
  config.layout.images_dir = values["data.images_dir"].get<std::string>();
  config.layout.infection_dir = values["data.infection_dir"].get<std::string>();
  config.layout.lung_dir = values["data.lung_dir"].get<std::string>();
  config.layout.manifest_file = values["data.manifest_file"].get<std::string>();
  config.layout.binarize_infection = values["data.binarize_infection"].get<bool>();
  config.layout.task = task;

  const auto intensity = values["data.intensity"].get<std::string>();
  if (intensity == "minmax") {
    config.preprocess.intensity = IntensityMode::MinMax;
  } else if (intensity == "hu_window") {
    config.preprocess.intensity = IntensityMode::HuWindow;
  } else {
    throw ConfigError("key 'data.intensity': expected minmax or hu_window, got '" + intensity + "'");
  }
  config.preprocess.window_low = values["data.window_low"].get<double>();
  config.preprocess.window_high = values["data.window_high"].get<double>();
  if (!(config.preprocess.window_high > config.preprocess.window_low)) {
    throw ConfigError("key 'data.window_high': must exceed data.window_low");
  }
  config.preprocess.image_size = config.model.image_size;
  config.preprocess.input_channels = config.model.input_channels;

  static const std::map<std::string, SplitMode> modes{
      {"slice", SplitMode::Slice}, {"scan", SplitMode::Scan}, {"subset", SplitMode::Subset}};
  const auto mode = values["split.mode"].get<std::string>();
  if (!modes.count(mode)) throw ConfigError("key 'split.mode': expected slice, scan or subset, got '" + mode + "'");
  config.split_mode = modes.at(mode);
  config.split.train_fraction = values["split.train_fraction"].get<double>();
  if (!(config.split.train_fraction > 0.0 && config.split.train_fraction < 1.0)) {
    throw ConfigError("key 'split.train_fraction': must lie in (0, 1)");
  }
  config.split.seed = values["split.seed"].get<uint64_t>();
  config.output_dir = values["output.dir"].get<std::string>();
  config.deterministic = values["deterministic"].get<bool>();

  // Reflect a variant override in the flag keys so the record is self-consistent.
  values["variant"] = variant_name(config.model);
  values["model.use_attention_gates"] = config.model.use_attention_gates;
  values["model.use_dual_decoder"] = config.model.use_dual_decoder;
  values["model.use_transformer_encoder"] = config.model.use_transformer_encoder;
  config.resolved = values;
  return config;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"D-TrAttUnet: hybrid Transformer-CNN segmentation with dual attention-gated decoders"};
  app.require_subcommand(1);

  Common train_c, eval_c, predict_c, overlay_c;
  std::vector<uint64_t> seeds;
  std::string variant;
  bool dry_run = false;
  auto* train = app.add_subcommand("train", "train one model per seed and report mean ± std");
  add_common(train, train_c);
  train->add_option("--seeds", seeds, "comma-separated seeds, one run each")->delimiter(',');
  train->add_option("--variant", variant, "ablation variant (unet, attunet, d-trunet, d-attunet, trattunet, d-trattunet)");
  train->add_flag("--dry-run", dry_run, "validate the config and print the layer manifest only");

  std::string eval_ckpt, eval_data, eval_task;
  bool per_image = false;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset");
  add_common(evaluate_cmd, eval_c);
  evaluate_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  evaluate_cmd->add_option("--data", eval_data, "dataset root (default: data.root)");
  evaluate_cmd->add_option("--task", eval_task, "binary or multiclass; must match the checkpoint");
  evaluate_cmd->add_flag("--per-image", per_image, "also write per-image Dice");

  std::string predict_ckpt, overlay_ckpt;
  std::vector<std::string> predict_inputs, overlay_inputs;
  bool predict_lung = false, overlay_lung = false;
  auto* predict = app.add_subcommand("predict", "write label-map PNGs for input slices");
  add_common(predict, predict_c);
  predict->add_option("--checkpoint", predict_ckpt, "checkpoint file")->required();
  predict->add_flag("--lung", predict_lung, "also write lung masks");
  predict->add_option("inputs", predict_inputs, "PNG / NIfTI files or directories")->required();

  auto* overlay_cmd = app.add_subcommand("overlay", "write colour overlays (label 1 green, label 2 red)");
  add_common(overlay_cmd, overlay_c);
  overlay_cmd->add_option("--checkpoint", overlay_ckpt, "checkpoint file")->required();
  overlay_cmd->add_flag("--lung", overlay_lung, "trace the predicted lung boundary");
  overlay_cmd->add_option("inputs", overlay_inputs, "PNG / NIfTI files or directories")->required();

  std::vector<std::string> summary_dirs;
  std::string summary_output;
  uint64_t summary_seed = 0;
  auto* summarize_cmd = app.add_subcommand("summarize", "aggregate finished runs into a report");
  summarize_cmd->add_option("runs", summary_dirs, "run directories or their parent")->required();
  summarize_cmd->add_option("--output", summary_output, "output directory");
  summarize_cmd->add_option("--seed", summary_seed, "accepted for uniformity; summarize is not random");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(train_c, seeds, variant, dry_run, out, err);
    if (*evaluate_cmd) return cmd_evaluate(eval_c, eval_ckpt, eval_data, eval_task, per_image, out);
    if (*predict) return cmd_infer(false, predict_c, predict_ckpt, predict_inputs, predict_lung, out, err);
    if (*overlay_cmd) return cmd_infer(true, overlay_c, overlay_ckpt, overlay_inputs, overlay_lung, out, err);
    if (*summarize_cmd) return cmd_summarize(summary_dirs, summary_output, out, err);
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const YAML::Exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dtrattunet
