#include "dtrattunet/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dtrattunet/checkpoint.hpp"
#include "dtrattunet/errors.hpp"

namespace dtrattunet {

namespace F = torch::nn::functional;

namespace {

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double number_from(const nlohmann::json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

std::string fingerprint(const torch::Tensor& t) {
  auto c = t.detach().cpu().contiguous();
  const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
  const auto n = static_cast<std::size_t>(c.numel() * c.element_size());
  uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void require_target(const torch::Tensor& logits, const torch::Tensor& target, const char* what) {
  if (!target.defined()) throw ValidationError(std::string(what) + ": missing target");
  if (logits.dim() != 4 || target.dim() != 3 || logits.size(0) != target.size(0) || logits.size(2) != target.size(1) ||
      logits.size(3) != target.size(2)) {
    throw ValidationError(std::string(what) + ": logits " + c10::str(logits.sizes()) + " do not match target " +
                          c10::str(target.sizes()));
  }
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (epochs <= 0) fail("epochs must be positive");
  if (!(base_lr > 0.0)) fail("base_lr must be positive");
  if (!(decay_factor > 0.0)) fail("decay_factor must be positive");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] <= 0 || decay_epochs[i] >= epochs) fail("decay epochs must lie in (0, epochs)");
    if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1]) fail("decay epochs must be strictly increasing");
  }
  if (batch_size <= 0) fail("batch_size must be positive");
  if (infection_weight < 0.0 || lung_weight < 0.0 || std::abs(infection_weight + lung_weight - 1.0) > 1e-12) {
    fail("loss weights must be nonnegative and sum to 1");
  }
  if (runs <= 0) fail("runs must be positive");
  if (static_cast<int64_t>(seeds.size()) != runs) fail("seeds must list exactly `runs` seeds");
  if (validation_fraction < 0.0 || validation_fraction >= 1.0) fail("validation_fraction must lie in [0, 1)");
  for (double p : {augmentation.rotate_probability, augmentation.hflip_probability, augmentation.vflip_probability}) {
    if (p < 0.0 || p > 1.0) fail("augmentation probabilities must lie in [0, 1]");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"base_lr", base_lr},
          {"decay_epochs", decay_epochs},
          {"decay_factor", decay_factor},
          {"batch_size", batch_size},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"weight_decay", weight_decay},
          {"infection_weight", infection_weight},
          {"lung_weight", lung_weight},
          {"task", to_string(task)},
          {"runs", runs},
          {"seeds", seeds},
          {"validation_fraction", validation_fraction},
          {"augment", augment},
          {"rotate_probability", augmentation.rotate_probability},
          {"max_rotation_degrees", augmentation.max_rotation_degrees},
          {"hflip_probability", augmentation.hflip_probability},
          {"vflip_probability", augmentation.vflip_probability},
          {"max_steps", max_steps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int64_t>();
  c.base_lr = j.at("base_lr").get<double>();
  c.decay_epochs = j.at("decay_epochs").get<std::vector<int64_t>>();
  c.decay_factor = j.at("decay_factor").get<double>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.infection_weight = j.at("infection_weight").get<double>();
  c.lung_weight = j.at("lung_weight").get<double>();
  c.task = task_from_string(j.at("task").get<std::string>());
  c.runs = j.at("runs").get<int64_t>();
  c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  c.validation_fraction = j.at("validation_fraction").get<double>();
  c.augment = j.at("augment").get<bool>();
  c.augmentation.rotate_probability = j.at("rotate_probability").get<double>();
  c.augmentation.max_rotation_degrees = j.at("max_rotation_degrees").get<double>();
  c.augmentation.hflip_probability = j.at("hflip_probability").get<double>();
  c.augmentation.vflip_probability = j.at("vflip_probability").get<double>();
  c.max_steps = j.at("max_steps").get<int64_t>();
  return c;
}

torch::Tensor infection_loss(const torch::Tensor& logits, const torch::Tensor& target, Task task) {
  require_target(logits, target, "infection loss");
  if (task == Task::Binary) {
    if (logits.size(1) != 1) throw ValidationError("infection loss: binary task expects 1-channel logits");
    return F::binary_cross_entropy_with_logits(logits.squeeze(1), target.to(logits.scalar_type()));
  }
  if (logits.size(1) != 3) throw ValidationError("infection loss: multiclass task expects 3-channel logits");
  return F::cross_entropy(logits, target.to(torch::kInt64));
}

torch::Tensor lung_loss(const torch::Tensor& logits, const torch::Tensor& target) {
  require_target(logits, target, "lung loss");
  if (logits.size(1) != 1) throw ValidationError("lung loss: expects 1-channel logits");
  return F::binary_cross_entropy_with_logits(logits.squeeze(1), target.to(logits.scalar_type()));
}

LossTerms joint_loss(const torch::Tensor& infection_logits, const torch::Tensor& lung_logits,
                     const torch::Tensor& infection_target, const torch::Tensor& lung_target,
                     const TrainConfig& config) {
  LossTerms terms;
  terms.infection = infection_loss(infection_logits, infection_target, config.task);
  if (!lung_logits.defined()) {
    terms.total = terms.infection;
    return terms;
  }
  terms.lung = lung_loss(lung_logits, lung_target);
  terms.total = config.infection_weight * terms.infection + config.lung_weight * terms.lung;
  return terms;
}

void set_deterministic(bool on) {
  at::globalContext().setDeterministicAlgorithms(on, false);
  if (on) torch::set_num_threads(1);
}

double lr_at(int64_t epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch >= config.epochs) {
    throw ValidationError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) +
                          ")");
  }
  int decays = 0;
  for (auto d : config.decay_epochs) {
    if (epoch >= d) ++decays;
  }
  // Divide by an integral inverse factor when there is one so that 0.1 decays
  // to the doubles nearest 0.01 and 0.001 rather than accumulating products.
  const double inverse = 1.0 / config.decay_factor;
  if (std::abs(inverse - std::round(inverse)) < 1e-9) {
    return config.base_lr / std::pow(std::round(inverse), decays);
  }
  return config.base_lr * std::pow(config.decay_factor, decays);
}

nlohmann::json TrainState::to_json() const {
  nlohmann::json cps = nlohmann::json::array();
  for (const auto& c : checkpoints) {
    cps.push_back({{"path", c.path}, {"kind", c.kind}, {"epoch", c.epoch}, {"val_f1", number_or_null(c.val_f1)}});
  }
  return {{"epoch", epoch},
          {"global_step", global_step},
          {"best_val_f1", best_val_f1},
          {"seed", seed},
          {"checkpoints", cps}};
}

TrainState TrainState::from_json(const nlohmann::json& j) {
  TrainState s;
  s.epoch = j.at("epoch").get<int64_t>();
  s.global_step = j.at("global_step").get<int64_t>();
  s.best_val_f1 = j.at("best_val_f1").get<double>();
  s.seed = j.at("seed").get<uint64_t>();
  for (const auto& c : j.at("checkpoints")) {
    s.checkpoints.push_back({c.at("path").get<std::string>(), c.at("kind").get<std::string>(),
                             c.at("epoch").get<int64_t>(), number_from(c.at("val_f1"))});
  }
  return s;
}

nlohmann::json EpochLog::to_json() const {
  return {{"epoch", epoch},
          {"lr", lr},
          {"train_loss", number_or_null(train_loss)},
          {"val_f1", number_or_null(val_f1)},
          {"val_dice", number_or_null(val_dice)},
          {"val_iou", number_or_null(val_iou)},
          {"seconds", seconds}};
}

TrainingDiverged::TrainingDiverged(int64_t step_, double lr_, std::string inputs_hash_)
    : std::runtime_error("non-finite loss at step " + std::to_string(step_) + " (lr " + std::to_string(lr_) +
                         ", inputs " + inputs_hash_ + ")"),
      step(step_),
      lr(lr_),
      inputs_hash(std::move(inputs_hash_)) {}

// ---------------------------------------------------------------------------

Trainer::Trainer(DTrAttUnet model, TrainConfig config, uint64_t seed)
    : model_(std::move(model)), config_(std::move(config)) {
  config_.validate();
  if (model_->config().task() != config_.task) {
    throw ConfigError("train config task " + to_string(config_.task) + " does not match the model's " +
                      to_string(model_->config().task()) + " head");
  }
  state_.seed = seed;
  dtype_ = model_->parameters().front().scalar_type();
  optimizer_ = std::make_unique<torch::optim::Adam>(
      model_->parameters(), torch::optim::AdamOptions(config_.base_lr)
                                .betas({config_.adam_beta1, config_.adam_beta2})
                                .eps(config_.adam_eps)
                                .weight_decay(config_.weight_decay));
}

void Trainer::set_lr(double lr) {
  for (auto& group : optimizer_->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

torch::Tensor Trainer::compute_loss(const Batch& batch) {
  if (model_->config().use_dual_decoder && !batch.lung.defined()) {
    throw ValidationError("dual-decoder training needs a lung mask for every sample");
  }
  model_->train();
  const auto out = model_->forward(batch.input.to(dtype_));
  return joint_loss(out.infection_logits, out.lung_logits, batch.infection, batch.lung, config_).total;
}

double Trainer::step(const Batch& batch, double lr) {
  set_lr(lr);
  optimizer_->zero_grad();
  auto loss = compute_loss(batch);
  const double value = loss.item<double>();
  if (!std::isfinite(value)) throw TrainingDiverged(state_.global_step, lr, fingerprint(batch.input));
  loss.backward();
  optimizer_->step();
  ++state_.global_step;
  return value;
}

double Trainer::batch_loss(const Batch& batch) {
  torch::NoGradGuard no_grad;
  // Training-mode statistics without touching the running buffers.
  std::vector<torch::Tensor> saved;
  for (const auto& b : model_->buffers()) saved.push_back(b.clone());
  const double value = compute_loss(batch).item<double>();
  auto buffers = model_->buffers();
  for (std::size_t i = 0; i < buffers.size(); ++i) buffers[i].copy_(saved[i]);
  return value;
}

void Trainer::save(const std::filesystem::path& path, const nlohmann::json& metrics) const {
  save_checkpoint(path, state_, *model_, optimizer_.get(), config_, metrics);
}

void Trainer::resume(const std::filesystem::path& path, bool allow_config_mismatch) {
  auto info = load_checkpoint(path, *model_, optimizer_.get(), allow_config_mismatch);
  state_ = info.state;
}

TrainResult Trainer::fit(const std::vector<PreparedSample>& train, const std::vector<PreparedSample>& validation,
                         const TrainOptions& options) {
  if (train.empty()) throw ValidationError("train: empty training set");
  const BatchStream stream(train, static_cast<std::size_t>(config_.batch_size), mix_seed(state_.seed, 0xba7c4u),
                           true, config_.augment ? std::optional<AugmentPolicy>(config_.augmentation) : std::nullopt);
  const bool on_disk = !options.output_dir.empty();
  if (on_disk) std::filesystem::create_directories(options.output_dir);

  TrainResult result;
  bool stop = false;
  for (int64_t epoch = state_.epoch; epoch < config_.epochs && !stop; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, config_);
    double loss_sum = 0.0;
    int64_t batches = 0;
    for (const auto& batch : stream.epoch(epoch)) {
      if (config_.max_steps >= 0 && state_.global_step >= config_.max_steps) {
        stop = true;
        break;
      }
      const double loss = step(batch, lr);
      loss_sum += loss;
      ++batches;
      result.step_losses.push_back(loss);
      if (options.on_step) options.on_step(state_.global_step, loss);
    }
    if (batches == 0) break;

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.train_loss = loss_sum / static_cast<double>(batches);
    log.val_f1 = log.val_dice = log.val_iou = std::nan("");
    if (!validation.empty()) {
      const auto report = evaluate(*model_, validation, config_.task);
      log.val_f1 = report.selection_f1();
      double dice = 0.0, iou = 0.0;
      for (const auto& c : report.classes) {
        dice += c.dice;
        iou += c.iou;
      }
      log.val_dice = dice / static_cast<double>(report.classes.size());
      log.val_iou = iou / static_cast<double>(report.classes.size());
    }
    state_.epoch = epoch + 1;
    const bool improved = std::isfinite(log.val_f1) && log.val_f1 > state_.best_val_f1;
    if (improved) state_.best_val_f1 = log.val_f1;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    if (on_disk) {
      const nlohmann::json metrics = {{"val_f1", number_or_null(log.val_f1)},
                                      {"val_dice", number_or_null(log.val_dice)},
                                      {"val_iou", number_or_null(log.val_iou)},
                                      {"train_loss", log.train_loss}};
      auto record = [&](const std::string& kind) {
        const auto path = options.output_dir / (kind + ".ckpt");
        std::erase_if(state_.checkpoints, [&](const CheckpointRecord& c) { return c.kind == kind; });
        state_.checkpoints.push_back({path.string(), kind, state_.epoch, log.val_f1});
        save(path, metrics);
      };
      if (improved) record("best");
      record("last");
      std::ofstream jsonl(options.output_dir / "log.jsonl", std::ios::app);
      jsonl << log.to_json().dump() << '\n';
    }
    if (improved) {
      best_weights_.clear();
      for (const auto& t : model_->parameters()) best_weights_.push_back(t.detach().clone());
      for (const auto& t : model_->buffers()) best_weights_.push_back(t.detach().clone());
    }
    result.epochs.push_back(log);
    if (options.on_epoch) options.on_epoch(log);
  }
  result.state = state_;
  return result;
}

bool Trainer::restore_best() {
  if (best_weights_.empty()) return false;
  torch::NoGradGuard no_grad;
  std::size_t i = 0;
  for (auto& t : model_->parameters()) t.copy_(best_weights_[i++]);
  for (auto& t : model_->buffers()) t.copy_(best_weights_[i++]);
  return true;
}

// ---------------------------------------------------------------------------

ProtocolResult run_protocol(const ModelConfig& model_config, const TrainConfig& train_config,
                            const std::vector<PreparedSample>& train_pool, const std::vector<PreparedSample>& test,
                            const std::filesystem::path& output_dir,
                            const std::function<void(uint64_t, const EpochLog&)>& on_epoch) {
  train_config.validate();
  if (train_pool.empty()) throw ValidationError("run_protocol: empty training pool");
  if (test.empty()) throw ValidationError("run_protocol: empty test set");
  ProtocolResult result;
  std::vector<MetricsReport> reports;
  for (int64_t r = 0; r < train_config.runs; ++r) {
    const uint64_t seed = train_config.seeds[static_cast<std::size_t>(r)];
    torch::manual_seed(seed);
    auto model = build_variant(model_config);

    // Seeded validation carve-out from the training pool.
    std::vector<std::size_t> order(train_pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(mix_seed(seed, 0x7a1u));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    auto n_val = static_cast<std::size_t>(
        std::floor(train_config.validation_fraction * static_cast<double>(train_pool.size()) + 1e-9));
    if (n_val >= train_pool.size()) n_val = 0;
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    const auto train_set = select(train_pool, train_idx);
    const auto val_set = select(train_pool, val_idx);

    Trainer trainer(model, train_config, seed);
    TrainOptions options;
    if (!output_dir.empty()) options.output_dir = output_dir / ("run_" + std::to_string(seed));
    if (on_epoch) options.on_epoch = [&](const EpochLog& log) { on_epoch(seed, log); };
    RunResult run;
    run.seed = seed;
    run.training = trainer.fit(train_set, val_set, options);
    trainer.restore_best();
    run.test = evaluate(*model, test, train_config.task);
    if (!options.output_dir.empty()) {
      std::ofstream(options.output_dir / "test_report.json") << report_json(run.test, true).dump(2) << '\n';
    }
    reports.push_back(run.test);
    result.runs.push_back(std::move(run));
  }
  result.aggregate = aggregate(reports);
  return result;
}

}  // namespace dtrattunet
