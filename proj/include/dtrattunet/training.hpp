#pragma once

// Optimization protocol: weighted dual-task loss, step learning-rate
// schedule, Adam epoch loop with per-epoch validation, best/last
// checkpoints and the repeated-seed run protocol.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtrattunet/data.hpp"
#include "dtrattunet/metrics.hpp"
#include "dtrattunet/model.hpp"

namespace dtrattunet {

struct TrainConfig {
  int64_t epochs = 60;
  double base_lr = 0.1;
  std::vector<int64_t> decay_epochs{30, 50};
  double decay_factor = 0.1;
  int64_t batch_size = 6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double infection_weight = 0.7;
  double lung_weight = 0.3;
  Task task = Task::Binary;
  int64_t runs = 5;
  std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
  double validation_fraction = 0.1;  // carved from the training split per run
  bool augment = true;
  AugmentPolicy augmentation;
  int64_t max_steps = -1;  // stop early after this many optimizer steps; -1 runs all epochs

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct LossTerms {
  torch::Tensor total;
  torch::Tensor infection;
  torch::Tensor lung;  // undefined for single-decoder models
};

// Binary: sigmoid BCE on 1-channel logits; multiclass: softmax CE on 3-channel
// logits. The lung term is always 1-channel BCE. Means over pixels and batch.
// Without lung logits the infection term carries weight 1.
LossTerms joint_loss(const torch::Tensor& infection_logits, const torch::Tensor& lung_logits,
                     const torch::Tensor& infection_target, const torch::Tensor& lung_target,
                     const TrainConfig& config);

torch::Tensor infection_loss(const torch::Tensor& logits, const torch::Tensor& target, Task task);
torch::Tensor lung_loss(const torch::Tensor& logits, const torch::Tensor& target);

// Restricts torch to deterministic kernels (and a single intra-op thread when on)
// so that seeded runs are bit-reproducible.
void set_deterministic(bool on);

// Piecewise-constant schedule over 0-based epochs.
double lr_at(int64_t epoch, const TrainConfig& config);

struct CheckpointRecord {
  std::string path;
  std::string kind;  // "best" or "last"
  int64_t epoch = 0;
  double val_f1 = 0.0;
};

struct TrainState {
  int64_t epoch = 0;  // number of completed epochs
  int64_t global_step = 0;
  double best_val_f1 = -1.0;
  uint64_t seed = 0;
  std::vector<CheckpointRecord> checkpoints;

  nlohmann::json to_json() const;
  static TrainState from_json(const nlohmann::json& j);
};

struct EpochLog {
  int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_f1 = 0.0;
  double val_dice = 0.0;
  double val_iou = 0.0;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int64_t step, double lr, std::string inputs_hash);

  int64_t step;
  double lr;
  std::string inputs_hash;
};

struct TrainOptions {
  std::filesystem::path output_dir;  // empty: no checkpoints or logs on disk
  std::function<void(int64_t step, double loss)> on_step;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  TrainState state;
  std::vector<double> step_losses;
  std::vector<EpochLog> epochs;
};

class Trainer {
 public:
  Trainer(DTrAttUnet model, TrainConfig config, uint64_t seed);

  // Runs the remaining epochs of the schedule (from state().epoch).
  TrainResult fit(const std::vector<PreparedSample>& train, const std::vector<PreparedSample>& validation,
                  const TrainOptions& options = {});

  // One optimizer step on a batch at the given learning rate; returns the loss before the update.
  double step(const Batch& batch, double lr);
  // Loss of a batch in training mode without updating anything.
  double batch_loss(const Batch& batch);

  void save(const std::filesystem::path& path, const nlohmann::json& metrics = {}) const;
  // Restores model, optimizer and state; refuses a different model config unless allowed.
  void resume(const std::filesystem::path& path, bool allow_config_mismatch = false);
  // Copies the weights of the best validation epoch back into the model;
  // false when no epoch was validated.
  bool restore_best();

  DTrAttUnet& model() { return model_; }
  torch::optim::Adam& optimizer() { return *optimizer_; }
  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return config_; }

 private:
  void set_lr(double lr);
  torch::Tensor compute_loss(const Batch& batch);

  DTrAttUnet model_;
  TrainConfig config_;
  TrainState state_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  torch::ScalarType dtype_;
  std::vector<torch::Tensor> best_weights_;  // parameters then buffers
};

struct RunResult {
  uint64_t seed = 0;
  TrainResult training;
  MetricsReport test;
};

struct ProtocolResult {
  std::vector<RunResult> runs;
  AggregateReport aggregate;
};

// One independent training run per seed: fresh initialization, a seeded
// validation carve-out, the best-by-validation-F1 weights evaluated on the
// test set. Run directories are <output_dir>/run_<seed>.
ProtocolResult run_protocol(const ModelConfig& model_config, const TrainConfig& train_config,
                            const std::vector<PreparedSample>& train_pool, const std::vector<PreparedSample>& test,
                            const std::filesystem::path& output_dir,
                            const std::function<void(uint64_t seed, const EpochLog&)>& on_epoch = {});

}  // namespace dtrattunet
