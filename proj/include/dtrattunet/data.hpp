#pragma once

// Slice/mask corpora: on-disk loading, model-ready preprocessing, paired
// geometric augmentation, reproducible splits and batch assembly.
//
// Directory layout (matched by file stem):
//   root/images/<stem>.png | <stem>.nii | <stem>.nii.gz
//   root/infection_masks/<stem>.<ext>     (optional per stem)
//   root/lung_masks/<stem>.<ext>          (optional per stem)
//   root/manifest.csv                     (optional; columns stem,scan_id[,subset])
// NIfTI volumes are cut into axial slices at load time.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dtrattunet/model.hpp"

namespace dtrattunet {

struct SliceSample {
  torch::Tensor image;                          // (H, W) float32, raw intensity
  std::optional<torch::Tensor> infection_mask;  // (H, W) int64 labels
  std::optional<torch::Tensor> lung_mask;       // (H, W) int64 in {0, 1}
  std::string source_id;
  std::string scan_id;
  std::string subset;  // manifest subset column, empty when absent
};

struct DatasetLayout {
  std::string images_dir = "images";
  std::string infection_dir = "infection_masks";
  std::string lung_dir = "lung_masks";
  std::string manifest_file = "manifest.csv";
  Task task = Task::Binary;
  // Map every nonzero infection label to 1 (binary task on multi-class masks).
  bool binarize_infection = false;
};

// Throws ValidationError if masks disagree with the image size or carry labels
// outside the task's label set.
void validate_sample(const SliceSample& sample, Task task);

std::vector<SliceSample> load_dataset(const std::filesystem::path& root, const DatasetLayout& layout);

enum class IntensityMode { MinMax, HuWindow };

struct PreprocessOptions {
  int64_t image_size = 224;
  int64_t input_channels = 3;
  IntensityMode intensity = IntensityMode::MinMax;
  double window_low = -1000.0;
  double window_high = 400.0;
};

struct PreparedSample {
  torch::Tensor input;      // (C, S, S) float32 in [0, 1]
  torch::Tensor infection;  // (S, S) int64, undefined when absent
  torch::Tensor lung;       // (S, S) int64, undefined when absent
  std::string source_id;
  std::string scan_id;
  bool constant_image = false;  // max == min, input set to zeros
};

// Bilinear resize + intensity scaling for the image, nearest-neighbour resize
// for masks.
PreparedSample preprocess(const SliceSample& sample, const PreprocessOptions& options);

struct AugmentPolicy {
  double rotate_probability = 0.1;
  double max_rotation_degrees = 35.0;
  double hflip_probability = 0.2;
  double vflip_probability = 0.2;
};

struct AugmentRecord {
  bool rotated = false;
  double angle_degrees = 0.0;
  bool hflip = false;
  bool vflip = false;
};

// Geometric transforms applied identically to the image (bilinear) and the
// masks (nearest neighbour). Rotation fills with zero.
void rotate(PreparedSample& sample, double degrees);
void flip_horizontal(PreparedSample& sample);
void flip_vertical(PreparedSample& sample);

// Rotate, then horizontal flip, then vertical flip, each drawn independently.
AugmentRecord augment(PreparedSample& sample, std::mt19937_64& rng, const AugmentPolicy& policy = {});

enum class SplitGranularity { Slice, Scan };

struct SplitSpec {
  double train_fraction = 0.7;
  uint64_t seed = 0;
  SplitGranularity granularity = SplitGranularity::Slice;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// floor(train_fraction * units) units go to the training side, where a unit
// is a slice or a scan. Index lists are sorted.
SplitIndices split(std::span<const SliceSample> samples, const SplitSpec& spec);
// Same rule on prepared samples (scan ids carried over from loading).
SplitIndices split(std::span<const PreparedSample> samples, const SplitSpec& spec);
// Split by the manifest subset column ("train" / "test").
SplitIndices split_by_subset(std::span<const SliceSample> samples);

template <typename T>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::size_t>& indices) {
  std::vector<T> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(items.at(i));
  return out;
}

struct Batch {
  torch::Tensor input;      // (B, C, S, S)
  torch::Tensor infection;  // (B, S, S) int64, undefined if any sample lacks it
  torch::Tensor lung;       // (B, S, S) int64, undefined if any sample lacks it
  std::vector<std::size_t> indices;
};

Batch collate(std::span<const PreparedSample> samples, std::span<const std::size_t> indices);

// splitmix64-style mixing used to derive independent rng streams.
uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b = 0);

// Deterministic epoch batches: the shuffle order depends on (seed, epoch) and
// each sample's augmentation stream on (seed, epoch, sample index).
class BatchStream {
 public:
  BatchStream(const std::vector<PreparedSample>& samples, std::size_t batch_size, uint64_t seed, bool shuffle,
              std::optional<AugmentPolicy> augmentation);

  std::vector<Batch> epoch(int64_t epoch) const;
  std::size_t batches_per_epoch() const;

 private:
  const std::vector<PreparedSample>* samples_;
  std::size_t batch_size_;
  uint64_t seed_;
  bool shuffle_;
  std::optional<AugmentPolicy> augmentation_;
};

}  // namespace dtrattunet
