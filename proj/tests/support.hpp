#pragma once

// Shared helpers for the unit tests and the acceptance runner: a central
// finite-difference gradient checker, a synthetic two-mask slice generator and
// brute-force metric oracles written independently of the library.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dtrattunet/blocks.hpp"
#include "dtrattunet/data.hpp"
#include "dtrattunet/model.hpp"

namespace testing_support {

struct GradCheck {
  int64_t checked = 0;
  int64_t passed = 0;
  double worst_relative = 0.0;
  double fraction() const { return checked ? static_cast<double>(passed) / static_cast<double>(checked) : 0.0; }
};

// Compares autograd against central differences on (a sample of) the
// coordinates of `vars`. All tensors must be float64 leaves requiring grad.
// A coordinate passes when |a - n| <= rel * max(|a|, |n|) or |a - n| <= abs_floor.
GradCheck check_gradient(const std::function<torch::Tensor()>& scalar_fn, const std::vector<torch::Tensor>& vars,
                         int64_t max_coordinates, uint64_t seed, double step = 1e-4, double rel = 1e-3,
                         double abs_floor = 1e-6);

// Parameters of a module plus extra inputs, as one list.
std::vector<torch::Tensor> with_parameters(const torch::nn::Module& module, std::vector<torch::Tensor> extra = {});

// One synthetic CT-like slice: two elliptical "lungs" (label 1 in the lung mask)
// containing 1-3 disc-shaped lesions (labels 1/2 when multiclass, 1 otherwise).
// Raw intensities lie in [0, 255].
dtrattunet::SliceSample synthetic_slice(int64_t size, dtrattunet::Task task, uint64_t seed);

std::vector<dtrattunet::PreparedSample> synthetic_set(int64_t count, int64_t size, int64_t channels,
                                                      dtrattunet::Task task, uint64_t seed);

// Writes images/, infection_masks/ and lung_masks/ PNGs (8 bit) under root.
void write_corpus(const std::filesystem::path& root, int64_t count, int64_t size, dtrattunet::Task task,
                  uint64_t seed);

struct Counts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Pixel loop over flattened label maps.
Counts naive_counts(const std::vector<int64_t>& pred, const std::vector<int64_t>& gt, int64_t class_id);
double naive_dice(const Counts& c);       // 100 when tp + fp + fn == 0
double naive_f1_micro(const std::vector<Counts>& per_image);
double naive_iou_micro(const std::vector<Counts>& per_image);
double naive_dice_macro(const std::vector<Counts>& per_image);

std::vector<int64_t> flat_labels(const torch::Tensor& t);

// Per-head, per-token scalar loop over the projections of a batch-1 input.
torch::Tensor naive_msa(dtrattunet::MultiHeadSelfAttentionImpl& msa, const torch::Tensor& s);

// Fresh scratch directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace testing_support
