#pragma once

// Pixel-level evaluation: discretization of logits, one-vs-rest confusion
// counts, micro F1 / IoU pooled over all images, macro Dice averaged per
// image, multi-run aggregation and report emission.
//
// All metric values are percentages in [0, 100].

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtrattunet/data.hpp"
#include "dtrattunet/model.hpp"

namespace dtrattunet {

// (B, C, H, W) or (C, H, W) logits -> (B, H, W) or (H, W) int64 labels.
// Binary: sigmoid(logit) > threshold. Multiclass: argmax, ties to the lowest index.
torch::Tensor discretize(const torch::Tensor& logits, Task task, double threshold = 0.5);

struct Confusion {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }
  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const Confusion&) const = default;
};

// One-vs-rest counts of class_id over equally shaped label maps.
Confusion confusion(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_id);

Confusion pool(std::span<const Confusion> per_image);

// 2TP / (2TP + FP + FN) as a percentage. A case with nothing to find and
// nothing predicted (TP + FP + FN == 0) scores 100.
double dice_of(const Confusion& c);

double f1_micro(const Confusion& pooled);
double iou_micro(const Confusion& pooled);
double f1_micro(std::span<const Confusion> per_image);
double iou_micro(std::span<const Confusion> per_image);
double dice_macro(std::span<const Confusion> per_image);

struct ClassMetrics {
  std::string name;
  int64_t class_id = 1;
  double f1 = 0.0;
  double dice = 0.0;
  double iou = 0.0;
  std::vector<Confusion> per_image;
};

struct MetricsReport {
  Task task = Task::Binary;
  std::vector<ClassMetrics> classes;  // infection classes; background excluded
  std::optional<ClassMetrics> lung;   // present when both the model and the data provide lungs
  std::vector<std::string> source_ids;

  std::size_t n_images() const { return source_ids.size(); }
  // Mean F1 over the reported infection classes, used for model selection.
  double selection_f1() const;
};

// Names and label ids of the reported infection classes.
std::vector<std::pair<int64_t, std::string>> reported_classes(Task task);

ClassMetrics class_metrics(std::string name, int64_t class_id, std::vector<Confusion> per_image);

// Eval-mode inference over a prepared dataset. Every sample needs an infection mask.
MetricsReport evaluate(DTrAttUnetImpl& model, const std::vector<PreparedSample>& dataset, Task task,
                       std::size_t batch_size = 8, double threshold = 0.5);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation (divisor n)
};

Summary summarize(std::span<const double> values);

struct AggregateClass {
  std::string name;
  std::size_t n_images = 0;
  std::vector<double> f1, dice, iou;  // one value per run
};

struct AggregateReport {
  Task task = Task::Binary;
  std::size_t runs = 0;
  std::vector<AggregateClass> classes;
};

AggregateReport aggregate(std::span<const MetricsReport> runs);

nlohmann::json report_json(const AggregateReport& report);
nlohmann::json report_json(const MetricsReport& report, bool per_image = false);
// Long-format CSV: task,class,metric,n_images,runs,mean,std
std::string report_csv(const AggregateReport& report);
// task,class,source_id,tp,fp,fn,tn,dice
std::string per_image_csv(const MetricsReport& report);

// Grayscale slice in [0, 1] with labels blended at 50% opacity: label 1 green,
// label 2 red. An optional lung mask is traced in blue.
torch::Tensor overlay(const torch::Tensor& image, const torch::Tensor& labels,
                      const torch::Tensor& lung_mask = torch::Tensor());

}  // namespace dtrattunet
