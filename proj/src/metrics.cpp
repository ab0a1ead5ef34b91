#include "dtrattunet/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "dtrattunet/errors.hpp"

namespace dtrattunet {

torch::Tensor discretize(const torch::Tensor& logits, Task task, double threshold) {
  if (logits.dim() != 3 && logits.dim() != 4) throw ValidationError("discretize: expected (B,)C,H,W logits");
  const int64_t channel_dim = logits.dim() - 3;
  const int64_t channels = logits.size(channel_dim);
  if (task == Task::Binary) {
    if (channels != 1) throw ValidationError("discretize: binary logits need exactly 1 channel");
    return (torch::sigmoid(logits.to(torch::kFloat64)) > threshold).to(torch::kInt64).squeeze(channel_dim);
  }
  if (channels != 3) throw ValidationError("discretize: multiclass logits need exactly 3 channels");
  // Keep the first maximum: scan channels in order with a strict comparison.
  auto best = logits.select(channel_dim, 0);
  auto label = torch::zeros_like(best, torch::kInt64);
  for (int64_t c = 1; c < channels; ++c) {
    auto candidate = logits.select(channel_dim, c);
    auto better = candidate > best;
    best = torch::where(better, candidate, best);
    label = torch::where(better, torch::full_like(label, c), label);
  }
  return label;
}

Confusion confusion(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_id) {
  if (pred.sizes() != gt.sizes()) throw ValidationError("confusion: prediction and ground truth differ in shape");
  auto p = pred == class_id;
  auto g = gt == class_id;
  Confusion c;
  c.tp = (p & g).sum().item<int64_t>();
  c.fp = (p & ~g).sum().item<int64_t>();
  c.fn = (~p & g).sum().item<int64_t>();
  c.tn = pred.numel() - c.tp - c.fp - c.fn;
  return c;
}

Confusion pool(std::span<const Confusion> per_image) {
  Confusion total;
  for (const auto& c : per_image) total += c;
  return total;
}

double dice_of(const Confusion& c) {
  const int64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double f1_micro(const Confusion& pooled) { return dice_of(pooled); }

double iou_micro(const Confusion& pooled) {
  const int64_t denom = pooled.tp + pooled.fp + pooled.fn;
  if (denom == 0) return 100.0;
  return 100.0 * static_cast<double>(pooled.tp) / static_cast<double>(denom);
}

double f1_micro(std::span<const Confusion> per_image) { return f1_micro(pool(per_image)); }
double iou_micro(std::span<const Confusion> per_image) { return iou_micro(pool(per_image)); }

double dice_macro(std::span<const Confusion> per_image) {
  if (per_image.empty()) throw ValidationError("dice_macro: no images");
  double sum = 0.0;
  for (const auto& c : per_image) sum += dice_of(c);
  return sum / static_cast<double>(per_image.size());
}

double MetricsReport::selection_f1() const {
  if (classes.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& c : classes) sum += c.f1;
  return sum / static_cast<double>(classes.size());
}

std::vector<std::pair<int64_t, std::string>> reported_classes(Task task) {
  if (task == Task::Binary) return {{1, "infection"}};
  return {{1, "GGO"}, {2, "Consolidation"}};
}

ClassMetrics class_metrics(std::string name, int64_t class_id, std::vector<Confusion> per_image) {
  ClassMetrics m;
  m.name = std::move(name);
  m.class_id = class_id;
  m.f1 = f1_micro(per_image);
  m.iou = iou_micro(per_image);
  m.dice = per_image.empty() ? 0.0 : dice_macro(per_image);
  m.per_image = std::move(per_image);
  return m;
}

MetricsReport evaluate(DTrAttUnetImpl& model, const std::vector<PreparedSample>& dataset, Task task,
                       std::size_t batch_size, double threshold) {
  std::vector<std::string> missing;
  bool all_lungs = true;
  for (const auto& s : dataset) {
    if (!s.infection.defined()) missing.push_back(s.source_id);
    all_lungs = all_lungs && s.lung.defined();
  }
  if (!missing.empty()) {
    std::string msg = "evaluate: samples without an infection mask:";
    for (const auto& m : missing) msg += " " + m;
    throw DataError(msg);
  }
  if (model.config().task() != task) throw ValidationError("evaluate: model and dataset task differ");
  if (batch_size == 0) batch_size = 1;

  const auto classes = reported_classes(task);
  std::vector<std::vector<Confusion>> per_class(classes.size());
  std::vector<Confusion> lung_counts;
  const bool with_lung = all_lungs && model.config().use_dual_decoder;

  MetricsReport report;
  report.task = task;
  const bool was_training = model.is_training();
  model.eval();
  torch::NoGradGuard no_grad;
  const auto dtype = model.parameters().front().scalar_type();
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(dataset.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = collate(dataset, idx);
    const auto out = model.forward(batch.input.to(dtype));
    const auto pred = discretize(out.infection_logits, task, threshold);
    const auto lung_pred = with_lung ? discretize(out.lung_logits, Task::Binary, threshold) : torch::Tensor();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto b = static_cast<int64_t>(k);
      for (std::size_t c = 0; c < classes.size(); ++c) {
        per_class[c].push_back(confusion(pred[b], batch.infection[b], classes[c].first));
      }
      if (with_lung) lung_counts.push_back(confusion(lung_pred[b], batch.lung[b], 1));
      report.source_ids.push_back(dataset[idx[k]].source_id);
    }
  }
  if (was_training) model.train();
  for (std::size_t c = 0; c < classes.size(); ++c) {
    report.classes.push_back(class_metrics(classes[c].second, classes[c].first, std::move(per_class[c])));
  }
  if (with_lung) report.lung = class_metrics("lung", 1, std::move(lung_counts));
  return report;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) return {};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

AggregateReport aggregate(std::span<const MetricsReport> runs) {
  AggregateReport agg;
  if (runs.empty()) return agg;
  agg.task = runs.front().task;
  agg.runs = runs.size();
  for (const auto& cls : runs.front().classes) {
    AggregateClass a;
    a.name = cls.name;
    a.n_images = runs.front().n_images();
    agg.classes.push_back(a);
  }
  for (const auto& run : runs) {
    if (run.task != agg.task || run.classes.size() != agg.classes.size()) {
      throw ValidationError("aggregate: runs disagree on task or class layout");
    }
    for (std::size_t c = 0; c < run.classes.size(); ++c) {
      agg.classes[c].f1.push_back(run.classes[c].f1);
      agg.classes[c].dice.push_back(run.classes[c].dice);
      agg.classes[c].iou.push_back(run.classes[c].iou);
    }
  }
  return agg;
}

namespace {

nlohmann::json summary_json(const std::vector<double>& values) {
  const auto s = summarize(values);
  return {{"mean", s.mean}, {"std", s.std}, {"values", values}};
}

nlohmann::json class_json(const ClassMetrics& c, const std::vector<std::string>& ids, bool per_image) {
  nlohmann::json j = {{"class", c.name}, {"label", c.class_id}, {"f1", c.f1}, {"dice", c.dice}, {"iou", c.iou}};
  const auto pooled = pool(c.per_image);
  j["counts"] = {{"tp", pooled.tp}, {"fp", pooled.fp}, {"fn", pooled.fn}, {"tn", pooled.tn}};
  if (per_image) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < c.per_image.size(); ++i) {
      const auto& k = c.per_image[i];
      rows.push_back({{"source_id", i < ids.size() ? ids[i] : std::string()},
                      {"tp", k.tp},
                      {"fp", k.fp},
                      {"fn", k.fn},
                      {"tn", k.tn},
                      {"dice", dice_of(k)}});
    }
    j["per_image"] = rows;
  }
  return j;
}

std::string fixed(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

}  // namespace

nlohmann::json report_json(const AggregateReport& report) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : report.classes) {
    classes.push_back({{"class", c.name},
                       {"n_images", c.n_images},
                       {"f1", summary_json(c.f1)},
                       {"dice", summary_json(c.dice)},
                       {"iou", summary_json(c.iou)}});
  }
  return {{"task", to_string(report.task)}, {"runs", report.runs}, {"std_convention", "population"},
          {"classes", classes}};
}

nlohmann::json report_json(const MetricsReport& report, bool per_image) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : report.classes) classes.push_back(class_json(c, report.source_ids, per_image));
  nlohmann::json j = {{"task", to_string(report.task)}, {"n_images", report.n_images()}, {"classes", classes}};
  if (report.lung) j["lung"] = class_json(*report.lung, report.source_ids, per_image);
  return j;
}

std::string report_csv(const AggregateReport& report) {
  std::ostringstream os;
  os << "task,class,metric,n_images,runs,mean,std\n";
  for (const auto& c : report.classes) {
    for (const auto& [metric, values] :
         {std::pair{"f1", &c.f1}, std::pair{"dice", &c.dice}, std::pair{"iou", &c.iou}}) {
      const auto s = summarize(*values);
      os << to_string(report.task) << ',' << c.name << ',' << metric << ',' << c.n_images << ',' << report.runs << ','
         << fixed(s.mean) << ',' << fixed(s.std) << '\n';
    }
  }
  return os.str();
}

std::string per_image_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "task,class,source_id,tp,fp,fn,tn,dice\n";
  for (const auto& c : report.classes) {
    for (std::size_t i = 0; i < c.per_image.size(); ++i) {
      const auto& k = c.per_image[i];
      os << to_string(report.task) << ',' << c.name << ',' << report.source_ids.at(i) << ',' << k.tp << ',' << k.fp
         << ',' << k.fn << ',' << k.tn << ',' << fixed(dice_of(k)) << '\n';
    }
  }
  return os.str();
}

torch::Tensor overlay(const torch::Tensor& image, const torch::Tensor& labels, const torch::Tensor& lung_mask) {
  if (image.dim() != 2 || labels.sizes() != image.sizes()) {
    throw ValidationError("overlay: image and labels must be equally sized 2-D maps");
  }
  auto gray = (image.to(torch::kFloat32).clamp(0.0, 1.0) * 255.0);
  auto rgb = gray.unsqueeze(-1).expand({image.size(0), image.size(1), 3}).clone();
  auto blend = [&](int64_t label, std::array<float, 3> color) {
    auto where = (labels == label).unsqueeze(-1);
    auto tint = torch::tensor({color[0], color[1], color[2]}, torch::kFloat32);
    rgb = torch::where(where, 0.5 * rgb + 0.5 * tint, rgb);
  };
  blend(1, {0.f, 255.f, 0.f});
  blend(2, {255.f, 0.f, 0.f});
  if (lung_mask.defined()) {
    if (lung_mask.sizes() != image.sizes()) throw ValidationError("overlay: lung mask size mismatch");
    // Boundary: lung pixels with a non-lung pixel in their 3x3 neighbourhood.
    auto m = (lung_mask > 0).to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
    auto eroded = -torch::max_pool2d(-torch::nn::functional::pad(
                                         m, torch::nn::functional::PadFuncOptions({1, 1, 1, 1}).value(0.0)),
                                     {3, 3}, {1, 1});
    auto edge = ((m - eroded) > 0.5).squeeze(0).squeeze(0).unsqueeze(-1);
    rgb = torch::where(edge, torch::tensor({0.f, 0.f, 255.f}), rgb);
  }
  return rgb.round().to(torch::kUInt8);
}

}  // namespace dtrattunet
