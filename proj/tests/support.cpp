#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <unistd.h>

#include "dtrattunet/image_io.hpp"

namespace testing_support {

namespace fs = std::filesystem;
using namespace dtrattunet;

GradCheck check_gradient(const std::function<torch::Tensor()>& scalar_fn, const std::vector<torch::Tensor>& vars,
                         int64_t max_coordinates, uint64_t seed, double step, double rel, double abs_floor) {
  for (const auto& v : vars) {
    if (v.mutable_grad().defined()) v.mutable_grad().zero_();
  }
  scalar_fn().backward();
  std::vector<torch::Tensor> analytic;
  for (const auto& v : vars) analytic.push_back(v.grad().defined() ? v.grad().clone() : torch::zeros_like(v));

  std::vector<std::pair<std::size_t, int64_t>> coords;
  for (std::size_t t = 0; t < vars.size(); ++t) {
    for (int64_t i = 0; i < vars[t].numel(); ++i) coords.emplace_back(t, i);
  }
  if (max_coordinates > 0 && static_cast<int64_t>(coords.size()) > max_coordinates) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(max_coordinates));
  }

  torch::NoGradGuard no_grad;
  GradCheck result;
  for (const auto& [t, i] : coords) {
    auto flat = vars[t].view(-1);
    double* p = flat.data_ptr<double>() + i;
    const double saved = *p;
    *p = saved + step;
    const double plus = scalar_fn().item<double>();
    *p = saved - step;
    const double minus = scalar_fn().item<double>();
    *p = saved;
    const double numeric = (plus - minus) / (2.0 * step);
    const double a = analytic[t].view(-1)[i].item<double>();
    const double diff = std::abs(a - numeric);
    const double scale = std::max(std::abs(a), std::abs(numeric));
    ++result.checked;
    if (diff <= rel * scale || diff <= abs_floor) ++result.passed;
    if (scale > 0) result.worst_relative = std::max(result.worst_relative, diff / scale);
  }
  return result;
}

std::vector<torch::Tensor> with_parameters(const torch::nn::Module& module, std::vector<torch::Tensor> extra) {
  for (const auto& p : module.parameters()) extra.push_back(p);
  return extra;
}

SliceSample synthetic_slice(int64_t size, Task task, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double s = static_cast<double>(size);
  auto ys = torch::arange(size, torch::kFloat64).view({size, 1}).expand({size, size});
  auto xs = torch::arange(size, torch::kFloat64).view({1, size}).expand({size, size});

  auto ellipse = [&](double cy, double cx, double ry, double rx) {
    return ((ys - cy) / ry).pow(2) + ((xs - cx) / rx).pow(2) <= 1.0;
  };
  const double jitter = 0.03 * s;
  auto lung = ellipse(0.5 * s + jitter * (u(rng) - 0.5), 0.3 * s + jitter * (u(rng) - 0.5), 0.32 * s, 0.15 * s) |
              ellipse(0.5 * s + jitter * (u(rng) - 0.5), 0.7 * s + jitter * (u(rng) - 0.5), 0.32 * s, 0.15 * s);

  auto infection = torch::zeros({size, size}, torch::kInt64);
  const int lesions = 1 + static_cast<int>(u(rng) * 3.0);
  for (int k = 0; k < lesions; ++k) {
    const double cy = (0.3 + 0.4 * u(rng)) * s;
    const double cx = (u(rng) < 0.5 ? 0.3 : 0.7) * s + (u(rng) - 0.5) * 0.1 * s;
    const double r = (0.05 + 0.06 * u(rng)) * s;
    const int64_t label = task == Task::Multiclass && u(rng) < 0.5 ? 2 : 1;
    infection.masked_fill_(ellipse(cy, cx, r, r) & lung, label);
  }

  auto image = torch::full({size, size}, 120.0, torch::kFloat64);
  image.masked_fill_(lung, 30.0);
  image.masked_fill_(infection == 1, 150.0);
  image.masked_fill_(infection == 2, 220.0);
  std::normal_distribution<double> noise(0.0, 4.0);
  auto acc = image.accessor<double, 2>();
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) acc[y][x] = std::clamp(acc[y][x] + noise(rng), 0.0, 255.0);
  }

  SliceSample sample;
  sample.image = image.to(torch::kFloat32);
  sample.infection_mask = infection;
  sample.lung_mask = lung.to(torch::kInt64);
  sample.source_id = "synthetic_" + std::to_string(seed);
  sample.scan_id = sample.source_id;
  return sample;
}

std::vector<PreparedSample> synthetic_set(int64_t count, int64_t size, int64_t channels, Task task, uint64_t seed) {
  PreprocessOptions options;
  options.image_size = size;
  options.input_channels = channels;
  std::vector<PreparedSample> out;
  for (int64_t i = 0; i < count; ++i) {
    out.push_back(preprocess(synthetic_slice(size, task, seed * 1000 + static_cast<uint64_t>(i)), options));
  }
  return out;
}

void write_corpus(const fs::path& root, int64_t count, int64_t size, Task task, uint64_t seed) {
  for (const char* dir : {"images", "infection_masks", "lung_masks"}) fs::create_directories(root / dir);
  for (int64_t i = 0; i < count; ++i) {
    const auto s = synthetic_slice(size, task, seed * 1000 + static_cast<uint64_t>(i));
    char stem[32];
    std::snprintf(stem, sizeof(stem), "slice_%03lld.png", static_cast<long long>(i));
    write_png_gray(root / "images" / stem, s.image.round());
    write_png_gray(root / "infection_masks" / stem, *s.infection_mask);
    write_png_gray(root / "lung_masks" / stem, *s.lung_mask);
  }
}

Counts naive_counts(const std::vector<int64_t>& pred, const std::vector<int64_t>& gt, int64_t class_id) {
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == class_id;
    const bool g = gt[i] == class_id;
    if (p && g) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (g) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

double naive_dice(const Counts& c) {
  const double denom = 2.0 * c.tp + c.fp + c.fn;
  return denom == 0.0 ? 100.0 : 100.0 * 2.0 * c.tp / denom;
}

namespace {
Counts total(const std::vector<Counts>& per_image) {
  Counts t;
  for (const auto& c : per_image) {
    t.tp += c.tp;
    t.fp += c.fp;
    t.fn += c.fn;
    t.tn += c.tn;
  }
  return t;
}
}  // namespace

double naive_f1_micro(const std::vector<Counts>& per_image) {
  const auto t = total(per_image);
  const double precision_denom = t.tp + t.fp;
  const double recall_denom = t.tp + t.fn;
  if (t.tp + t.fp + t.fn == 0) return 100.0;
  if (t.tp == 0) return 0.0;
  const double precision = t.tp / precision_denom;
  const double recall = t.tp / recall_denom;
  return 100.0 * 2.0 * precision * recall / (precision + recall);
}

double naive_iou_micro(const std::vector<Counts>& per_image) {
  const auto t = total(per_image);
  if (t.tp + t.fp + t.fn == 0) return 100.0;
  return 100.0 * t.tp / static_cast<double>(t.tp + t.fp + t.fn);
}

double naive_dice_macro(const std::vector<Counts>& per_image) {
  double sum = 0.0;
  for (const auto& c : per_image) sum += naive_dice(c);
  return sum / static_cast<double>(per_image.size());
}

// Explicit loops over heads, queries and keys.
torch::Tensor naive_msa(dtrattunet::MultiHeadSelfAttentionImpl& msa, const torch::Tensor& s) {
  auto q = msa.query(s), k = msa.key(s), v = msa.value(s);
  const int64_t n = s.size(1), hd = msa.head_dim;
  auto concat = torch::zeros_like(q);
  for (int64_t h = 0; h < msa.heads; ++h) {
    for (int64_t i = 0; i < n; ++i) {
      std::vector<double> scores(n);
      double peak = -1e300;
      for (int64_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (int64_t d = 0; d < hd; ++d) dot += q[0][i][h * hd + d].item<double>() * k[0][j][h * hd + d].item<double>();
        scores[j] = dot / std::sqrt(static_cast<double>(hd));
        peak = std::max(peak, scores[j]);
      }
      double z = 0.0;
      for (auto& sc : scores) z += (sc = std::exp(sc - peak));
      for (int64_t d = 0; d < hd; ++d) {
        double acc = 0.0;
        for (int64_t j = 0; j < n; ++j) acc += scores[j] / z * v[0][j][h * hd + d].item<double>();
        concat[0][i][h * hd + d] = acc;
      }
    }
  }
  return msa.out(concat);
}

std::vector<int64_t> flat_labels(const torch::Tensor& t) {
  auto c = t.to(torch::kInt64).contiguous().view(-1);
  return std::vector<int64_t>(c.data_ptr<int64_t>(), c.data_ptr<int64_t>() + c.numel());
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dtrattunet_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace testing_support
