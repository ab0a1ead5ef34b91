#include "dtrattunet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "dtrattunet/errors.hpp"
#include "dtrattunet/image_io.hpp"

namespace dtrattunet {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace {

enum class FileKind { Png, Nifti };

struct ImageFile {
  fs::path path;
  FileKind kind;
};

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::optional<std::pair<std::string, FileKind>> split_name(const std::string& name) {
  for (const auto& [suffix, kind] : {std::pair{std::string(".nii.gz"), FileKind::Nifti},
                                     std::pair{std::string(".nii"), FileKind::Nifti},
                                     std::pair{std::string(".png"), FileKind::Png}}) {
    if (has_suffix(name, suffix)) return std::pair{name.substr(0, name.size() - suffix.size()), kind};
  }
  return std::nullopt;
}

std::map<std::string, ImageFile> scan_directory(const fs::path& dir) {
  std::map<std::string, ImageFile> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto parsed = split_name(entry.path().filename().string());
    if (!parsed) continue;
    auto [it, inserted] = files.emplace(parsed->first, ImageFile{entry.path(), parsed->second});
    if (!inserted) throw DataError("duplicate stem '" + parsed->first + "' in " + dir.string());
  }
  return files;
}

struct ManifestRow {
  std::string scan_id;
  std::string subset;
};

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::vector<std::pair<std::string, ManifestRow>> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) return {};
  const auto header = split_csv_line(line);
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return std::nullopt;
  };
  const auto stem_col = column("stem");
  const auto scan_col = column("scan_id");
  const auto subset_col = column("subset");
  if (!stem_col || !scan_col) throw DataError("manifest " + path.string() + " needs 'stem' and 'scan_id' columns");
  std::vector<std::pair<std::string, ManifestRow>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() <= std::max(*stem_col, *scan_col)) {
      throw DataError("manifest " + path.string() + ": short row at line " + std::to_string(line_no));
    }
    ManifestRow row{cells[*scan_col], subset_col && *subset_col < cells.size() ? cells[*subset_col] : ""};
    rows.emplace_back(cells[*stem_col], row);
  }
  return rows;
}

torch::Tensor read_slices(const ImageFile& file) {
  if (file.kind == FileKind::Png) return read_png(file.path).unsqueeze(0);
  return read_nifti(file.path);
}

torch::Tensor to_labels(const torch::Tensor& raw) { return raw.round().to(torch::kInt64); }

torch::Tensor resize_bilinear(const torch::Tensor& image, int64_t size) {
  if (image.size(0) == size && image.size(1) == size) return image;
  return F::interpolate(image.unsqueeze(0).unsqueeze(0), F::InterpolateFuncOptions()
                                                             .size(std::vector<int64_t>{size, size})
                                                             .mode(torch::kBilinear)
                                                             .align_corners(false))
      .squeeze(0)
      .squeeze(0);
}

torch::Tensor resize_nearest(const torch::Tensor& mask, int64_t size) {
  if (mask.size(0) == size && mask.size(1) == size) return mask;
  return F::interpolate(mask.to(torch::kFloat32).unsqueeze(0).unsqueeze(0),
                        F::InterpolateFuncOptions().size(std::vector<int64_t>{size, size}).mode(torch::kNearest))
      .squeeze(0)
      .squeeze(0)
      .round()
      .to(torch::kInt64);
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

template <typename Rng>
void fisher_yates(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

std::size_t train_units(double fraction, std::size_t units) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("split: train_fraction must lie in (0, 1)");
  // The epsilon keeps e.g. 0.7 * 10 from landing on 6.999...
  const auto n_train = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(units) + 1e-9));
  if (n_train == 0 || n_train >= units) {
    throw ValidationError("split: train_fraction " + std::to_string(fraction) + " over " + std::to_string(units) +
                          " units leaves one side empty");
  }
  return n_train;
}

SplitIndices split_impl(const std::vector<std::string>& scan_ids, const SplitSpec& spec) {
  if (scan_ids.empty()) throw ValidationError("split: no samples");
  std::mt19937_64 rng(mix_seed(spec.seed, 0x5eed5u));
  SplitIndices out;
  if (spec.granularity == SplitGranularity::Slice) {
    std::vector<std::size_t> order(scan_ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    fisher_yates(order, rng);
    const auto n_train = train_units(spec.train_fraction, order.size());
    out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  } else {
    const std::set<std::string> unique(scan_ids.begin(), scan_ids.end());
    const std::vector<std::string> scans(unique.begin(), unique.end());
    std::vector<std::size_t> order(scans.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    fisher_yates(order, rng);
    const auto n_train = train_units(spec.train_fraction, order.size());
    std::set<std::string> train_scans;
    for (std::size_t i = 0; i < n_train; ++i) train_scans.insert(scans[order[i]]);
    for (std::size_t i = 0; i < scan_ids.size(); ++i) {
      (train_scans.count(scan_ids[i]) ? out.train : out.test).push_back(i);
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

}  // namespace

void validate_sample(const SliceSample& sample, Task task) {
  if (!sample.image.defined() || sample.image.dim() != 2 || sample.image.numel() == 0) {
    throw ValidationError(sample.source_id + ": image must be a non-empty 2-D array");
  }
  auto check_mask = [&](const torch::Tensor& mask, const char* what, int64_t max_label) {
    if (mask.dim() != 2 || mask.size(0) != sample.image.size(0) || mask.size(1) != sample.image.size(1)) {
      throw ValidationError(sample.source_id + ": " + what + " does not match the image size");
    }
    if (mask.numel() && (mask.min().item<int64_t>() < 0 || mask.max().item<int64_t>() > max_label)) {
      throw ValidationError(sample.source_id + ": " + what + " has labels outside [0, " + std::to_string(max_label) +
                            "]");
    }
  };
  if (sample.infection_mask) check_mask(*sample.infection_mask, "infection mask", task == Task::Binary ? 1 : 2);
  if (sample.lung_mask) check_mask(*sample.lung_mask, "lung mask", 1);
}

std::vector<SliceSample> load_dataset(const fs::path& root, const DatasetLayout& layout) {
  if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root.string());
  const auto images = scan_directory(root / layout.images_dir);
  const auto infection = scan_directory(root / layout.infection_dir);
  const auto lungs = scan_directory(root / layout.lung_dir);

  std::vector<std::string> orphans;
  for (const auto* masks : {&infection, &lungs}) {
    for (const auto& [stem, file] : *masks) {
      if (!images.count(stem)) orphans.push_back(file.path.string());
    }
  }
  if (!orphans.empty()) {
    std::string msg = "masks without a matching image:";
    for (const auto& o : orphans) msg += "\n  " + o;
    throw DataError(msg);
  }

  std::vector<std::pair<std::string, ManifestRow>> wanted;
  const auto manifest_path = root / layout.manifest_file;
  if (!layout.manifest_file.empty() && fs::is_regular_file(manifest_path)) {
    wanted = read_manifest(manifest_path);
    std::vector<std::string> missing;
    for (const auto& [stem, row] : wanted) {
      if (!images.count(stem)) missing.push_back(stem);
    }
    if (!missing.empty()) {
      std::string msg = "manifest lists stems without an image:";
      for (const auto& m : missing) msg += "\n  " + m;
      throw DataError(msg);
    }
  } else {
    for (const auto& [stem, file] : images) wanted.emplace_back(stem, ManifestRow{stem, ""});
  }

  std::vector<SliceSample> samples;
  for (const auto& [stem, row] : wanted) {
    const auto& image_file = images.at(stem);
    const auto volume = read_slices(image_file);
    std::optional<torch::Tensor> infection_volume;
    std::optional<torch::Tensor> lung_volume;
    if (auto it = infection.find(stem); it != infection.end()) {
      infection_volume = to_labels(read_slices(it->second));
      if (layout.binarize_infection) infection_volume = (*infection_volume > 0).to(torch::kInt64);
    }
    if (auto it = lungs.find(stem); it != lungs.end()) {
      lung_volume = (read_slices(it->second) > 0).to(torch::kInt64);
    }
    for (const auto* mask : {&infection_volume, &lung_volume}) {
      if (*mask && (*mask)->sizes() != volume.sizes()) {
        throw DataError("mask for '" + stem + "' does not match its image dimensions");
      }
    }
    const int64_t slices = volume.size(0);
    for (int64_t z = 0; z < slices; ++z) {
      SliceSample s;
      s.image = volume[z].contiguous();
      if (infection_volume) s.infection_mask = (*infection_volume)[z].contiguous();
      if (lung_volume) s.lung_mask = (*lung_volume)[z].contiguous();
      if (image_file.kind == FileKind::Nifti) {
        char suffix[32];
        std::snprintf(suffix, sizeof(suffix), "#%04lld", static_cast<long long>(z));
        s.source_id = stem + suffix;
      } else {
        s.source_id = stem;
      }
      s.scan_id = row.scan_id.empty() ? stem : row.scan_id;
      s.subset = row.subset;
      validate_sample(s, layout.task);
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

// ---------------------------------------------------------------------------

PreparedSample preprocess(const SliceSample& sample, const PreprocessOptions& options) {
  if (!sample.image.defined() || sample.image.dim() != 2) {
    throw ValidationError(sample.source_id + ": image must be 2-D");
  }
  if (options.image_size <= 0 || options.input_channels <= 0) {
    throw ConfigError("preprocess: image_size and input_channels must be positive");
  }
  require_finite(sample.image, sample.source_id);
  PreparedSample out;
  out.source_id = sample.source_id;
  out.scan_id = sample.scan_id;

  auto image = resize_bilinear(sample.image.to(torch::kFloat32), options.image_size);
  if (options.intensity == IntensityMode::HuWindow) {
    if (!(options.window_high > options.window_low)) throw ConfigError("preprocess: empty HU window");
    image = (image.clamp(options.window_low, options.window_high) - options.window_low) /
            (options.window_high - options.window_low);
  } else {
    const double lo = image.min().item<double>();
    const double hi = image.max().item<double>();
    if (hi > lo) {
      image = (image - lo) / (hi - lo);
    } else {
      image = torch::zeros_like(image);
      out.constant_image = true;
    }
  }
  out.input = image.unsqueeze(0).expand({options.input_channels, options.image_size, options.image_size}).contiguous();
  if (sample.infection_mask) out.infection = resize_nearest(*sample.infection_mask, options.image_size);
  if (sample.lung_mask) out.lung = resize_nearest(*sample.lung_mask, options.image_size);
  return out;
}

void rotate(PreparedSample& sample, double degrees) {
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  auto theta = torch::tensor({c, s, 0.0, -s, c, 0.0}, torch::kFloat32).view({1, 2, 3});
  const auto size = sample.input.sizes();
  auto grid = F::affine_grid(theta, {1, size[0], size[1], size[2]}, false);
  auto sample_with = [&](const torch::Tensor& t, torch::nn::functional::GridSampleFuncOptions::mode_t mode) {
    return F::grid_sample(t.unsqueeze(0), grid,
                          F::GridSampleFuncOptions().mode(mode).padding_mode(torch::kZeros).align_corners(false))
        .squeeze(0);
  };
  sample.input = sample_with(sample.input, torch::kBilinear);
  for (auto* mask : {&sample.infection, &sample.lung}) {
    if (!mask->defined()) continue;
    *mask = sample_with(mask->to(torch::kFloat32).unsqueeze(0), torch::kNearest).squeeze(0).round().to(torch::kInt64);
  }
}

void flip_horizontal(PreparedSample& sample) {
  sample.input = sample.input.flip({-1});
  for (auto* mask : {&sample.infection, &sample.lung}) {
    if (mask->defined()) *mask = mask->flip({-1});
  }
}

void flip_vertical(PreparedSample& sample) {
  sample.input = sample.input.flip({-2});
  for (auto* mask : {&sample.infection, &sample.lung}) {
    if (mask->defined()) *mask = mask->flip({-2});
  }
}

AugmentRecord augment(PreparedSample& sample, std::mt19937_64& rng, const AugmentPolicy& policy) {
  AugmentRecord record;
  // Draw every variate unconditionally so the stream length is fixed.
  const double u_rotate = uniform01(rng);
  const double u_angle = uniform01(rng);
  const double u_hflip = uniform01(rng);
  const double u_vflip = uniform01(rng);
  if (u_rotate < policy.rotate_probability) {
    record.rotated = true;
    record.angle_degrees = (2.0 * u_angle - 1.0) * policy.max_rotation_degrees;
    rotate(sample, record.angle_degrees);
  }
  if (u_hflip < policy.hflip_probability) {
    record.hflip = true;
    flip_horizontal(sample);
  }
  if (u_vflip < policy.vflip_probability) {
    record.vflip = true;
    flip_vertical(sample);
  }
  return record;
}

SplitIndices split(std::span<const SliceSample> samples, const SplitSpec& spec) {
  std::vector<std::string> scans;
  scans.reserve(samples.size());
  for (const auto& s : samples) scans.push_back(s.scan_id.empty() ? s.source_id : s.scan_id);
  return split_impl(scans, spec);
}

SplitIndices split(std::span<const PreparedSample> samples, const SplitSpec& spec) {
  std::vector<std::string> scans;
  scans.reserve(samples.size());
  for (const auto& s : samples) scans.push_back(s.scan_id.empty() ? s.source_id : s.scan_id);
  return split_impl(scans, spec);
}

SplitIndices split_by_subset(std::span<const SliceSample> samples) {
  SplitIndices out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& subset = samples[i].subset;
    if (subset == "train") {
      out.train.push_back(i);
    } else if (subset == "test") {
      out.test.push_back(i);
    } else {
      throw ValidationError(samples[i].source_id + ": manifest subset must be 'train' or 'test', got '" + subset + "'");
    }
  }
  return out;
}

Batch collate(std::span<const PreparedSample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ValidationError("collate: empty batch");
  std::vector<torch::Tensor> inputs, infection, lung;
  bool has_infection = true, has_lung = true;
  for (auto i : indices) {
    const auto& s = samples[i];
    inputs.push_back(s.input);
    has_infection = has_infection && s.infection.defined();
    has_lung = has_lung && s.lung.defined();
    if (has_infection) infection.push_back(s.infection);
    if (has_lung) lung.push_back(s.lung);
  }
  Batch batch;
  batch.input = torch::stack(inputs);
  if (has_infection) batch.infection = torch::stack(infection);
  if (has_lung) batch.lung = torch::stack(lung);
  batch.indices.assign(indices.begin(), indices.end());
  return batch;
}

uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b) {
  auto splitmix = [](uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return splitmix(splitmix(splitmix(base) ^ a) ^ b);
}

BatchStream::BatchStream(const std::vector<PreparedSample>& samples, std::size_t batch_size, uint64_t seed,
                         bool shuffle, std::optional<AugmentPolicy> augmentation)
    : samples_(&samples), batch_size_(batch_size), seed_(seed), shuffle_(shuffle), augmentation_(augmentation) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
}

std::size_t BatchStream::batches_per_epoch() const { return (samples_->size() + batch_size_ - 1) / batch_size_; }

std::vector<Batch> BatchStream::epoch(int64_t epoch) const {
  const auto& samples = *samples_;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle_) {
    std::mt19937_64 rng(mix_seed(seed_, static_cast<uint64_t>(epoch), 0x0dde5u));
    fisher_yates(order, rng);
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size_) {
    const auto end = std::min(order.size(), start + batch_size_);
    std::vector<PreparedSample> items;
    std::vector<std::size_t> local;
    for (std::size_t k = start; k < end; ++k) {
      PreparedSample s = samples[order[k]];
      if (augmentation_) {
        std::mt19937_64 rng(mix_seed(seed_ ^ order[k], static_cast<uint64_t>(epoch), 0xa06u));
        augment(s, rng, *augmentation_);
      }
      items.push_back(std::move(s));
      local.push_back(local.size());
    }
    auto batch = collate(items, local);
    batch.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace dtrattunet
