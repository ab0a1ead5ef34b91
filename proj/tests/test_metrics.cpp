#include "unit.hpp"

#include <cmath>
#include <random>

#include "dtrattunet/errors.hpp"
#include "dtrattunet/metrics.hpp"
#include "support.hpp"

using namespace dtrattunet;
using namespace testing_support;

TEST_CASE("discretize boundary and tie rules") {
  CHECK(discretize(torch::zeros({1, 1, 2, 2}), Task::Binary).sum().item<int64_t>() == 0);
  CHECK(discretize(torch::full({1, 1, 2, 2}, 1e-6), Task::Binary).sum().item<int64_t>() == 4);
  CHECK(discretize(torch::full({1, 1, 3, 3}, -2.0), Task::Binary).sum().item<int64_t>() == 0);

  auto logits = torch::tensor({0.2, 0.9, 0.9}).view({1, 3, 1, 1});
  CHECK(discretize(logits, Task::Multiclass).item<int64_t>() == 1);
  logits = torch::tensor({0.5, 0.5, 0.5}).view({1, 3, 1, 1});
  CHECK(discretize(logits, Task::Multiclass).item<int64_t>() == 0);
  logits = torch::tensor({0.1, 0.2, 0.7}).view({1, 3, 1, 1});
  CHECK(discretize(logits, Task::Multiclass).item<int64_t>() == 2);
  CHECK_THROWS_AS(discretize(torch::zeros({1, 2, 2, 2}), Task::Multiclass), ValidationError);
}

TEST_CASE("confusion hand cases") {
  auto gt = torch::randint(0, 2, {10, 10}, torch::kInt64);
  auto c = confusion(gt, gt, 1);
  CHECK(c.fp == 0);
  CHECK(c.fn == 0);
  c = confusion(torch::ones({10, 10}, torch::kInt64), torch::zeros({10, 10}, torch::kInt64), 1);
  CHECK(c.fp == 100);
  CHECK(c.tp == 0);
  CHECK(c.total() == 100);
  CHECK_THROWS_AS(confusion(torch::zeros({2, 2}), torch::zeros({2, 3}), 1), ValidationError);
}

TEST_CASE("metrics agree with brute-force pixel loops on random instances") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    torch::manual_seed(trial);
    const int images = 1 + trial % 20;
    const int64_t classes = trial % 2 ? 3 : 2;
    std::vector<Confusion> lib;
    std::vector<Counts> ref;
    const int64_t class_id = 1 + trial % (classes - 1);
    for (int i = 0; i < images; ++i) {
      const auto pred = torch::randint(0, classes, {8, 8}, torch::kInt64);
      const auto gt = torch::randint(0, classes, {8, 8}, torch::kInt64);
      const auto naive = naive_counts(flat_labels(pred), flat_labels(gt), class_id);
      const auto k = confusion(pred, gt, class_id);
      CHECK(k.tp == naive.tp);
      CHECK(k.fp == naive.fp);
      CHECK(k.fn == naive.fn);
      CHECK(k.tn == naive.tn);
      lib.push_back(k);
      ref.push_back(naive);
    }
    CHECK(std::abs(f1_micro(lib) - naive_f1_micro(ref)) <= 1e-9);
    CHECK(std::abs(iou_micro(lib) - naive_iou_micro(ref)) <= 1e-9);
    CHECK(std::abs(dice_macro(lib) - naive_dice_macro(ref)) <= 1e-9);
  }
}

TEST_CASE("micro and macro differ in general") {
  std::vector<Confusion> per_image;
  for (int i = 0; i < 20; ++i) {
    torch::manual_seed(500 + i);
    const auto p = (torch::rand({8, 8}) < 0.1 * (1 + i % 5)).to(torch::kInt64);
    const auto g = (torch::rand({8, 8}) < 0.3).to(torch::kInt64);
    per_image.push_back(confusion(p, g, 1));
  }
  CHECK(std::abs(f1_micro(per_image) - dice_macro(per_image)) > 1e-6);
}

TEST_CASE("metric formulas on hand cases") {
  Confusion perfect;
  perfect.tp = 10;
  Confusion half;
  half.tp = half.fp = half.fn = 1;
  const std::vector<Confusion> two{perfect, half};
  CHECK(dice_macro(two) == 75.0);
  CHECK(f1_micro(half) == 50.0);
  CHECK(std::abs(iou_micro(half) - 100.0 / 3.0) <= 1e-12);

  Confusion empty;
  empty.tn = 64;
  CHECK(dice_of(empty) == 100.0);
  Confusion spurious;
  spurious.fp = 3;
  CHECK(dice_of(spurious) == 0.0);

  const std::vector<Confusion> one{half};
  CHECK(dice_macro(one) == f1_micro(one));
}

TEST_CASE("F1 and IoU identity, symmetry and monotonicity") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int64_t> d(0, 50);
  for (int i = 0; i < 1000; ++i) {
    Confusion c;
    c.tp = d(rng);
    c.fp = d(rng);
    c.fn = d(rng);
    c.tn = d(rng);
    if (c.tp + c.fp + c.fn == 0) continue;
    const double f1 = f1_micro(c), iou = iou_micro(c);
    CHECK(std::abs(f1 - 2.0 * iou / (100.0 + iou) * 100.0) <= 1e-9);
    CHECK(iou <= f1 + 1e-12);
    CHECK(f1 >= 0.0);
    CHECK(f1 <= 100.0);

    Confusion swapped = c;
    std::swap(swapped.fp, swapped.fn);
    CHECK(f1_micro(swapped) == f1);
    CHECK(iou_micro(swapped) == iou);

    if (c.fn > 0) {
      Confusion better = c;
      ++better.tp;
      --better.fn;
      CHECK(f1_micro(better) >= f1);
      CHECK(iou_micro(better) >= iou);
      CHECK(dice_of(better) >= dice_of(c));
    }
  }
}

TEST_CASE("flipping every pair leaves metrics unchanged") {
  std::vector<Confusion> plain, flipped;
  for (int i = 0; i < 5; ++i) {
    torch::manual_seed(900 + i);
    const auto p = torch::randint(0, 3, {8, 8}, torch::kInt64);
    const auto g = torch::randint(0, 3, {8, 8}, torch::kInt64);
    plain.push_back(confusion(p, g, 2));
    flipped.push_back(confusion(p.flip({1}), g.flip({1}), 2));
  }
  CHECK(f1_micro(plain) == f1_micro(flipped));
  CHECK(dice_macro(plain) == dice_macro(flipped));
  CHECK(iou_micro(plain) == iou_micro(flipped));
}

TEST_CASE("population standard deviation across runs") {
  const std::vector<double> runs{74.1, 74.5, 74.8, 74.3, 74.5};
  double mean = 0.0;
  for (double v : runs) mean += v / 5.0;
  double ss = 0.0;
  for (double v : runs) ss += (v - mean) * (v - mean);
  const auto s = summarize(runs);
  CHECK(std::abs(s.mean - 74.44) <= 1e-9);
  CHECK(std::abs(s.std - std::sqrt(ss / 5.0)) <= 1e-12);
  CHECK(std::abs(s.std - 0.23324) <= 1e-5);
}

TEST_CASE("report classes and aggregation layout") {
  CHECK(reported_classes(Task::Binary).size() == 1);
  const auto multi = reported_classes(Task::Multiclass);
  REQUIRE(multi.size() == 2);
  CHECK(multi[0].second == "GGO");
  CHECK(multi[1].second == "Consolidation");

  std::vector<MetricsReport> runs;
  for (int r = 0; r < 3; ++r) {
    MetricsReport m;
    m.task = Task::Multiclass;
    m.source_ids = {"a", "b"};
    for (const auto& [id, name] : multi) {
      Confusion c;
      c.tp = 10 + r;
      c.fp = id;
      m.classes.push_back(class_metrics(name, id, {c, c}));
    }
    runs.push_back(m);
  }
  const auto agg = aggregate(runs);
  CHECK(agg.runs == 3);
  CHECK(agg.classes.size() == 2);
  CHECK(agg.classes[0].f1.size() == 3);
  const auto csv = report_csv(agg);
  CHECK(csv.rfind("task,class,metric,n_images,runs,mean,std\n", 0) == 0);
  CHECK(csv.find("multiclass,GGO,f1,2,3,") != std::string::npos);
  CHECK(csv.find("multiclass,Consolidation,iou,2,3,") != std::string::npos);
  const auto per_image = per_image_csv(runs[0]);
  CHECK(per_image.find("multiclass,GGO,b,10,1,0,0,") != std::string::npos);
}

TEST_CASE("evaluate on a desk model") {
  torch::manual_seed(1);
  auto model = build_variant(ModelConfig::desk());
  auto data = synthetic_set(3, 64, 3, Task::Binary, 2);
  {
    torch::NoGradGuard ng;
    model->infection_head->weight.zero_();
    model->infection_head->bias.fill_(-10.0);
  }
  const auto report = evaluate(*model, data, Task::Binary, 2);
  REQUIRE(report.classes.size() == 1);
  CHECK(report.n_images() == 3);
  CHECK(report.classes[0].f1 == 0.0);
  CHECK(report.classes[0].dice == 0.0);
  CHECK(report.classes[0].iou == 0.0);
  CHECK(report.lung.has_value());
  for (const auto& c : report.classes[0].per_image) CHECK(c.total() == 64 * 64);

  CHECK_THROWS_AS(evaluate(*model, data, Task::Multiclass), ValidationError);
  data[1].infection = torch::Tensor();
  try {
    evaluate(*model, data, Task::Binary);
    FAIL("missing mask accepted");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(data[1].source_id) != std::string::npos);
  }
}

TEST_CASE("perfect predictions score 100") {
  std::vector<Confusion> per_image;
  for (int i = 0; i < 4; ++i) {
    const auto g = torch::randint(0, 3, {8, 8}, torch::kInt64);
    per_image.push_back(confusion(g, g, 2));
  }
  const auto m = class_metrics("Consolidation", 2, per_image);
  CHECK(m.f1 == 100.0);
  CHECK(m.dice == 100.0);
  CHECK(m.iou == 100.0);
}

TEST_CASE("overlay colours") {
  const auto image = torch::full({2, 2}, 0.5);
  const auto labels = torch::tensor({0, 1, 2, 0}, torch::kInt64).view({2, 2});
  const auto rgb = overlay(image, labels).to(torch::kInt64);
  CHECK(rgb.sizes() == torch::IntArrayRef{2, 2, 3});
  // Untouched background stays gray; label 1 leans green, label 2 leans red.
  CHECK(rgb[0][0][0].item<int64_t>() == rgb[0][0][1].item<int64_t>());
  CHECK(rgb[0][1][1].item<int64_t>() > rgb[0][1][0].item<int64_t>());
  CHECK(rgb[0][1][1].item<int64_t>() > rgb[0][1][2].item<int64_t>());
  CHECK(rgb[1][0][0].item<int64_t>() > rgb[1][0][1].item<int64_t>());
  CHECK(rgb[1][0][0].item<int64_t>() > rgb[1][0][2].item<int64_t>());
}
