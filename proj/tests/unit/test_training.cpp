#include <cmath>
#include <cstring>
#include <sstream>

#include "affect/model_io.hpp"
#include "affect/nn/layers.hpp"
#include "affect/training.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"

using namespace affect;
using namespace affect::training;

namespace {

Tensor smooth_image(std::size_t size = 128) {
  auto t = Tensor::zeros({size, size, 3});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = double(x) / double(size), v = double(y) / double(size);
      t[(y * size + x) * 3 + 0] = float(0.5 + 0.4 * std::sin(3.0 * u));
      t[(y * size + x) * 3 + 1] = float(0.5 + 0.4 * std::cos(2.0 * v));
      t[(y * size + x) * 3 + 2] = float(0.25 + 0.5 * u * v);
    }
  return t;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - double(b[i]));
  return s / double(a.size());
}

TrainConfig quick_config(std::uint64_t seed) {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = 2;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("cross-entropy values") {
  const std::vector<int> label{2};
  auto perfect = TensorD::zeros({1, 8});
  perfect[2] = 1.0;
  const std::vector<double> w{3, 3, 3, 3, 3, 3, 3, 3};
  CHECK(weighted_cross_entropy<double>(perfect, label, w).loss == 0.0);

  const auto uniform = TensorD::fill({1, 8}, 0.125);
  CHECK(weighted_cross_entropy<double>(uniform, label, {}).loss == doctest::Approx(std::log(8.0)));
  CHECK(std::log(8.0) == doctest::Approx(2.079).epsilon(1e-3));

  auto zero = TensorD::fill({1, 8}, 1.0 / 7.0);
  zero[2] = 0.0;
  const auto r = weighted_cross_entropy<double>(zero, label, {});
  CHECK(r.clamped);
  CHECK(r.loss == doctest::Approx(-std::log(1e-12)));
  CHECK_FALSE(weighted_cross_entropy<double>(uniform, label, {}).clamped);

  CHECK_THROWS(weighted_cross_entropy<double>(uniform, std::vector<int>{8}, {}));
  CHECK_THROWS(weighted_cross_entropy<double>(uniform, std::vector<int>{0, 1}, {}));
}

TEST_CASE("all-ones weights equal the unweighted loss exactly") {
  Rng rng(5);
  const auto p = nn::softmax(testing::random_tensor({6, 8}, rng, -3, 3));
  const std::vector<int> labels{0, 1, 2, 3, 4, 7};
  const std::vector<double> ones(8, 1.0);
  const auto a = weighted_cross_entropy<double>(p, labels, ones);
  const auto b = weighted_cross_entropy<double>(p, labels, {});
  CHECK(a.loss == b.loss);
  CHECK(a.grad == b.grad);
}

TEST_CASE("class weights") {
  const std::vector<std::size_t> equal(8, 37);
  for (double w : class_weights(equal)) CHECK(w == 1.0);

  const std::vector<std::size_t> skew{100, 100, 100, 100, 100, 100, 100, 700};
  const auto w = class_weights(skew);
  CHECK(w[7] == doctest::Approx(0.25));
  for (std::size_t c = 0; c < 7; ++c) CHECK(w[c] == doctest::Approx(1.75));

  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> counts(8);
    std::size_t n = 0;
    for (auto& c : counts) n += c = 1 + rng.below(1000);
    const auto ws = class_weights(counts);
    double s = 0;
    for (std::size_t c = 0; c < 8; ++c) s += double(counts[c]) * ws[c];
    CHECK(s == doctest::Approx(double(n)));
  }
  std::vector<std::size_t> empty_class{5, 5, 0, 5, 5, 5, 5, 5};
  CHECK_THROWS_AS(class_weights(empty_class), std::invalid_argument);
}

TEST_CASE("mse values and gradient") {
  const auto pred = TensorD::from_data({1, 2}, {0, 0});
  const auto target = TensorD::from_data({1, 2}, {1, -1});
  CHECK(mse_loss(pred, target).loss == 1.0);
  CHECK(mse_loss(target, target).loss == 0.0);

  Rng rng(7);
  auto p = testing::random_tensor({4, 2}, rng);
  const auto t = testing::random_tensor({4, 2}, rng);
  const auto r = mse_loss(p, t);
  const auto num = testing::numeric_gradient(p, [&] { return mse_loss(p, t).loss; });
  CHECK(testing::max_abs_diff(r.grad.data(), num) < 1e-6);
  CHECK_THROWS_AS(mse_loss(p, TensorD::zeros({4, 3})), ShapeError);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Adam<double> adam;
    auto p = TensorD::from_data({3}, {1, -2, 3});
    const auto g = TensorD::zeros({3});
    TensorD* ps[] = {&p};
    const TensorD* gs[] = {&g};
    for (int i = 0; i < 5; ++i) adam.step(ps, gs);
    CHECK(p == TensorD::from_data({3}, {1, -2, 3}));
  }
  SUBCASE("first step moves by alpha against the gradient sign") {
    Adam<double> adam;
    auto p = TensorD::from_data({4}, {0.5, 0.5, 0.5, 0.5});
    const auto g = TensorD::from_data({4}, {3.0, -0.01, 250.0, -7.5});
    TensorD* ps[] = {&p};
    const TensorD* gs[] = {&g};
    adam.step(ps, gs);
    for (std::size_t i = 0; i < 4; ++i) {
      const double expected = 0.5 - 1e-3 * (g[i] > 0 ? 1.0 : -1.0);
      CHECK(p[i] == doctest::Approx(expected).epsilon(1e-6));
    }
    CHECK(adam.timestep() == 1);
  }
  SUBCASE("quadratic bowl converges") {
    AdamConfig c;
    c.alpha = 0.1;
    Adam<double> adam(c);
    auto x = TensorD::from_data({1}, {1.0});
    auto g = TensorD::zeros({1});
    TensorD* ps[] = {&x};
    const TensorD* gs[] = {&g};
    for (int i = 0; i < 500; ++i) {
      g[0] = 2.0 * x[0];
      adam.step(ps, gs);
    }
    CHECK(std::abs(x[0]) < 1e-3);
  }
  SUBCASE("shape mismatch throws") {
    Adam<double> adam;
    auto p = TensorD::zeros({3});
    const auto g = TensorD::zeros({2});
    TensorD* ps[] = {&p};
    const TensorD* gs[] = {&g};
    CHECK_THROWS_AS(adam.step(ps, gs), ShapeError);
  }
  CHECK_THROWS(Adam<double>(AdamConfig{1e-3, 1.0, 0.999, 1e-8}));
}

TEST_CASE("augmentation") {
  const auto img = smooth_image();
  CHECK(apply_augmentation(img, {}) == img);

  AugmentParams flip;
  flip.flip = true;
  const auto once = apply_augmentation(img, flip);
  CHECK(once != img);
  CHECK(apply_augmentation(once, flip) == img);
  CHECK(once.at({5, 0, 1}) == img.at({5, 127, 1}));

  AugmentParams rot;
  rot.rotation_deg = 20.0;
  const auto there = apply_augmentation(img, rot);
  rot.rotation_deg = -20.0;
  const auto back = apply_augmentation(there, rot);
  CHECK(mean_abs_diff(back, img) < 0.05);

  AugmentParams shift;
  shift.translate_x = 5.0;
  const auto moved = apply_augmentation(img, shift);
  CHECK(moved.at({40, 50, 0}) == doctest::Approx(img.at({40, 45, 0})).epsilon(1e-6));

  Rng rng(9);
  AugmentConfig cfg;
  int flips = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto p = sample_augmentation(rng, cfg);
    CHECK(std::abs(p.rotation_deg) <= 20.0);
    CHECK(std::abs(p.translate_x) <= 12.8);
    CHECK(std::abs(p.translate_y) <= 12.8);
    flips += p.flip;
  }
  CHECK(std::abs(flips - 1000) < 120);

  for (int i = 0; i < 5; ++i) {
    const auto out = augment(img, rng, cfg);
    for (float v : out.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("training is bitwise reproducible under a fixed seed") {
  const auto set = testing::synthetic_set(1, 3);
  auto a = arch::build(arch::ArchId::MobileNet, arch::Head::Emotion, 1);
  auto b = arch::build(arch::ArchId::MobileNet, arch::Head::Emotion, 1);
  const auto la = train(a, set, set, quick_config(4));
  const auto lb = train(b, set, set, quick_config(4));
  CHECK(la == lb);
  CHECK(la.epochs.size() == 2);
  CHECK(io::serialize(a) == io::serialize(b));
  CHECK(io::serialize(a) != io::serialize(arch::build(arch::ArchId::MobileNet, arch::Head::Emotion, 1)));

  auto c = arch::build(arch::ArchId::MobileNet, arch::Head::Emotion, 1);
  CHECK_FALSE(train(c, set, set, quick_config(5)) == la);
}

TEST_CASE("zero learning rate leaves trainable parameters unchanged") {
  const auto set = testing::synthetic_set(1, 4);
  auto m = arch::build(arch::ArchId::MobileNet, arch::Head::ValenceArousal, 2);
  const auto before = m;
  auto cfg = quick_config(1);
  cfg.epochs = 1;
  cfg.loss = LossKind::MeanSquaredError;
  cfg.adam.alpha = 0.0;
  train(m, set, {}, cfg);
  const auto p0 = before.parameters();
  const auto p1 = m.parameters();
  std::size_t stats_changed = 0;
  for (std::size_t i = 0; i < p0.size(); ++i) {
    if (p0[i]->trainable) {
      CHECK(p0[i]->value == p1[i]->value);
    } else {
      stats_changed += p0[i]->value != p1[i]->value;
    }
  }
  CHECK(stats_changed > 0);  // BN running statistics still track batches
}

TEST_CASE("log contents and observer") {
  const auto set = testing::synthetic_set(1, 5);
  auto m = arch::build(arch::ArchId::MobileNet, arch::Head::Emotion, 3);
  auto cfg = quick_config(2);
  cfg.epochs = 5;
  std::size_t seen = 0;
  const auto log = train(m, set, set, cfg, [&](const EpochRecord& r, const arch::AffectModel&) {
    seen = r.epoch;
    return r.epoch < 2;
  });
  CHECK(seen == 2);
  REQUIRE(log.epochs.size() == 2);
  const auto& e = log.epochs[0];
  CHECK(e.epoch == 1);
  CHECK(std::isfinite(e.train_loss));
  CHECK(std::isfinite(e.val_loss));
  std::vector<std::string> keys;
  for (const auto& [k, v] : e.metrics) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"train_acc", "acc"});

  std::istringstream lines(log.to_jsonl());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("epoch").get<int>() == ++count);
    CHECK(j.contains("train_loss"));
    CHECK(j.contains("val_loss"));
    CHECK(j.at("metrics").contains("acc"));
  }
  CHECK(count == 2);

  auto va = arch::build(arch::ArchId::MobileNet, arch::Head::ValenceArousal, 3);
  auto rcfg = quick_config(2);
  rcfg.epochs = 1;
  rcfg.loss = LossKind::MeanSquaredError;
  const auto rlog = train(va, set, {}, rcfg);
  CHECK(std::isnan(rlog.epochs[0].val_loss));
  CHECK(nlohmann::json::parse(rlog.to_jsonl()).at("val_loss").is_null());
  const auto rlog2 = train(va, set, set, rcfg);
  CHECK(rlog2.epochs[0].metrics.size() == 2);
  CHECK(rlog2.epochs[0].metrics[0].first == "rmse_valence");
}

TEST_CASE("train rejects bad inputs") {
  const auto set = testing::synthetic_set(1, 6);
  auto em = arch::build(arch::ArchId::MobileNet, arch::Head::Emotion);
  auto va = arch::build(arch::ArchId::MobileNet, arch::Head::ValenceArousal);
  auto cfg = quick_config(0);
  cfg.epochs = 1;
  CHECK_THROWS_AS(train(em, {}, {}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(train(va, set, {}, cfg), std::invalid_argument);  // head vs cross-entropy
  cfg.loss = LossKind::MeanSquaredError;
  CHECK_THROWS_AS(train(em, set, {}, cfg), std::invalid_argument);
  cfg.loss = LossKind::WeightedCrossEntropy;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train(em, set, {}, cfg), std::invalid_argument);
  cfg.batch_size = 4;
  cfg.class_weights = std::vector<double>(8, 0.0);
  CHECK_THROWS_AS(train(em, set, {}, cfg), std::invalid_argument);
}

TEST_CASE("defaults") {
  CHECK(default_loss(arch::Head::Emotion) == LossKind::WeightedCrossEntropy);
  CHECK(default_loss(arch::Head::ValenceArousal) == LossKind::MeanSquaredError);
  CHECK(reference_batch_size(arch::ArchId::AlexNet) == 400);
  CHECK(reference_batch_size(arch::ArchId::VggNet) == 400);
  CHECK(reference_batch_size(arch::ArchId::MobileNet) == 250);
  const AdamConfig a;
  CHECK(a.alpha == 0.001);
  CHECK(a.beta1 == 0.9);
  CHECK(a.beta2 == 0.999);
  CHECK(a.epsilon == 1e-8);
}
