#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "affect/nn/layers.hpp"
#include "affect/nn/sequential.hpp"
#include "affect/training.hpp"
#include "helpers.hpp"

namespace testing {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kFiniteDifferenceStep = 1e-6;

/// ||a - b|| / max(||a||, ||b||, 1e-12).
inline double relative_l2(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

struct GradCheck {
  std::string what;
  double error = 0.0;
  bool ok() const { return error <= kGradTolerance; }
};

/// Checks a single layer against central differences of L = sum(y * r) for a
/// fixed random r. Stochastic layers see the same noise on every evaluation.
inline std::vector<GradCheck> check_layer(affect::nn::Layer<double>& layer, affect::TensorD x,
                                          affect::nn::Mode mode, std::uint64_t seed) {
  using namespace affect;
  Rng rng(seed);
  nn::LayerContext<double> probe;
  probe.mode = mode;
  Rng noise(seed + 1);
  probe.rng = &noise;
  const auto y0 = layer.forward(x, probe);
  const auto r = random_tensor(y0.shape(), rng);

  auto loss = [&] {
    nn::LayerContext<double> ctx;
    ctx.mode = mode;
    Rng n(seed + 1);
    ctx.rng = &n;
    const auto y = layer.forward(x, ctx);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };

  nn::LayerContext<double> ctx;
  ctx.mode = mode;
  Rng n(seed + 1);
  ctx.rng = &n;
  layer.forward(x, ctx);
  std::vector<TensorD> grads;
  for (const auto& p : layer.params()) grads.push_back(TensorD::zeros(p.value.shape()));
  const auto gx = layer.backward(r, ctx, grads, true);

  std::vector<GradCheck> out;
  out.push_back({layer.kind() + " d/input", relative_l2(gx.data(), numeric_gradient(x, loss, kFiniteDifferenceStep))});
  for (std::size_t j = 0; j < layer.params().size(); ++j) {
    auto& p = layer.params()[j];
    if (!p.trainable) continue;
    out.push_back({layer.kind() + " d/" + p.name,
                   relative_l2(grads[j].data(), numeric_gradient(p.value, loss, kFiniteDifferenceStep))});
  }
  return out;
}

/// Loss composed with a training-mode network. Cross-entropy gradients enter
/// below the trailing softmax, as in the training loop.
struct MicroNet {
  affect::nn::Sequential<double> net;
  affect::TensorD input;
  std::vector<int> labels;
  affect::TensorD targets;
  bool classification = true;
  std::uint64_t noise_seed = 99;

  affect::training::LossResult<double> evaluate(affect::nn::Sequential<double>::Contexts& ctxs) const {
    affect::Rng noise(noise_seed);
    const auto out = net.forward(input, ctxs, affect::nn::Mode::Training, &noise);
    if (classification) return affect::training::weighted_cross_entropy<double>(out, labels, {});
    return affect::training::mse_loss(out, targets);
  }

  std::vector<GradCheck> check() {
    affect::nn::Sequential<double>::Contexts ctxs;
    const auto loss = evaluate(ctxs);
    auto grads = net.zero_gradients();
    const std::size_t end = classification ? net.size() - 1 : net.size();
    const auto gx = net.backward(loss.grad, ctxs, grads, end, true);
    auto f = [&] {
      affect::nn::Sequential<double>::Contexts c;
      return evaluate(c).loss;
    };
    const std::string tag = classification ? "cross-entropy" : "mse";
    std::vector<GradCheck> out;
    out.push_back({tag + " net d/input", relative_l2(gx.data(), numeric_gradient(input, f, kFiniteDifferenceStep))});
    for (std::size_t i = 0; i < net.size(); ++i) {
      auto& params = net.layer(i).params();
      for (std::size_t j = 0; j < params.size(); ++j) {
        if (!params[j].trainable) continue;
        out.push_back({tag + " net d/" + params[j].name,
                       relative_l2(grads[i][j].data(), numeric_gradient(params[j].value, f, kFiniteDifferenceStep))});
      }
    }
    return out;
  }
};

/// Small conv -> BN -> ReLU -> DConv -> pool -> dense stack mirroring the
/// real blocks, with both dropout flavours active.
inline MicroNet make_micro_net(bool classification, std::uint64_t seed) {
  using namespace affect;
  using namespace affect::nn;
  Rng rng(seed);
  MicroNet m;
  m.classification = classification;
  auto& n = m.net;
  n.add(std::make_unique<Conv2D<double>>("c.conv", 3, 2, 3, 1, rng));
  n.add(std::make_unique<BatchNorm<double>>("c.bn", 3));
  n.add(std::make_unique<ReLU<double>>());
  n.add(std::make_unique<DepthwiseConv2D<double>>("d.dw", 3, 3, 2, rng));
  n.add(std::make_unique<BatchNorm<double>>("d.dw_bn", 3));
  n.add(std::make_unique<ReLU<double>>());
  n.add(std::make_unique<Conv2D<double>>("d.pw", 1, 3, 4, 1, rng));
  n.add(std::make_unique<MaxPool2x2<double>>());
  n.add(std::make_unique<GaussianDropout<double>>(0.2));
  if (classification) {
    n.add(std::make_unique<Flatten<double>>());
    n.add(std::make_unique<Dense<double>>("f.dense", 16, 6, rng));
    n.add(std::make_unique<ReLU<double>>());
    n.add(std::make_unique<Dropout<double>>(0.3));
    n.add(std::make_unique<Dense<double>>("head.dense", 6, 4, rng, Init::GlorotUniform));
    n.add(std::make_unique<Softmax<double>>());
    m.labels = {0, 3, 1};
  } else {
    n.add(std::make_unique<GlobalAvgPool<double>>());
    n.add(std::make_unique<Dense<double>>("head.dense", 4, 2, rng, Init::GlorotUniform));
    m.targets = random_tensor({3, 2}, rng);
  }
  m.input = random_tensor({3, 8, 8, 2}, rng);
  return m;
}

/// Every layer kind on its own plus both composed losses.
inline std::vector<GradCheck> run_all_gradient_checks(std::uint64_t seed = 2024) {
  using namespace affect;
  using namespace affect::nn;
  Rng rng(seed);
  std::vector<GradCheck> all;
  auto add = [&](std::vector<GradCheck> v, const std::string& prefix) {
    for (auto& c : v) {
      c.what = prefix + c.what;
      all.push_back(std::move(c));
    }
  };

  for (std::size_t stride : {1, 2}) {
    Conv2D<double> conv("conv", 3, 3, 4, stride, rng);
    add(check_layer(conv, random_tensor({2, 7, 6, 3}, rng), Mode::Training, seed),
        "stride" + std::to_string(stride) + " ");
  }
  {
    Conv2D<double> conv("conv9", 9, 2, 2, 1, rng);
    add(check_layer(conv, random_tensor({1, 10, 10, 2}, rng), Mode::Training, seed), "k9 ");
  }
  for (std::size_t stride : {1, 2}) {
    DepthwiseConv2D<double> dw("dw", 3, 3, stride, rng);
    add(check_layer(dw, random_tensor({2, 7, 7, 3}, rng), Mode::Training, seed),
        "stride" + std::to_string(stride) + " ");
  }
  {
    BatchNorm<double> bn("bn", 3);
    for (auto& v : bn.params()[0].value.data()) v = rng.uniform(0.5, 1.5);
    for (auto& v : bn.params()[1].value.data()) v = rng.uniform(-0.5, 0.5);
    add(check_layer(bn, random_tensor({4, 3, 3, 3}, rng, -2, 3), Mode::Training, seed), "training ");
    for (auto& v : bn.params()[2].value.data()) v = rng.uniform(-0.5, 0.5);
    for (auto& v : bn.params()[3].value.data()) v = rng.uniform(0.5, 2.0);
    add(check_layer(bn, random_tensor({4, 3, 3, 3}, rng, -2, 3), Mode::Inference, seed), "inference ");
  }
  {
    Dense<double> d("dense", 7, 5, rng);
    add(check_layer(d, random_tensor({3, 7}, rng), Mode::Training, seed), "");
  }
  {
    ReLU<double> relu;
    add(check_layer(relu, random_tensor({2, 4, 4, 3}, rng), Mode::Training, seed), "");
  }
  {
    MaxPool2x2<double> pool;
    add(check_layer(pool, random_tensor({2, 6, 4, 3}, rng), Mode::Training, seed), "");
  }
  {
    GlobalAvgPool<double> gap;
    add(check_layer(gap, random_tensor({2, 3, 5, 4}, rng), Mode::Training, seed), "");
  }
  {
    Flatten<double> flat;
    add(check_layer(flat, random_tensor({2, 3, 2, 4}, rng), Mode::Training, seed), "");
  }
  {
    Softmax<double> sm;
    add(check_layer(sm, random_tensor({3, 6}, rng, -3, 3), Mode::Training, seed), "");
  }
  {
    Dropout<double> drop(0.4);
    add(check_layer(drop, random_tensor({4, 10}, rng), Mode::Training, seed), "");
    GaussianDropout<double> gauss(0.3);
    add(check_layer(gauss, random_tensor({4, 10}, rng), Mode::Training, seed), "");
  }
  add(make_micro_net(true, seed).check(), "");
  add(make_micro_net(false, seed).check(), "");
  return all;
}

}  // namespace testing
