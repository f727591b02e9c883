#include <cmath>

#include "affect/nn/layers.hpp"
#include "affect/nn/sequential.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace affect;
using namespace affect::nn;
using testing::random_tensor;

namespace {

// Independent direct convolution with the top/left-heavy same padding.
TensorD naive_conv(const TensorD& x, const TensorD& k, std::size_t s) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const std::size_t ks = k.dim(0), cout = k.dim(3);
  const std::size_t oh = (h + s - 1) / s, ow = (w + s - 1) / s;
  const long th = std::max<long>(0, long((oh - 1) * s + ks) - long(h));
  const long tw = std::max<long>(0, long((ow - 1) * s + ks) - long(w));
  const long top = th - th / 2, left = tw - tw / 2;
  auto y = TensorD::zeros({n, oh, ow, cout});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t co = 0; co < cout; ++co) {
          double acc = 0;
          for (std::size_t ky = 0; ky < ks; ++ky)
            for (std::size_t kx = 0; kx < ks; ++kx)
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const long iy = long(oy * s + ky) - top, ix = long(ox * s + kx) - left;
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
                acc += x.at({b, std::size_t(iy), std::size_t(ix), ci}) * k.at({ky, kx, ci, co});
              }
          y.at({b, oy, ox, co}) = acc;
        }
  return y;
}

TensorD naive_depthwise(const TensorD& x, const TensorD& k, std::size_t s) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3), ks = k.dim(0);
  const std::size_t oh = (h + s - 1) / s, ow = (w + s - 1) / s;
  const long th = std::max<long>(0, long((oh - 1) * s + ks) - long(h));
  const long tw = std::max<long>(0, long((ow - 1) * s + ks) - long(w));
  const long top = th - th / 2, left = tw - tw / 2;
  auto y = TensorD::zeros({n, oh, ow, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0;
          for (std::size_t ky = 0; ky < ks; ++ky)
            for (std::size_t kx = 0; kx < ks; ++kx) {
              const long iy = long(oy * s + ky) - top, ix = long(ox * s + kx) - left;
              if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
              acc += x.at({b, std::size_t(iy), std::size_t(ix), ch}) * k.at({ky, kx, ch});
            }
          y.at({b, oy, ox, ch}) = acc;
        }
  return y;
}

void check_close(const TensorD& a, const TensorD& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  CHECK(testing::max_abs_diff(a.data(), b.data()) < tol);
}

}  // namespace

TEST_CASE("same padding puts the odd pixel before") {
  auto p = same_padding(128, 3, 2);
  CHECK(p.out == 64);
  CHECK(p.before == 1);  // total 1
  p = same_padding(128, 9, 1);
  CHECK(p.out == 128);
  CHECK(p.before == 4);
  p = same_padding(7, 2, 2);
  CHECK(p.out == 4);
  CHECK(p.before == 1);
  p = same_padding(8, 1, 1);
  CHECK(p.before == 0);
  CHECK_THROWS(same_padding(8, 3, 0));
}

TEST_CASE("conv2d matches a direct six-loop convolution") {
  Rng rng(1);
  for (auto [h, w, cin, cout, k, s] : {std::tuple{5, 5, 1, 1, 3, 1}, {7, 6, 3, 4, 3, 2}, {8, 8, 2, 5, 1, 1},
                                       {9, 9, 2, 3, 5, 1}, {6, 7, 4, 2, 2, 2}, {11, 10, 3, 2, 9, 1},
                                       {4, 4, 3, 2, 7, 1}, {5, 8, 2, 3, 3, 3}}) {
    CAPTURE(h);
    CAPTURE(k);
    CAPTURE(s);
    const auto x = random_tensor({2, std::size_t(h), std::size_t(w), std::size_t(cin)}, rng);
    const auto kern = random_tensor({std::size_t(k), std::size_t(k), std::size_t(cin), std::size_t(cout)}, rng);
    check_close(conv2d(x, kern, s), naive_conv(x, kern, s), 1e-12);
  }
}

TEST_CASE("depthwise and separable convolution match direct loops") {
  Rng rng(2);
  for (auto [h, c, s] : {std::tuple{6, 3, 1}, {7, 4, 2}, {8, 2, 2}, {5, 5, 1}}) {
    const auto x = random_tensor({2, std::size_t(h), std::size_t(h), std::size_t(c)}, rng);
    const auto k = random_tensor({3, 3, std::size_t(c)}, rng);
    const auto dw = naive_depthwise(x, k, s);
    check_close(depthwise_conv2d(x, k, s), dw, 1e-12);

    const auto pw = random_tensor({1, 1, std::size_t(c), 6}, rng);
    check_close(depthwise_separable_conv(x, k, pw, s), naive_conv(dw, pw, 1), 1e-12);
  }
}

TEST_CASE("conv2d rejects mismatched channels") {
  CHECK_THROWS_AS(conv2d(TensorD::zeros({1, 4, 4, 3}), TensorD::zeros({3, 3, 2, 4}), 1), ShapeError);
  CHECK_THROWS_AS(conv2d(TensorD::zeros({4, 4, 3}), TensorD::zeros({3, 3, 3, 4}), 1), ShapeError);
}

TEST_CASE("maxpool takes the first maximum in row-major order") {
  auto x = TensorD::from_data({1, 2, 4, 1}, {1, 5, 2, 2, 5, 3, 2, 1});
  std::vector<std::uint32_t> idx;
  const auto y = maxpool2x2(x, &idx);
  CHECK(y.shape() == Shape{1, 1, 2, 1});
  CHECK(y[0] == 5.0);
  CHECK(y[1] == 2.0);
  // (0,1) wins over the tied (1,0); (0,2) wins over (0,3) and (1,2).
  CHECK(idx[0] == x.offset({0, 0, 1, 0}));
  CHECK(idx[1] == x.offset({0, 0, 2, 0}));
  const auto g = maxpool2x2_backward<double>(x.shape(), TensorD::from_data({1, 1, 2, 1}, {1, 1}), idx);
  CHECK(g.values() == std::vector<double>{0, 1, 1, 0, 0, 0, 0, 0});
}

TEST_CASE("maxpool halves even sizes and rejects odd ones") {
  MaxPool2x2<float> pool;
  CHECK(pool.output_shape({128, 128, 16}) == Shape{64, 64, 16});
  CHECK_THROWS_AS(pool.output_shape({5, 7, 3}), ShapeError);
  CHECK_THROWS_AS(pool.output_shape({4, 3, 3}), ShapeError);
  CHECK(maxpool2x2(TensorD::from_data({1, 2, 2, 1}, {1, 2, 3, 4})).values() == std::vector<double>{4});
}

TEST_CASE("degenerate kernels and parameters reduce to identities") {
  const auto one = TensorD::from_data({1, 1, 1, 1}, {1.0});
  CHECK(conv2d(TensorD::from_data({1, 1, 1, 1}, {3.5}), one, 1).values() == std::vector<double>{3.5});

  Rng rng(8);
  const auto x = random_tensor({1, 6, 6, 3}, rng);
  CHECK(depthwise_conv2d(x, TensorD::zeros({3, 3, 3}), 1) == TensorD::zeros({1, 6, 6, 3}));

  // Single input channel: depthwise 3x3 + pointwise equals a 3x3 conv followed by a 1x1 conv.
  const auto x1 = random_tensor({2, 6, 6, 1}, rng);
  const auto dw = random_tensor({3, 3, 1}, rng);
  const auto pw = random_tensor({1, 1, 1, 4}, rng);
  const auto as_conv = conv2d(conv2d(x1, dw.reshaped({3, 3, 1, 1}), 2), pw, 1);
  check_close(depthwise_separable_conv(x1, dw, pw, 2), as_conv, 1e-12);

  auto eye = TensorD::zeros({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
  const auto v = random_tensor({4, 3}, rng);
  CHECK(dense(v, eye, TensorD::zeros({3})) == v);

  const auto gap = global_average_pool(TensorD::fill({1, 4, 4, 2}, 0.7));
  for (double g : gap.values()) CHECK(g == doctest::Approx(0.7));
  CHECK(softmax(TensorD::from_data({1, 2}, {0, 0})).values() == std::vector<double>{0.5, 0.5});
  CHECK(relu(TensorD::from_data({2}, {-1, 2})).values() == std::vector<double>{0, 2});
}

TEST_CASE("global average pool equals a reduce-mean oracle") {
  Rng rng(12);
  const auto x = random_tensor({2, 4, 4, 5}, rng);
  const auto g = global_average_pool(x);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 0; c < 5; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 16; ++i) s += x[(b * 16 + i) * 5 + c];
      CHECK(g[b * 5 + c] == doctest::Approx(s / 16).epsilon(1e-12));
    }
  }
}

TEST_CASE("batchnorm identity, constant channels and batch statistics") {
  BatchNorm<double> bn("bn", 3);
  Rng rng(13);
  const auto x = random_tensor({6, 2, 2, 3}, rng, -4, 9);
  LayerContext<double> inf;
  const auto y = bn.forward(x, inf);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i] / std::sqrt(1.0 + 1e-3)));

  LayerContext<double> tr;
  tr.mode = Mode::Training;
  const auto c = bn.forward(TensorD::fill({4, 3}, 2.5), tr);
  for (double v : c.data()) CHECK(v == 0.0);

  const auto z = bn.forward(x, tr);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double m = 0, m2 = 0;
    const std::size_t n = x.size() / 3;
    for (std::size_t i = 0; i < n; ++i) m += z[i * 3 + ch];
    m /= double(n);
    for (std::size_t i = 0; i < n; ++i) m2 += (z[i * 3 + ch] - m) * (z[i * 3 + ch] - m);
    CHECK(std::abs(m) < 1e-3);
    CHECK(m2 / double(n) == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("global average pool, dense, relu and softmax") {
  const auto x = TensorD::from_data({1, 2, 2, 2}, {1, 10, 2, 20, 3, 30, 4, 40});
  CHECK(global_average_pool(x).values() == std::vector<double>{2.5, 25});

  const auto in = TensorD::from_data({2, 3}, {1, 2, 3, -1, 0, 1});
  const auto W = TensorD::from_data({3, 2}, {1, 0, 0, 1, 1, 1});
  const auto b = TensorD::from_data({2}, {0.5, -0.5});
  CHECK(dense(in, W, b).values() == std::vector<double>{4.5, 4.5, 0.5, 0.5});

  CHECK(relu(TensorD::from_data({4}, {-1, 0, 0.5, 2})).values() == std::vector<double>{0, 0, 0.5, 2});

  Rng rng(4);
  const auto logits = random_tensor({5, 8}, rng, -30, 30);
  const auto p = softmax(logits);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(p[i * 8 + j] >= 0.0);
      s += p[i * 8 + j];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // Shift invariance and no overflow on huge logits.
  const auto big = softmax(TensorD::from_data({1, 2}, {1000, 1001}));
  CHECK(big[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}

TEST_CASE("dropout is identity at inference and unbiased in training") {
  Rng rng(5);
  const auto x = TensorD::fill({200000}, 1.0);
  CHECK(dropout(x, 0.5, false, rng).values() == x.values());
  CHECK(gaussian_dropout(x, 0.2, false, rng).values() == x.values());

  TensorD mask;
  const auto y = dropout(x, 0.5, true, rng, &mask);
  std::size_t zeros = 0;
  double sum = 0;
  for (double v : y.data()) {
    CHECK((v == 0.0 || v == 2.0));
    zeros += v == 0.0;
    sum += v;
  }
  CHECK(double(zeros) / double(x.size()) == doctest::Approx(0.5).epsilon(0.01));
  CHECK(sum / double(x.size()) == doctest::Approx(1.0).epsilon(0.01));

  const auto g = gaussian_dropout(x, 0.2, true, rng);
  double m = 0, m2 = 0;
  for (double v : g.data()) {
    m += v;
    m2 += v * v;
  }
  m /= double(x.size());
  CHECK(m == doctest::Approx(1.0).epsilon(0.01));
  CHECK(m2 / double(x.size()) - m * m == doctest::Approx(0.25).epsilon(0.02));  // 0.2 / 0.8

  CHECK_THROWS(dropout(x, 1.0, true, rng));
  CHECK_THROWS(dropout(x, -0.1, true, rng));
}

TEST_CASE("batchnorm normalizes per channel and commits running stats") {
  BatchNorm<double> bn("bn", 2);
  const auto x = TensorD::from_data({4, 2}, {1, 10, 2, 20, 3, 30, 4, 40});

  LayerContext<double> ctx;
  ctx.mode = Mode::Training;
  const auto y = bn.forward(x, ctx);
  // Channel 0: mean 2.5, biased var 1.25.
  CHECK(y[0] == doctest::Approx((1 - 2.5) / std::sqrt(1.25 + 1e-3)));
  CHECK(y[1] == doctest::Approx((10 - 25) / std::sqrt(125 + 1e-3)));

  // Running stats only move on commit.
  CHECK(bn.params()[2].value[0] == 0.0);
  bn.commit(ctx);
  CHECK(bn.params()[2].value[0] == doctest::Approx(0.01 * 2.5));
  CHECK(bn.params()[3].value[0] == doctest::Approx(0.99 + 0.01 * 1.25));
  CHECK_FALSE(bn.params()[2].trainable);
  CHECK_FALSE(bn.params()[3].trainable);

  LayerContext<double> inf;
  const auto z = bn.forward(x, inf);
  const double mean = bn.params()[2].value[1], var = bn.params()[3].value[1];
  CHECK(z[3] == doctest::Approx((20 - mean) / std::sqrt(var + 1e-3)));

  LayerContext<double> one;
  one.mode = Mode::Training;
  CHECK_THROWS(bn.forward(TensorD::from_data({1, 2}, {1, 2}), one));
}

TEST_CASE("backward before forward is a logic error") {
  Rng rng(0);
  Dense<double> d("d", 3, 2, rng);
  LayerContext<double> ctx;
  std::vector<TensorD> grads{TensorD::zeros({3, 2}), TensorD::zeros({2})};
  CHECK_THROWS_AS(d.backward(TensorD::zeros({1, 2}), ctx, grads, true), std::logic_error);
}

TEST_CASE("inference leaves layers untouched and is repeatable") {
  Rng rng(9);
  Sequential<double> net;
  net.add(std::make_unique<Conv2D<double>>("c", 3, 2, 4, 1, rng));
  net.add(std::make_unique<BatchNorm<double>>("bn", 4));
  net.add(std::make_unique<ReLU<double>>());
  net.add(std::make_unique<Dropout<double>>(0.5));
  const auto x = random_tensor({2, 5, 5, 2}, rng);
  const auto a = net.infer(x);
  const auto b = net.infer(x);
  CHECK(a == b);

  // Copies are deep: mutating a copy leaves the original alone.
  auto copy = net;
  copy.layer(0).params()[0].value[0] += 1.0;
  CHECK(net.infer(x) == a);
  CHECK_FALSE(copy.infer(x) == a);
}

TEST_CASE("initializers respect their limits") {
  Rng rng(10);
  Conv2D<float> conv("c", 3, 16, 32, 1, rng);
  const double he = std::sqrt(6.0 / (3 * 3 * 16));
  for (float v : conv.params()[0].value.data()) CHECK(std::abs(v) <= he);
  Dense<float> out("o", 1024, 8, rng, Init::GlorotUniform);
  const double glorot = std::sqrt(6.0 / (1024 + 8));
  double maxabs = 0;
  for (float v : out.params()[0].value.data()) maxabs = std::max(maxabs, double(std::abs(v)));
  CHECK(maxabs <= glorot);
  CHECK(maxabs > 0.9 * glorot);
  for (float v : out.params()[1].value.data()) CHECK(v == 0.0f);
}
