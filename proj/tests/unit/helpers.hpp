#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

#include "affect/image.hpp"
#include "affect/rng.hpp"
#include "affect/tensor.hpp"
#include "affect/training.hpp"

namespace testing {

inline affect::TensorD random_tensor(affect::Shape shape, affect::Rng& rng, double lo = -1.0, double hi = 1.0) {
  auto t = affect::TensorD::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline affect::Tensor random_tensor_f(affect::Shape shape, affect::Rng& rng, double lo = -1.0, double hi = 1.0) {
  return random_tensor(std::move(shape), rng, lo, hi).cast<float>();
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// |a - b| / max(|a|, |b|, floor): relative error that tolerates tiny values.
inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central differences of a scalar function with respect to every entry of x.
inline std::vector<double> numeric_gradient(affect::TensorD& x, const std::function<double()>& f, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f();
    x[i] = orig - h;
    const double down = f();
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "affect-test-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// 8 visually distinct classes: stripe orientation, dominant channel and
/// polarity vary with the class, plus small per-pixel noise.
inline affect::Tensor class_pattern(int c, affect::Rng& rng, double noise = 0.05) {
  auto img = affect::Tensor::zeros({128, 128, 3});
  for (std::size_t y = 0; y < 128; ++y) {
    for (std::size_t x = 0; x < 128; ++x) {
      const double base = ((c & 1) ? (x / 16) % 2 : (y / 16) % 2) ? 0.8 : 0.2;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = ch == std::size_t(c % 3) ? base : (c >= 4 ? 1.0 - base : 0.5);
        v += noise * (rng.uniform() - 0.5);
        img[(y * 128 + x) * 3 + ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

inline std::vector<affect::training::LabeledImage> synthetic_set(std::size_t per_class, std::uint64_t seed) {
  affect::Rng rng(seed);
  std::vector<affect::training::LabeledImage> set;
  for (int c = 0; c < 8; ++c) {
    for (std::size_t k = 0; k < per_class; ++k) {
      const float v = static_cast<float>(rng.uniform(-1, 1)), a = static_cast<float>(rng.uniform(-1, 1));
      set.push_back({class_pattern(c, rng), c, v, a});
    }
  }
  return set;
}

inline affect::image::RgbImage gradient_image(std::size_t w, std::size_t h) {
  affect::image::RgbImage img{w, h, std::vector<std::uint8_t>(w * h * 3)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      auto* p = img.at(x, y);
      p[0] = static_cast<std::uint8_t>((x * 255) / std::max<std::size_t>(1, w - 1));
      p[1] = static_cast<std::uint8_t>((y * 255) / std::max<std::size_t>(1, h - 1));
      p[2] = static_cast<std::uint8_t>(((x + y) * 7) % 256);
    }
  }
  return img;
}

}  // namespace testing
