#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "affect/rng.hpp"
#include "affect/tensor.hpp"

namespace affect::nn {

enum class Mode { Inference, Training };

template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  /// BN running statistics are stored but never touched by the optimizer.
  bool trainable = true;
};

/// Per-call scratch state. A layer's forward fills it; backward reads it.
/// Inference callers each own one, which keeps shared layers read-only.
template <typename T>
struct LayerContext {
  Mode mode = Mode::Inference;
  Rng* rng = nullptr;
  /// When false the forward pass skips caching (pure inference).
  bool record = true;

  bool ready = false;
  Shape input_shape;
  BasicTensor<T> input;
  BasicTensor<T> aux;
  std::vector<T> stats;
  std::vector<std::uint32_t> indices;

  bool training() const noexcept { return mode == Mode::Training; }
};

// ---------------------------------------------------------------------------
// Functional kernels. All activations are NHWC with a leading batch axis.
// ---------------------------------------------------------------------------

struct SamePadding {
  std::size_t out = 0;
  std::size_t before = 0;  // top or left; receives the extra row when odd
};

/// "Same" padding: out = ceil(in / stride); the odd leftover goes top/left.
SamePadding same_padding(std::size_t in, std::size_t kernel, std::size_t stride);

/// Cross-correlation with zero same-padding. kernel is [k, k, Cin, Cout].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::size_t stride);

/// Accumulates into kernel_grad; writes input_grad when non-null.
template <typename T>
void conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::size_t stride,
                     const BasicTensor<T>& grad_out, BasicTensor<T>* input_grad,
                     BasicTensor<T>& kernel_grad);

/// Per-channel spatial filter. kernel is [k, k, C].
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                std::size_t stride);

template <typename T>
void depthwise_conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                               std::size_t stride, const BasicTensor<T>& grad_out,
                               BasicTensor<T>* input_grad, BasicTensor<T>& kernel_grad);

/// Depthwise k x k (stride applied here) followed by a 1x1 pointwise
/// projection, without the normalization/activation of the full block.
template <typename T>
BasicTensor<T> depthwise_separable_conv(const BasicTensor<T>& input,
                                        const BasicTensor<T>& depthwise_kernel,
                                        const BasicTensor<T>& pointwise_kernel, std::size_t stride);

template <typename T>
BasicTensor<T> maxpool2x2(const BasicTensor<T>& input, std::vector<std::uint32_t>* argmax = nullptr);

template <typename T>
BasicTensor<T> maxpool2x2_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                   std::span<const std::uint32_t> argmax);

template <typename T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                     const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// Softmax over the last axis with max subtraction.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& input);

/// Inverted dropout. Identity unless training with rate > 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& input, double rate, bool training, Rng& rng,
                       BasicTensor<T>* mask_out = nullptr);

/// Multiplicative N(1, rate / (1 - rate)) noise. Identity unless training.
template <typename T>
BasicTensor<T> gaussian_dropout(const BasicTensor<T>& input, double rate, bool training, Rng& rng,
                                BasicTensor<T>* noise_out = nullptr);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  /// Output shape for a single sample (no batch axis). Throws ShapeError.
  virtual Shape output_shape(const Shape& sample_shape) const = 0;

  virtual BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const = 0;

  /// Returns the input gradient (empty tensor when need_input_grad is false)
  /// and accumulates parameter gradients in params() order.
  virtual BasicTensor<T> backward(const BasicTensor<T>& grad_out, const LayerContext<T>& ctx,
                                  std::span<BasicTensor<T>> param_grads,
                                  bool need_input_grad) const = 0;

  /// Applies side effects of a training forward pass (BN running stats).
  virtual void commit(const LayerContext<T>&) {}

  virtual std::unique_ptr<Layer> clone() const = 0;

  std::vector<Parameter<T>>& params() noexcept { return params_; }
  const std::vector<Parameter<T>>& params() const noexcept { return params_; }

 protected:
  static void require_ready(const LayerContext<T>& ctx, const char* who) {
    if (!ctx.ready) throw std::logic_error(std::string(who) + ": backward called before forward");
  }

  std::vector<Parameter<T>> params_;
};

enum class Init { HeUniform, GlorotUniform };

template <typename T>
class Conv2D final : public Layer<T> {
 public:
  Conv2D(std::string name, std::size_t kernel, std::size_t in_channels, std::size_t out_channels,
         std::size_t stride, Rng& rng, Init init = Init::HeUniform);

  std::string kind() const override { return "conv2d"; }
  Shape output_shape(const Shape& s) const override;
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2D>(*this); }

  std::size_t stride() const noexcept { return stride_; }

 private:
  std::size_t kernel_, cin_, cout_, stride_;
};

template <typename T>
class DepthwiseConv2D final : public Layer<T> {
 public:
  DepthwiseConv2D(std::string name, std::size_t kernel, std::size_t channels, std::size_t stride,
                  Rng& rng);

  std::string kind() const override { return "depthwise_conv2d"; }
  Shape output_shape(const Shape& s) const override;
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<DepthwiseConv2D>(*this);
  }

 private:
  std::size_t kernel_, channels_, stride_;
};

/// Per-channel normalization over every axis but the last.
/// Parameters: gamma, beta (trainable), moving_mean, moving_variance.
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  static constexpr double kEpsilon = 1e-3;
  static constexpr double kMomentum = 0.99;

  BatchNorm(std::string name, std::size_t channels);

  std::string kind() const override { return "batchnorm"; }
  Shape output_shape(const Shape& s) const override;
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  void commit(const LayerContext<T>& ctx) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this); }

 private:
  std::size_t channels_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  std::string kind() const override { return "relu"; }
  Shape output_shape(const Shape& s) const override { return s; }
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(*this); }
};

template <typename T>
class MaxPool2x2 final : public Layer<T> {
 public:
  std::string kind() const override { return "maxpool2x2"; }
  Shape output_shape(const Shape& s) const override;
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2x2>(*this); }
};

template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  std::string kind() const override { return "global_avg_pool"; }
  Shape output_shape(const Shape& s) const override;
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<GlobalAvgPool>(*this);
  }
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  std::string kind() const override { return "flatten"; }
  Shape output_shape(const Shape& s) const override { return {shape_size(s)}; }
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten>(*this); }
};

/// Affine map y = x W + b with W stored [in, out].
template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(std::string name, std::size_t in_features, std::size_t out_features, Rng& rng,
        Init init = Init::HeUniform);

  std::string kind() const override { return "dense"; }
  Shape output_shape(const Shape& s) const override;
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }

 private:
  std::size_t in_, out_;
};

template <typename T>
class Dropout final : public Layer<T> {
 public:
  explicit Dropout(double rate);
  std::string kind() const override { return "dropout"; }
  Shape output_shape(const Shape& s) const override { return s; }
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dropout>(*this); }
  double rate() const noexcept { return rate_; }

 private:
  double rate_;
};

template <typename T>
class GaussianDropout final : public Layer<T> {
 public:
  explicit GaussianDropout(double rate);
  std::string kind() const override { return "gaussian_dropout"; }
  Shape output_shape(const Shape& s) const override { return s; }
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<GaussianDropout>(*this);
  }
  double rate() const noexcept { return rate_; }

 private:
  double rate_;
};

template <typename T>
class Softmax final : public Layer<T> {
 public:
  std::string kind() const override { return "softmax"; }
  Shape output_shape(const Shape& s) const override { return s; }
  BasicTensor<T> forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const override;
  BasicTensor<T> backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                          std::span<BasicTensor<T>> grads, bool need_input_grad) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Softmax>(*this); }
};

}  // namespace affect::nn
