#pragma once

#include <memory>
#include <vector>

#include "affect/nn/layers.hpp"

namespace affect::nn {

/// Parameter gradients, indexed [layer][param] to mirror Sequential::layer(i).params().
template <typename T>
using Gradients = std::vector<std::vector<BasicTensor<T>>>;

/// Ordered stack of layers with value semantics (copies deep-clone layers).
template <typename T>
class Sequential {
 public:
  using Contexts = std::vector<LayerContext<T>>;

  Sequential() = default;
  Sequential(const Sequential& other) { *this = other; }
  Sequential& operator=(const Sequential& other) {
    if (this == &other) return *this;
    layers_.clear();
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }
  void replace(std::size_t i, std::unique_ptr<Layer<T>> layer) { layers_.at(i) = std::move(layer); }
  void truncate(std::size_t n) { layers_.resize(n); }

  std::size_t size() const noexcept { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  /// Deterministic forward with no caching; safe for concurrent callers.
  BasicTensor<T> infer(const BasicTensor<T>& x) const {
    BasicTensor<T> cur = x;
    for (const auto& l : layers_) {
      LayerContext<T> ctx;
      ctx.record = false;
      cur = l->forward(cur, ctx);
    }
    return cur;
  }

  /// Forward pass recording one context per layer.
  BasicTensor<T> forward(const BasicTensor<T>& x, Contexts& ctxs, Mode mode, Rng* rng) const {
    ctxs.assign(layers_.size(), LayerContext<T>{});
    BasicTensor<T> cur = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      ctxs[i].mode = mode;
      ctxs[i].rng = rng;
      cur = layers_[i]->forward(cur, ctxs[i]);
    }
    return cur;
  }

  /// Backpropagates `grad` entering the output of layer `end - 1` down to
  /// layer 0. Returns the input gradient when requested.
  BasicTensor<T> backward(const BasicTensor<T>& grad, const Contexts& ctxs, Gradients<T>& grads,
                          std::size_t end, bool need_input_grad = false) const {
    BasicTensor<T> cur = grad;
    for (std::size_t i = end; i-- > 0;) {
      const bool want = i > 0 || need_input_grad;
      cur = layers_[i]->backward(cur, ctxs[i], grads[i], want);
    }
    return cur;
  }

  BasicTensor<T> backward(const BasicTensor<T>& grad, const Contexts& ctxs, Gradients<T>& grads,
                          bool need_input_grad = false) const {
    return backward(grad, ctxs, grads, layers_.size(), need_input_grad);
  }

  void commit(const Contexts& ctxs) {
    for (std::size_t i = 0; i < layers_.size() && i < ctxs.size(); ++i) layers_[i]->commit(ctxs[i]);
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      for (const auto& p : layers_[i]->params()) g[i].push_back(BasicTensor<T>::zeros(p.value.shape()));
    }
    return g;
  }

  /// Per-layer output shapes for one sample, without touching data.
  std::vector<Shape> output_shapes(const Shape& sample_shape) const {
    std::vector<Shape> out;
    Shape cur = sample_shape;
    for (const auto& l : layers_) {
      cur = l->output_shape(cur);
      out.push_back(cur);
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace affect::nn
