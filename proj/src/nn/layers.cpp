#include "affect/nn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace affect::nn {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Upper bound on im2col scratch, in elements.
constexpr std::size_t kColumnBudget = std::size_t{1} << 22;

struct ConvGeometry {
  std::size_t n, h, w, c, k, stride, oh, ow, pad_top, pad_left;
  std::size_t patch() const { return k * k * c; }
  std::size_t rows_per_sample() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& in, std::size_t k, std::size_t stride) {
  if (in.size() != 4) throw ShapeError("convolution expects [N,H,W,C], got " + shape_to_string(in));
  if (stride == 0) throw std::invalid_argument("stride must be positive");
  const auto ph = same_padding(in[1], k, stride);
  const auto pw = same_padding(in[2], k, stride);
  return {in[0], in[1], in[2], in[3], k, stride, ph.out, pw.out, ph.before, pw.before};
}

template <typename T>
void im2col(const T* in, const ConvGeometry& g, std::size_t n0, std::size_t n1, T* col) {
  const std::size_t patch = g.patch();
  const auto h = static_cast<std::ptrdiff_t>(g.h);
  const auto w = static_cast<std::ptrdiff_t>(g.w);
  const auto k = static_cast<std::ptrdiff_t>(g.k);
  for (std::size_t n = n0; n < n1; ++n) {
    const T* img = in + n * g.h * g.w * g.c;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        T* row = col + (((n - n0) * g.oh + oy) * g.ow + ox) * patch;
        const auto y0 = static_cast<std::ptrdiff_t>(oy * g.stride) - static_cast<std::ptrdiff_t>(g.pad_top);
        const auto x0 = static_cast<std::ptrdiff_t>(ox * g.stride) - static_cast<std::ptrdiff_t>(g.pad_left);
        const std::ptrdiff_t kx_lo = std::max<std::ptrdiff_t>(0, -x0);
        const std::ptrdiff_t kx_hi = std::min<std::ptrdiff_t>(k, w - x0);
        for (std::ptrdiff_t ky = 0; ky < k; ++ky) {
          T* dst = row + static_cast<std::size_t>(ky * k) * g.c;
          const std::ptrdiff_t iy = y0 + ky;
          if (iy < 0 || iy >= h || kx_lo >= kx_hi) {
            std::fill(dst, dst + k * g.c, T{0});
            continue;
          }
          std::fill(dst, dst + kx_lo * g.c, T{0});
          std::memcpy(dst + kx_lo * g.c, img + (iy * w + x0 + kx_lo) * g.c,
                      sizeof(T) * static_cast<std::size_t>(kx_hi - kx_lo) * g.c);
          std::fill(dst + kx_hi * g.c, dst + k * g.c, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, std::size_t n0, std::size_t n1, T* out) {
  const std::size_t patch = g.patch();
  const auto h = static_cast<std::ptrdiff_t>(g.h);
  const auto w = static_cast<std::ptrdiff_t>(g.w);
  const auto k = static_cast<std::ptrdiff_t>(g.k);
  for (std::size_t n = n0; n < n1; ++n) {
    T* img = out + n * g.h * g.w * g.c;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        const T* row = col + (((n - n0) * g.oh + oy) * g.ow + ox) * patch;
        const auto y0 = static_cast<std::ptrdiff_t>(oy * g.stride) - static_cast<std::ptrdiff_t>(g.pad_top);
        const auto x0 = static_cast<std::ptrdiff_t>(ox * g.stride) - static_cast<std::ptrdiff_t>(g.pad_left);
        const std::ptrdiff_t kx_lo = std::max<std::ptrdiff_t>(0, -x0);
        const std::ptrdiff_t kx_hi = std::min<std::ptrdiff_t>(k, w - x0);
        for (std::ptrdiff_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t iy = y0 + ky;
          if (iy < 0 || iy >= h || kx_lo >= kx_hi) continue;
          const T* src = row + static_cast<std::size_t>(ky * k + kx_lo) * g.c;
          T* dst = img + (iy * w + x0 + kx_lo) * g.c;
          const std::size_t len = static_cast<std::size_t>(kx_hi - kx_lo) * g.c;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
      }
    }
  }
}

template <typename T>
void init_uniform(BasicTensor<T>& t, double limit, Rng& rng) {
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
}

double init_limit(Init init, double fan_in, double fan_out) {
  return init == Init::HeUniform ? std::sqrt(6.0 / fan_in) : std::sqrt(6.0 / (fan_in + fan_out));
}

void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
}

}  // namespace

SamePadding same_padding(std::size_t in, std::size_t kernel, std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("stride must be positive");
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > in ? needed - in : 0;
  return {out, total - total / 2};
}

// --- convolution -----------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::size_t stride) {
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1)) {
    throw ShapeError("conv2d kernel must be [k,k,Cin,Cout], got " + shape_to_string(kernel.shape()));
  }
  const auto g = conv_geometry(input.shape(), kernel.dim(0), stride);
  if (g.c != kernel.dim(2)) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(g.c) +
                     ", kernel expects " + std::to_string(kernel.dim(2)));
  }
  const std::size_t cout = kernel.dim(3);
  auto out = BasicTensor<T>::zeros({g.n, g.oh, g.ow, cout});
  ConstMatMap<T> wmat(kernel.data().data(), g.patch(), cout);

  if (g.k == 1 && g.stride == 1) {
    ConstMatMap<T> x(input.data().data(), g.n * g.h * g.w, g.c);
    MatMap<T> y(out.data().data(), g.n * g.oh * g.ow, cout);
    y.noalias() = x * wmat;
    return out;
  }

  const std::size_t per_sample = g.rows_per_sample() * g.patch();
  const std::size_t chunk = std::max<std::size_t>(1, kColumnBudget / per_sample);
  std::vector<T> col(std::min(chunk, g.n) * per_sample);
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t n1 = std::min(g.n, n0 + chunk);
    const std::size_t rows = (n1 - n0) * g.rows_per_sample();
    im2col(input.data().data(), g, n0, n1, col.data());
    ConstMatMap<T> cmat(col.data(), rows, g.patch());
    MatMap<T> y(out.data().data() + n0 * g.rows_per_sample() * cout, rows, cout);
    y.noalias() = cmat * wmat;
  }
  return out;
}

template <typename T>
void conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::size_t stride,
                     const BasicTensor<T>& grad_out, BasicTensor<T>* input_grad,
                     BasicTensor<T>& kernel_grad) {
  const auto g = conv_geometry(input.shape(), kernel.dim(0), stride);
  const std::size_t cout = kernel.dim(3);
  if (grad_out.shape() != Shape{g.n, g.oh, g.ow, cout}) {
    throw ShapeError("conv2d backward: gradient shape " + shape_to_string(grad_out.shape()));
  }
  ConstMatMap<T> wmat(kernel.data().data(), g.patch(), cout);
  MatMap<T> dw(kernel_grad.data().data(), g.patch(), cout);
  if (input_grad) *input_grad = BasicTensor<T>::zeros(input.shape());

  if (g.k == 1 && g.stride == 1) {
    ConstMatMap<T> x(input.data().data(), g.n * g.h * g.w, g.c);
    ConstMatMap<T> dy(grad_out.data().data(), g.n * g.oh * g.ow, cout);
    dw.noalias() += x.transpose() * dy;
    if (input_grad) {
      MatMap<T> dx(input_grad->data().data(), g.n * g.h * g.w, g.c);
      dx.noalias() = dy * wmat.transpose();
    }
    return;
  }

  const std::size_t per_sample = g.rows_per_sample() * g.patch();
  const std::size_t chunk = std::max<std::size_t>(1, kColumnBudget / per_sample);
  std::vector<T> col(std::min(chunk, g.n) * per_sample);
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t n1 = std::min(g.n, n0 + chunk);
    const std::size_t rows = (n1 - n0) * g.rows_per_sample();
    ConstMatMap<T> dy(grad_out.data().data() + n0 * g.rows_per_sample() * cout, rows, cout);
    im2col(input.data().data(), g, n0, n1, col.data());
    {
      ConstMatMap<T> cmat(col.data(), rows, g.patch());
      dw.noalias() += cmat.transpose() * dy;
    }
    if (input_grad) {
      MatMap<T> dcol(col.data(), rows, g.patch());
      dcol.noalias() = dy * wmat.transpose();
      col2im(col.data(), g, n0, n1, input_grad->data().data());
    }
  }
}

template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                std::size_t stride) {
  if (kernel.rank() != 3 || kernel.dim(0) != kernel.dim(1)) {
    throw ShapeError("depthwise kernel must be [k,k,C], got " + shape_to_string(kernel.shape()));
  }
  const auto g = conv_geometry(input.shape(), kernel.dim(0), stride);
  if (g.c != kernel.dim(2)) {
    throw ShapeError("depthwise channel mismatch: input has " + std::to_string(g.c) +
                     ", kernel expects " + std::to_string(kernel.dim(2)));
  }
  auto out = BasicTensor<T>::zeros({g.n, g.oh, g.ow, g.c});
  const T* in = input.data().data();
  const T* w = kernel.data().data();
  T* o = out.data().data();
  const auto h = static_cast<std::ptrdiff_t>(g.h), wd = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* img = in + n * g.h * g.w * g.c;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        T* dst = o + ((n * g.oh + oy) * g.ow + ox) * g.c;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= h) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= wd) continue;
            const T* src = img + (iy * wd + ix) * g.c;
            const T* wp = w + (ky * g.k + kx) * g.c;
            for (std::size_t c = 0; c < g.c; ++c) dst[c] += src[c] * wp[c];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
void depthwise_conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                               std::size_t stride, const BasicTensor<T>& grad_out,
                               BasicTensor<T>* input_grad, BasicTensor<T>& kernel_grad) {
  const auto g = conv_geometry(input.shape(), kernel.dim(0), stride);
  if (grad_out.shape() != Shape{g.n, g.oh, g.ow, g.c}) {
    throw ShapeError("depthwise backward: gradient shape " + shape_to_string(grad_out.shape()));
  }
  if (input_grad) *input_grad = BasicTensor<T>::zeros(input.shape());
  const T* in = input.data().data();
  const T* w = kernel.data().data();
  const T* dy = grad_out.data().data();
  T* dw = kernel_grad.data().data();
  T* dx = input_grad ? input_grad->data().data() : nullptr;
  const auto h = static_cast<std::ptrdiff_t>(g.h), wd = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t n = 0; n < g.n; ++n) {
    const std::size_t base = n * g.h * g.w * g.c;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        const T* go = dy + ((n * g.oh + oy) * g.ow + ox) * g.c;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= h) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= wd) continue;
            const std::size_t at = base + static_cast<std::size_t>(iy * wd + ix) * g.c;
            const std::size_t wat = (ky * g.k + kx) * g.c;
            for (std::size_t c = 0; c < g.c; ++c) dw[wat + c] += go[c] * in[at + c];
            if (dx) {
              for (std::size_t c = 0; c < g.c; ++c) dx[at + c] += go[c] * w[wat + c];
            }
          }
        }
      }
    }
  }
}

template <typename T>
BasicTensor<T> depthwise_separable_conv(const BasicTensor<T>& input,
                                        const BasicTensor<T>& depthwise_kernel,
                                        const BasicTensor<T>& pointwise_kernel, std::size_t stride) {
  if (pointwise_kernel.rank() != 4 || pointwise_kernel.dim(0) != 1 || pointwise_kernel.dim(1) != 1) {
    throw ShapeError("pointwise kernel must be [1,1,C,Cout]");
  }
  return conv2d(depthwise_conv2d(input, depthwise_kernel, stride), pointwise_kernel, 1);
}

// --- pooling ---------------------------------------------------------------

template <typename T>
BasicTensor<T> maxpool2x2(const BasicTensor<T>& input, std::vector<std::uint32_t>* argmax) {
  const auto& s = input.shape();
  if (s.size() != 4) throw ShapeError("maxpool expects [N,H,W,C]");
  if (s[1] % 2 || s[2] % 2) {
    throw ShapeError("maxpool2x2 needs even spatial dims, got " + shape_to_string(s));
  }
  const std::size_t n = s[0], h = s[1], w = s[2], c = s[3], oh = h / 2, ow = w / 2;
  auto out = BasicTensor<T>::zeros({n, oh, ow, c});
  if (argmax) argmax->assign(out.size(), 0);
  const T* in = input.data().data();
  T* o = out.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t oi = ((b * oh + oy) * ow + ox) * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
          T best_v = in[best];
          // Row-major scan; strict comparison keeps the first maximum.
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t ii = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if (in[ii] > best_v) {
                best_v = in[ii];
                best = ii;
              }
            }
          }
          o[oi + ch] = best_v;
          if (argmax) (*argmax)[oi + ch] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> maxpool2x2_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                   std::span<const std::uint32_t> argmax) {
  if (argmax.size() != grad_out.size()) throw ShapeError("maxpool backward: argmax size mismatch");
  auto dx = BasicTensor<T>::zeros(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += grad_out[i];
  return dx;
}

template <typename T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& input) {
  const auto& s = input.shape();
  if (s.size() != 4) throw ShapeError("global average pool expects [N,H,W,C]");
  const std::size_t n = s[0], hw = s[1] * s[2], c = s[3];
  auto out = BasicTensor<T>::zeros({n, c});
  std::vector<double> acc(c);
  for (std::size_t b = 0; b < n; ++b) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* in = input.data().data() + b * hw * c;
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += in[p * c + ch];
    }
    for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] = static_cast<T>(acc[ch] / static_cast<double>(hw));
  }
  return out;
}

// --- dense and activations ---------------------------------------------------

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                     const BasicTensor<T>& bias) {
  if (input.rank() != 2 || weights.rank() != 2 || input.dim(1) != weights.dim(0)) {
    throw ShapeError("dense dimension mismatch: " + shape_to_string(input.shape()) + " x " +
                     shape_to_string(weights.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(1)) throw ShapeError("dense bias mismatch");
  const std::size_t n = input.dim(0), in = weights.dim(0), out_f = weights.dim(1);
  auto out = BasicTensor<T>::zeros({n, out_f});
  ConstMatMap<T> x(input.data().data(), n, in);
  ConstMatMap<T> w(weights.data().data(), in, out_f);
  MatMap<T> y(out.data().data(), n, out_f);
  y.noalias() = x * w;
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data().data(), out_f);
  y.rowwise() += b;
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  return map(input, [](T v) { return v > T{0} ? v : T{0}; });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& input) {
  const std::size_t k = input.shape().back();
  const std::size_t rows = input.size() / k;
  auto out = BasicTensor<T>::zeros(input.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = input.data().data() + r * k;
    T* y = out.data().data() + r * k;
    const T mx = *std::max_element(x, x + k);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) sum += std::exp(static_cast<double>(x[i] - mx));
    for (std::size_t i = 0; i < k; ++i) {
      y[i] = static_cast<T>(std::exp(static_cast<double>(x[i] - mx)) / sum);
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& input, double rate, bool training, Rng& rng,
                       BasicTensor<T>* mask_out) {
  check_rate(rate);
  if (!training || rate == 0.0) return input;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = BasicTensor<T>::zeros(input.shape());
  for (auto& m : mask.data()) m = rng.uniform() < rate ? T{0} : scale;
  auto out = zip(input, mask, [](T a, T b) { return a * b; });
  if (mask_out) *mask_out = std::move(mask);
  return out;
}

template <typename T>
BasicTensor<T> gaussian_dropout(const BasicTensor<T>& input, double rate, bool training, Rng& rng,
                                BasicTensor<T>* noise_out) {
  check_rate(rate);
  if (!training || rate == 0.0) return input;
  const double stddev = std::sqrt(rate / (1.0 - rate));
  auto noise = BasicTensor<T>::zeros(input.shape());
  for (auto& m : noise.data()) m = static_cast<T>(rng.normal(1.0, stddev));
  auto out = zip(input, noise, [](T a, T b) { return a * b; });
  if (noise_out) *noise_out = std::move(noise);
  return out;
}

// --- Conv2D ----------------------------------------------------------------

template <typename T>
Conv2D<T>::Conv2D(std::string name, std::size_t kernel, std::size_t in_channels,
                  std::size_t out_channels, std::size_t stride, Rng& rng, Init init)
    : kernel_(kernel), cin_(in_channels), cout_(out_channels), stride_(stride) {
  if (stride == 0) throw std::invalid_argument("stride must be positive");
  auto w = BasicTensor<T>::zeros({kernel, kernel, in_channels, out_channels});
  init_uniform(w, init_limit(init, double(kernel * kernel * in_channels), double(kernel * kernel * out_channels)), rng);
  this->params_.push_back({std::move(name) + ".kernel", std::move(w), true});
}

template <typename T>
Shape Conv2D<T>::output_shape(const Shape& s) const {
  if (s.size() != 3 || s[2] != cin_) {
    throw ShapeError("conv2d expects [H,W," + std::to_string(cin_) + "], got " + shape_to_string(s));
  }
  return {same_padding(s[0], kernel_, stride_).out, same_padding(s[1], kernel_, stride_).out, cout_};
}

template <typename T>
BasicTensor<T> Conv2D<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  auto y = conv2d(x, this->params_[0].value, stride_);
  if (ctx.record) ctx.input = x;
  ctx.input_shape = x.shape();
  ctx.ready = true;
  return y;
}

template <typename T>
BasicTensor<T> Conv2D<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                   std::span<BasicTensor<T>> grads, bool need_input_grad) const {
  this->require_ready(ctx, "conv2d");
  BasicTensor<T> dx;
  conv2d_backward(ctx.input, this->params_[0].value, stride_, g, need_input_grad ? &dx : nullptr,
                  grads[0]);
  return dx;
}

// --- DepthwiseConv2D -------------------------------------------------------

template <typename T>
DepthwiseConv2D<T>::DepthwiseConv2D(std::string name, std::size_t kernel, std::size_t channels,
                                    std::size_t stride, Rng& rng)
    : kernel_(kernel), channels_(channels), stride_(stride) {
  if (stride == 0) throw std::invalid_argument("stride must be positive");
  auto w = BasicTensor<T>::zeros({kernel, kernel, channels});
  init_uniform(w, init_limit(Init::HeUniform, double(kernel * kernel), double(kernel * kernel)), rng);
  this->params_.push_back({std::move(name) + ".depthwise_kernel", std::move(w), true});
}

template <typename T>
Shape DepthwiseConv2D<T>::output_shape(const Shape& s) const {
  if (s.size() != 3 || s[2] != channels_) {
    throw ShapeError("depthwise conv expects [H,W," + std::to_string(channels_) + "], got " +
                     shape_to_string(s));
  }
  return {same_padding(s[0], kernel_, stride_).out, same_padding(s[1], kernel_, stride_).out, channels_};
}

template <typename T>
BasicTensor<T> DepthwiseConv2D<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  auto y = depthwise_conv2d(x, this->params_[0].value, stride_);
  if (ctx.record) ctx.input = x;
  ctx.input_shape = x.shape();
  ctx.ready = true;
  return y;
}

template <typename T>
BasicTensor<T> DepthwiseConv2D<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                            std::span<BasicTensor<T>> grads,
                                            bool need_input_grad) const {
  this->require_ready(ctx, "depthwise_conv2d");
  BasicTensor<T> dx;
  depthwise_conv2d_backward(ctx.input, this->params_[0].value, stride_, g,
                            need_input_grad ? &dx : nullptr, grads[0]);
  return dx;
}

// --- BatchNorm -------------------------------------------------------------

template <typename T>
BatchNorm<T>::BatchNorm(std::string name, std::size_t channels) : channels_(channels) {
  this->params_.push_back({name + ".gamma", BasicTensor<T>::fill({channels}, T{1}), true});
  this->params_.push_back({name + ".beta", BasicTensor<T>::zeros({channels}), true});
  this->params_.push_back({name + ".moving_mean", BasicTensor<T>::zeros({channels}), false});
  this->params_.push_back({name + ".moving_variance", BasicTensor<T>::fill({channels}, T{1}), false});
}

template <typename T>
Shape BatchNorm<T>::output_shape(const Shape& s) const {
  if (s.empty() || s.back() != channels_) {
    throw ShapeError("batchnorm expects " + std::to_string(channels_) + " channels, got " +
                     shape_to_string(s));
  }
  return s;
}

// ctx.stats layout: [mean(C), var(C), inv_std(C)]; ctx.aux holds x_hat.
template <typename T>
BasicTensor<T> BatchNorm<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  const std::size_t c = channels_;
  if (x.rank() < 2 || x.shape().back() != c) throw ShapeError("batchnorm channel mismatch");
  const std::size_t count = x.size() / c;
  const auto& gamma = this->params_[0].value;
  const auto& beta = this->params_[1].value;
  std::vector<double> mean(c, 0.0), var(c, 0.0);

  if (ctx.training()) {
    if (count < 2) throw std::invalid_argument("batchnorm: training needs more than one value per channel");
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += x[i * c + ch];
    }
    for (auto& m : mean) m /= double(count);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = x[i * c + ch] - mean[ch];
        var[ch] += d * d;
      }
    }
    for (auto& v : var) v /= double(count);
  } else {
    const auto& rm = this->params_[2].value;
    const auto& rv = this->params_[3].value;
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = rm[ch];
      var[ch] = rv[ch];
    }
  }

  std::vector<T> inv_std(c), shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var[ch] + kEpsilon));
  }
  auto y = BasicTensor<T>::zeros(x.shape());
  BasicTensor<T> xhat;
  if (ctx.record) xhat = BasicTensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t at = i * c + ch;
      const T xh = static_cast<T>((x[at] - mean[ch]) * inv_std[ch]);
      y[at] = gamma[ch] * xh + beta[ch];
      if (ctx.record) xhat[at] = xh;
    }
  }
  if (ctx.record) {
    ctx.aux = std::move(xhat);
    ctx.stats.assign(3 * c, T{0});
    for (std::size_t ch = 0; ch < c; ++ch) {
      ctx.stats[ch] = static_cast<T>(mean[ch]);
      ctx.stats[c + ch] = static_cast<T>(var[ch]);
      ctx.stats[2 * c + ch] = inv_std[ch];
    }
  }
  ctx.input_shape = x.shape();
  ctx.ready = true;
  return y;
}

template <typename T>
BasicTensor<T> BatchNorm<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                      std::span<BasicTensor<T>> grads, bool need_input_grad) const {
  this->require_ready(ctx, "batchnorm");
  const std::size_t c = channels_;
  const std::size_t count = g.size() / c;
  const auto& gamma = this->params_[0].value;
  const auto& xhat = ctx.aux;
  std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t at = i * c + ch;
      sum_dy[ch] += g[at];
      sum_dy_xhat[ch] += double(g[at]) * xhat[at];
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    grads[0][ch] += static_cast<T>(sum_dy_xhat[ch]);
    grads[1][ch] += static_cast<T>(sum_dy[ch]);
  }
  if (!need_input_grad) return {};

  auto dx = BasicTensor<T>::zeros(g.shape());
  const T* inv_std = ctx.stats.data() + 2 * c;
  if (ctx.training()) {
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t at = i * c + ch;
        const double m_dy = sum_dy[ch] / double(count);
        const double m_dyx = sum_dy_xhat[ch] / double(count);
        dx[at] = static_cast<T>(double(gamma[ch]) * inv_std[ch] * (g[at] - m_dy - xhat[at] * m_dyx));
      }
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) dx[i * c + ch] = g[i * c + ch] * gamma[ch] * inv_std[ch];
    }
  }
  return dx;
}

template <typename T>
void BatchNorm<T>::commit(const LayerContext<T>& ctx) {
  if (!ctx.training() || !ctx.ready || ctx.stats.size() != 3 * channels_) return;
  auto& rm = this->params_[2].value;
  auto& rv = this->params_[3].value;
  for (std::size_t ch = 0; ch < channels_; ++ch) {
    rm[ch] = static_cast<T>(kMomentum * rm[ch] + (1.0 - kMomentum) * ctx.stats[ch]);
    rv[ch] = static_cast<T>(kMomentum * rv[ch] + (1.0 - kMomentum) * ctx.stats[channels_ + ch]);
  }
}

// --- stateless layers --------------------------------------------------------

template <typename T>
BasicTensor<T> ReLU<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  auto y = relu(x);
  if (ctx.record) ctx.aux = y;
  ctx.input_shape = x.shape();
  ctx.ready = true;
  return y;
}

template <typename T>
BasicTensor<T> ReLU<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                 std::span<BasicTensor<T>>, bool need_input_grad) const {
  this->require_ready(ctx, "relu");
  if (!need_input_grad) return {};
  return zip(g, ctx.aux, [](T d, T y) { return y > T{0} ? d : T{0}; });
}

template <typename T>
Shape MaxPool2x2<T>::output_shape(const Shape& s) const {
  if (s.size() != 3 || s[0] % 2 || s[1] % 2) {
    throw ShapeError("maxpool2x2 needs [H,W,C] with even H,W, got " + shape_to_string(s));
  }
  return {s[0] / 2, s[1] / 2, s[2]};
}

template <typename T>
BasicTensor<T> MaxPool2x2<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  auto y = maxpool2x2(x, ctx.record ? &ctx.indices : nullptr);
  ctx.input_shape = x.shape();
  ctx.ready = true;
  return y;
}

template <typename T>
BasicTensor<T> MaxPool2x2<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                       std::span<BasicTensor<T>>, bool need_input_grad) const {
  this->require_ready(ctx, "maxpool2x2");
  if (!need_input_grad) return {};
  return maxpool2x2_backward(ctx.input_shape, g, ctx.indices);
}

template <typename T>
Shape GlobalAvgPool<T>::output_shape(const Shape& s) const {
  if (s.size() != 3) throw ShapeError("global average pool expects [H,W,C]");
  return {s[2]};
}

template <typename T>
BasicTensor<T> GlobalAvgPool<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  ctx.input_shape = x.shape();
  ctx.ready = true;
  return global_average_pool(x);
}

template <typename T>
BasicTensor<T> GlobalAvgPool<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                          std::span<BasicTensor<T>>, bool need_input_grad) const {
  this->require_ready(ctx, "global_avg_pool");
  if (!need_input_grad) return {};
  const auto& s = ctx.input_shape;
  const std::size_t n = s[0], hw = s[1] * s[2], c = s[3];
  auto dx = BasicTensor<T>::zeros(s);
  const T inv = static_cast<T>(1.0 / double(hw));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) dx[(b * hw + p) * c + ch] = g[b * c + ch] * inv;
    }
  }
  return dx;
}

template <typename T>
BasicTensor<T> Flatten<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  ctx.input_shape = x.shape();
  ctx.ready = true;
  const std::size_t n = x.dim(0);
  return x.reshaped({n, x.size() / n});
}

template <typename T>
BasicTensor<T> Flatten<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                    std::span<BasicTensor<T>>, bool need_input_grad) const {
  this->require_ready(ctx, "flatten");
  if (!need_input_grad) return {};
  return g.reshaped(ctx.input_shape);
}

// --- Dense -----------------------------------------------------------------

template <typename T>
Dense<T>::Dense(std::string name, std::size_t in_features, std::size_t out_features, Rng& rng,
                Init init)
    : in_(in_features), out_(out_features) {
  auto w = BasicTensor<T>::zeros({in_features, out_features});
  init_uniform(w, init_limit(init, double(in_features), double(out_features)), rng);
  this->params_.push_back({name + ".kernel", std::move(w), true});
  this->params_.push_back({name + ".bias", BasicTensor<T>::zeros({out_features}), true});
}

template <typename T>
Shape Dense<T>::output_shape(const Shape& s) const {
  if (s.size() != 1 || s[0] != in_) {
    throw ShapeError("dense expects [" + std::to_string(in_) + "], got " + shape_to_string(s));
  }
  return {out_};
}

template <typename T>
BasicTensor<T> Dense<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  auto y = dense(x, this->params_[0].value, this->params_[1].value);
  if (ctx.record) ctx.input = x;
  ctx.input_shape = x.shape();
  ctx.ready = true;
  return y;
}

template <typename T>
BasicTensor<T> Dense<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                  std::span<BasicTensor<T>> grads, bool need_input_grad) const {
  this->require_ready(ctx, "dense");
  const std::size_t n = g.dim(0);
  ConstMatMap<T> x(ctx.input.data().data(), n, in_);
  ConstMatMap<T> dy(g.data().data(), n, out_);
  MatMap<T> dw(grads[0].data().data(), in_, out_);
  dw.noalias() += x.transpose() * dy;
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grads[1].data().data(), out_);
  db += dy.colwise().sum();
  if (!need_input_grad) return {};
  auto dx = BasicTensor<T>::zeros({n, in_});
  ConstMatMap<T> w(this->params_[0].value.data().data(), in_, out_);
  MatMap<T> dxm(dx.data().data(), n, in_);
  dxm.noalias() = dy * w.transpose();
  return dx;
}

// --- dropout layers ----------------------------------------------------------

template <typename T>
Dropout<T>::Dropout(double rate) : rate_(rate) {
  check_rate(rate);
}

template <typename T>
BasicTensor<T> Dropout<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  ctx.input_shape = x.shape();
  ctx.ready = true;
  ctx.aux = {};
  const bool active = ctx.training() && rate_ > 0.0;
  if (!active) return x;
  if (!ctx.rng) throw std::logic_error("dropout: training forward needs an rng");
  return dropout(x, rate_, true, *ctx.rng, &ctx.aux);
}

template <typename T>
BasicTensor<T> Dropout<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                    std::span<BasicTensor<T>>, bool need_input_grad) const {
  this->require_ready(ctx, "dropout");
  if (!need_input_grad) return {};
  if (ctx.aux.empty()) return g;
  return zip(g, ctx.aux, [](T d, T m) { return d * m; });
}

template <typename T>
GaussianDropout<T>::GaussianDropout(double rate) : rate_(rate) {
  check_rate(rate);
}

template <typename T>
BasicTensor<T> GaussianDropout<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  ctx.input_shape = x.shape();
  ctx.ready = true;
  ctx.aux = {};
  const bool active = ctx.training() && rate_ > 0.0;
  if (!active) return x;
  if (!ctx.rng) throw std::logic_error("gaussian dropout: training forward needs an rng");
  return gaussian_dropout(x, rate_, true, *ctx.rng, &ctx.aux);
}

template <typename T>
BasicTensor<T> GaussianDropout<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                            std::span<BasicTensor<T>>, bool need_input_grad) const {
  this->require_ready(ctx, "gaussian_dropout");
  if (!need_input_grad) return {};
  if (ctx.aux.empty()) return g;
  return zip(g, ctx.aux, [](T d, T m) { return d * m; });
}

// --- Softmax ---------------------------------------------------------------

template <typename T>
BasicTensor<T> Softmax<T>::forward(const BasicTensor<T>& x, LayerContext<T>& ctx) const {
  auto y = softmax(x);
  if (ctx.record) ctx.aux = y;
  ctx.input_shape = x.shape();
  ctx.ready = true;
  return y;
}

template <typename T>
BasicTensor<T> Softmax<T>::backward(const BasicTensor<T>& g, const LayerContext<T>& ctx,
                                    std::span<BasicTensor<T>>, bool need_input_grad) const {
  this->require_ready(ctx, "softmax");
  if (!need_input_grad) return {};
  const auto& y = ctx.aux;
  const std::size_t k = y.shape().back();
  const std::size_t rows = y.size() / k;
  auto dx = BasicTensor<T>::zeros(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (std::size_t i = 0; i < k; ++i) dot += double(g[r * k + i]) * y[r * k + i];
    for (std::size_t i = 0; i < k; ++i) {
      dx[r * k + i] = static_cast<T>(y[r * k + i] * (g[r * k + i] - dot));
    }
  }
  return dx;
}

// --- instantiations ----------------------------------------------------------

#define AFFECT_INSTANTIATE(T)                                                                       \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t);        \
  template void conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t,          \
                                const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>&);           \
  template BasicTensor<T> depthwise_conv2d(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                           std::size_t);                                            \
  template void depthwise_conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                          std::size_t, const BasicTensor<T>&, BasicTensor<T>*,      \
                                          BasicTensor<T>&);                                         \
  template BasicTensor<T> depthwise_separable_conv(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                                   const BasicTensor<T>&, std::size_t);             \
  template BasicTensor<T> maxpool2x2(const BasicTensor<T>&, std::vector<std::uint32_t>*);           \
  template BasicTensor<T> maxpool2x2_backward(const Shape&, const BasicTensor<T>&,                  \
                                              std::span<const std::uint32_t>);                      \
  template BasicTensor<T> global_average_pool(const BasicTensor<T>&);                               \
  template BasicTensor<T> dense(const BasicTensor<T>&, const BasicTensor<T>&,                       \
                                const BasicTensor<T>&);                                             \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                              \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                           \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, bool, Rng&, BasicTensor<T>*);      \
  template BasicTensor<T> gaussian_dropout(const BasicTensor<T>&, double, bool, Rng&,               \
                                           BasicTensor<T>*);                                        \
  template class Conv2D<T>;                                                                         \
  template class DepthwiseConv2D<T>;                                                                \
  template class BatchNorm<T>;                                                                      \
  template class ReLU<T>;                                                                           \
  template class MaxPool2x2<T>;                                                                     \
  template class GlobalAvgPool<T>;                                                                  \
  template class Flatten<T>;                                                                        \
  template class Dense<T>;                                                                          \
  template class Dropout<T>;                                                                        \
  template class GaussianDropout<T>;                                                                \
  template class Softmax<T>;

AFFECT_INSTANTIATE(float)
AFFECT_INSTANTIATE(double)

#undef AFFECT_INSTANTIATE

}  // namespace affect::nn
