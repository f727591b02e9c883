#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace affect {

/// Thrown for any shape disagreement: wrong rank, mismatched dims, zero dims,
/// or a data buffer whose length does not match the shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor. Activations follow the NHWC convention, so a batch
/// of images is [N, H, W, C] and a single image is [H, W, C].
///
/// The shape is fixed at construction; `reshaped` produces a new tensor.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape) { return fill(std::move(shape), T{0}); }

  static BasicTensor fill(Shape shape, T value) {
    const std::size_t n = checked_size(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value));
  }

  static BasicTensor from_data(Shape shape, std::vector<T> data) {
    const std::size_t n = checked_size(shape);
    if (data.size() != n) {
      throw ShapeError("length mismatch: shape " + shape_to_string(shape) + " needs " +
                       std::to_string(n) + " values, got " + std::to_string(data.size()));
    }
    return BasicTensor(std::move(shape), std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t flat) noexcept { return data_[flat]; }
  const T& operator[](std::size_t flat) const noexcept { return data_[flat]; }

  /// Flat offset of a multi-index: sum of idx[i] * stride[i].
  std::size_t offset(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t flat = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] >= shape_[i]) throw std::out_of_range("tensor index out of range");
      flat = flat * shape_[i] + index[i];
    }
    return flat;
  }
  std::size_t offset(std::initializer_list<std::size_t> index) const {
    return offset(std::span<const std::size_t>(index.begin(), index.size()));
  }

  T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

  /// Row-major strides, innermost stride 1.
  std::vector<std::size_t> strides() const {
    std::vector<std::size_t> s(shape_.size(), 1);
    for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
    return s;
  }

  BasicTensor reshaped(Shape shape) const& {
    return from_data(std::move(shape), data_);
  }
  BasicTensor reshaped(Shape shape) && {
    return from_data(std::move(shape), std::move(data_));
  }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>::from_data(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {}

  static std::size_t checked_size(const Shape& shape) {
    if (shape.empty()) throw ShapeError("shape must have at least one dimension");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("zero dimension in shape " + shape_to_string(shape));
    }
    return shape_size(shape);
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Rank-2 matrix product. Backed by Eigen's blocked GEMM.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T, typename Fn>
BasicTensor<T> map(const BasicTensor<T>& t, Fn&& fn) {
  std::vector<T> out(t.size());
  auto in = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(in[i]);
  return BasicTensor<T>::from_data(t.shape(), std::move(out));
}

template <typename T, typename Fn>
BasicTensor<T> zip(const BasicTensor<T>& a, const BasicTensor<T>& b, Fn&& fn) {
  if (a.shape() != b.shape()) {
    throw ShapeError("zip shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  std::vector<T> out(a.size());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(x[i], y[i]);
  return BasicTensor<T>::from_data(a.shape(), std::move(out));
}

/// Folds `axis` away with `fn(acc, value)` starting from `init`. Reducing the
/// only axis of a rank-1 tensor yields shape [1].
template <typename T, typename Fn>
BasicTensor<T> reduce(const BasicTensor<T>& t, std::size_t axis, Fn&& fn, T init = T{0}) {
  const Shape& s = t.shape();
  if (axis >= s.size()) throw ShapeError("reduce axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];

  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  std::vector<T> out(outer * inner, init);
  auto in = t.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const T* row = in.data() + (o * n + k) * inner;
      T* acc = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) acc[i] = fn(acc[i], row[i]);
    }
  }
  return BasicTensor<T>::from_data(std::move(out_shape), std::move(out));
}

template <typename T>
bool all_finite(const BasicTensor<T>& t);

}  // namespace affect
