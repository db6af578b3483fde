#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ascood/error.hpp"

namespace ascood {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array with a runtime shape.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeMismatch("tensor data has " + std::to_string(data_.size()) +
                          " elements, shape " + shape_string(shape_) + " needs " +
                          std::to_string(shape_size(shape_)));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  Scalar& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const Scalar& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Contiguous slice along the leading axis.
  std::span<Scalar> slice(std::size_t i) {
    const std::size_t stride = size() / shape_[0];
    return {data_.data() + i * stride, stride};
  }
  std::span<const Scalar> slice(std::size_t i) const {
    const std::size_t stride = size() / shape_[0];
    return {data_.data() + i * stride, stride};
  }

  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size()) {
      throw ShapeMismatch("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(what) + ": " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
  }
}

/// Interval the pixel values of a batch are expected to occupy (after normalisation).
struct ValueRange {
  double lo = 0.0;
  double hi = 1.0;
  bool operator==(const ValueRange&) const = default;
};

/// Rank-4 (batch, channels, height, width) image batch.
template <typename Scalar>
class ImageBatch {
 public:
  ImageBatch() = default;
  ImageBatch(std::size_t n, std::size_t c, std::size_t h, std::size_t w, ValueRange range = {})
      : pixels_(Shape{n, c, h, w}), range_(range) {}
  explicit ImageBatch(Tensor<Scalar> pixels, ValueRange range = {})
      : pixels_(std::move(pixels)), range_(range) {
    if (pixels_.rank() != 4) {
      throw ShapeMismatch("image batch must be rank 4, got " + shape_string(pixels_.shape()));
    }
  }

  std::size_t batch() const { return pixels_.dim(0); }
  std::size_t channels() const { return pixels_.dim(1); }
  std::size_t height() const { return pixels_.dim(2); }
  std::size_t width() const { return pixels_.dim(3); }
  std::size_t image_size() const { return channels() * height() * width(); }
  std::size_t plane_size() const { return height() * width(); }

  std::span<Scalar> image(std::size_t i) { return pixels_.slice(i); }
  std::span<const Scalar> image(std::size_t i) const { return pixels_.slice(i); }

  Scalar& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return pixels_[((n * channels() + c) * height() + y) * width() + x];
  }
  const Scalar& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return pixels_[((n * channels() + c) * height() + y) * width() + x];
  }

  Tensor<Scalar>& pixels() { return pixels_; }
  const Tensor<Scalar>& pixels() const { return pixels_; }
  const Shape& shape() const { return pixels_.shape(); }
  ValueRange range() const { return range_; }
  void set_range(ValueRange r) { range_ = r; }

  /// Same geometry as this batch, zero-filled.
  ImageBatch zeros_like() const { return ImageBatch(Tensor<Scalar>(pixels_.shape()), range_); }

  /// Copies images [first, first + count) into a new batch.
  ImageBatch subset(std::size_t first, std::size_t count) const {
    ImageBatch out(count, channels(), height(), width(), range_);
    std::copy_n(pixels_.data() + first * image_size(), count * image_size(), out.pixels().data());
    return out;
  }

  bool operator==(const ImageBatch&) const = default;

 private:
  Tensor<Scalar> pixels_;
  ValueRange range_;
};

/// Stacks two batches of identical image geometry along the batch axis.
template <typename Scalar>
ImageBatch<Scalar> concat(const ImageBatch<Scalar>& a, const ImageBatch<Scalar>& b) {
  if (a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width()) {
    throw ShapeMismatch("concat: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  ImageBatch<Scalar> out(a.batch() + b.batch(), a.channels(), a.height(), a.width(), a.range());
  auto dst = out.pixels().data();
  std::copy(a.pixels().values().begin(), a.pixels().values().end(), dst);
  std::copy(b.pixels().values().begin(), b.pixels().values().end(), dst + a.pixels().size());
  return out;
}

}  // namespace ascood
