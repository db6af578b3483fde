#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "ascood/error.hpp"
#include "ascood/tensor.hpp"

namespace ascood::nn {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatrixMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatrixMap = Eigen::Map<const RowMatrix<S>>;

template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  /// Belongs to the final linear classifier (may use its own learning rate).
  bool head = false;
};

template <typename S, typename Rng>
void kaiming_normal(Tensor<S>& w, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : w.values()) v = static_cast<S>(dist(rng));
}

/// 2D convolution, square kernel, stride 1, zero padding. Lowered to one GEMM
/// per call over the whole batch (im2col).
template <typename S>
class Conv2d {
 public:
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel = 3,
         std::size_t padding = 1)
      : in_(in_channels), out_(out_channels), k_(kernel), pad_(padding) {
    weight_ = {name + ".weight", Tensor<S>(Shape{out_, in_ * k_ * k_}), Tensor<S>(Shape{out_, in_ * k_ * k_})};
    bias_ = {name + ".bias", Tensor<S>(Shape{out_}), Tensor<S>(Shape{out_})};
  }

  template <typename Rng>
  void init(Rng& rng) {
    kaiming_normal(weight_.value, in_ * k_ * k_, rng);
    bias_.value.fill(S(0));
  }

  Tensor<S> forward(const Tensor<S>& x) {
    if (x.rank() != 4 || x.dim(1) != in_) {
      throw ShapeMismatch(weight_.name + ": expected [N," + std::to_string(in_) + ",H,W], got " +
                          shape_string(x.shape()));
    }
    n_ = x.dim(0);
    h_ = x.dim(2);
    w_ = x.dim(3);
    oh_ = h_ + 2 * pad_ - k_ + 1;
    ow_ = w_ + 2 * pad_ - k_ + 1;
    const std::size_t plane = oh_ * ow_;
    const std::size_t depth = in_ * k_ * k_;
    cols_.assign(depth * n_ * plane, S(0));
    im2col(x);

    RowMatrix<S> out = ConstMatrixMap<S>(weight_.value.data(), out_, depth) *
                       ConstMatrixMap<S>(cols_.data(), depth, n_ * plane);
    Tensor<S> y(Shape{n_, out_, oh_, ow_});
    for (std::size_t n = 0; n < n_; ++n) {
      for (std::size_t o = 0; o < out_; ++o) {
        const S b = bias_.value[o];
        const S* src = out.data() + o * n_ * plane + n * plane;
        S* dst = y.data() + (n * out_ + o) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + b;
      }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy, bool param_grads) {
    const std::size_t plane = oh_ * ow_;
    const std::size_t depth = in_ * k_ * k_;
    RowMatrix<S> dout(out_, n_ * plane);
    for (std::size_t n = 0; n < n_; ++n) {
      for (std::size_t o = 0; o < out_; ++o) {
        const S* src = dy.data() + (n * out_ + o) * plane;
        std::copy(src, src + plane, dout.data() + o * n_ * plane + n * plane);
      }
    }
    ConstMatrixMap<S> cols(cols_.data(), depth, n_ * plane);
    if (param_grads) {
      MatrixMap<S>(weight_.grad.data(), out_, depth).noalias() += dout * cols.transpose();
      for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += dout.row(static_cast<Eigen::Index>(o)).sum();
    }
    RowMatrix<S> dcols = ConstMatrixMap<S>(weight_.value.data(), out_, depth).transpose() * dout;
    Tensor<S> dx(Shape{n_, in_, h_, w_});
    col2im(dcols, dx);
    return dx;
  }

  std::vector<Parameter<S>*> parameters() { return {&weight_, &bias_}; }

 private:
  void im2col(const Tensor<S>& x) {
    const std::size_t plane = oh_ * ow_;
    const std::size_t row_stride = n_ * plane;
    for (std::size_t c = 0; c < in_; ++c) {
      for (std::size_t ky = 0; ky < k_; ++ky) {
        for (std::size_t kx = 0; kx < k_; ++kx) {
          S* row = cols_.data() + ((c * k_ + ky) * k_ + kx) * row_stride;
          for (std::size_t n = 0; n < n_; ++n) {
            const S* src = x.data() + (n * in_ + c) * h_ * w_;
            S* dst = row + n * plane;
            for (std::size_t oy = 0; oy < oh_; ++oy) {
              const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad_);
              if (iy < 0 || iy >= static_cast<long>(h_)) continue;
              for (std::size_t ox = 0; ox < ow_; ++ox) {
                const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad_);
                if (ix < 0 || ix >= static_cast<long>(w_)) continue;
                dst[oy * ow_ + ox] = src[static_cast<std::size_t>(iy) * w_ + static_cast<std::size_t>(ix)];
              }
            }
          }
        }
      }
    }
  }

  void col2im(const RowMatrix<S>& dcols, Tensor<S>& dx) const {
    const std::size_t plane = oh_ * ow_;
    const std::size_t row_stride = n_ * plane;
    for (std::size_t c = 0; c < in_; ++c) {
      for (std::size_t ky = 0; ky < k_; ++ky) {
        for (std::size_t kx = 0; kx < k_; ++kx) {
          const S* row = dcols.data() + ((c * k_ + ky) * k_ + kx) * row_stride;
          for (std::size_t n = 0; n < n_; ++n) {
            S* dst = dx.data() + (n * in_ + c) * h_ * w_;
            const S* src = row + n * plane;
            for (std::size_t oy = 0; oy < oh_; ++oy) {
              const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad_);
              if (iy < 0 || iy >= static_cast<long>(h_)) continue;
              for (std::size_t ox = 0; ox < ow_; ++ox) {
                const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad_);
                if (ix < 0 || ix >= static_cast<long>(w_)) continue;
                dst[static_cast<std::size_t>(iy) * w_ + static_cast<std::size_t>(ix)] += src[oy * ow_ + ox];
              }
            }
          }
        }
      }
    }
  }

  std::size_t in_, out_, k_, pad_;
  std::size_t n_ = 0, h_ = 0, w_ = 0, oh_ = 0, ow_ = 0;
  Parameter<S> weight_;
  Parameter<S> bias_;
  std::vector<S> cols_;
};

template <typename S>
class ReLU {
 public:
  /// A nonzero slope gives the leaky variant.
  explicit ReLU(S negative_slope = S(0)) : slope_(negative_slope) {}

  Tensor<S> forward(const Tensor<S>& x) {
    Tensor<S> y = x;
    active_.assign(x.size(), 0);
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] > S(0)) {
        active_[i] = 1;
      } else {
        y[i] *= slope_;
      }
    }
    return y;
  }
  Tensor<S> backward(const Tensor<S>& dy, bool) {
    Tensor<S> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = active_[i] ? dy[i] : slope_ * dy[i];
    return dx;
  }
  std::vector<Parameter<S>*> parameters() { return {}; }

 private:
  S slope_;
  std::vector<unsigned char> active_;
};

/// 2x2 max pooling, stride 2 (odd trailing rows/columns dropped).
template <typename S>
class MaxPool2d {
 public:
  Tensor<S> forward(const Tensor<S>& x) {
    in_shape_ = x.shape();
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor<S> y(Shape{n, c, oh, ow});
    argmax_.assign(y.size(), 0);
    for (std::size_t p = 0; p < n * c; ++p) {
      const S* src = x.data() + p * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = (2 * oy) * w + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = (2 * oy + dy) * w + 2 * ox + dx;
              if (src[idx] > src[best]) best = idx;
            }
          }
          const std::size_t out_idx = p * oh * ow + oy * ow + ox;
          y[out_idx] = src[best];
          argmax_[out_idx] = p * h * w + best;
        }
      }
    }
    return y;
  }
  Tensor<S> backward(const Tensor<S>& dy, bool) {
    Tensor<S> dx(in_shape_);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax_[i]] += dy[i];
    return dx;
  }
  std::vector<Parameter<S>*> parameters() { return {}; }

 private:
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

/// [N, C, H, W] -> [N, C] spatial mean.
template <typename S>
class GlobalAvgPool {
 public:
  Tensor<S> forward(const Tensor<S>& x) {
    in_shape_ = x.shape();
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<S> y(Shape{n, c});
    for (std::size_t p = 0; p < n * c; ++p) {
      S acc = S(0);
      for (std::size_t i = 0; i < plane; ++i) acc += x[p * plane + i];
      y[p] = acc / static_cast<S>(plane);
    }
    return y;
  }
  Tensor<S> backward(const Tensor<S>& dy, bool) {
    Tensor<S> dx(in_shape_);
    const std::size_t plane = in_shape_[2] * in_shape_[3];
    for (std::size_t p = 0; p < dy.size(); ++p) {
      const S g = dy[p] / static_cast<S>(plane);
      for (std::size_t i = 0; i < plane; ++i) dx[p * plane + i] = g;
    }
    return dx;
  }
  std::vector<Parameter<S>*> parameters() { return {}; }

 private:
  Shape in_shape_;
};

/// [N, ...] -> [N, prod(...)].
template <typename S>
class Flatten {
 public:
  Tensor<S> forward(const Tensor<S>& x) {
    in_shape_ = x.shape();
    Tensor<S> y = x;
    y.reshape(Shape{x.dim(0), x.size() / x.dim(0)});
    return y;
  }
  Tensor<S> backward(const Tensor<S>& dy, bool) {
    Tensor<S> dx = dy;
    dx.reshape(in_shape_);
    return dx;
  }
  std::vector<Parameter<S>*> parameters() { return {}; }

 private:
  Shape in_shape_;
};

/// y = x W^T + b, x is [N, in].
template <typename S>
class Linear {
 public:
  Linear(std::string name, std::size_t in_features, std::size_t out_features, bool head = false)
      : in_(in_features), out_(out_features) {
    weight_ = {name + ".weight", Tensor<S>(Shape{out_, in_}), Tensor<S>(Shape{out_, in_}), head};
    bias_ = {name + ".bias", Tensor<S>(Shape{out_}), Tensor<S>(Shape{out_}), head};
  }

  template <typename Rng>
  void init(Rng& rng) {
    // PyTorch's default for nn.Linear: U(-1/sqrt(in), 1/sqrt(in)).
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : weight_.value.values()) v = static_cast<S>(dist(rng));
    for (auto& v : bias_.value.values()) v = static_cast<S>(dist(rng));
  }

  Tensor<S> forward(const Tensor<S>& x) {
    if (x.rank() != 2 || x.dim(1) != in_) {
      throw ShapeMismatch(weight_.name + ": expected [N," + std::to_string(in_) + "], got " +
                          shape_string(x.shape()));
    }
    input_ = x;
    const std::size_t n = x.dim(0);
    Tensor<S> y(Shape{n, out_});
    MatrixMap<S> ym(y.data(), n, out_);
    ym.noalias() = ConstMatrixMap<S>(x.data(), n, in_) * ConstMatrixMap<S>(weight_.value.data(), out_, in_).transpose();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < out_; ++c) y(r, c) += bias_.value[c];
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy, bool param_grads) {
    const std::size_t n = dy.dim(0);
    ConstMatrixMap<S> g(dy.data(), n, out_);
    if (param_grads) {
      MatrixMap<S>(weight_.grad.data(), out_, in_).noalias() +=
          g.transpose() * ConstMatrixMap<S>(input_.data(), n, in_);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < out_; ++c) bias_.grad[c] += dy(r, c);
      }
    }
    Tensor<S> dx(Shape{n, in_});
    MatrixMap<S>(dx.data(), n, in_).noalias() = g * ConstMatrixMap<S>(weight_.value.data(), out_, in_);
    return dx;
  }

  std::vector<Parameter<S>*> parameters() { return {&weight_, &bias_}; }
  Parameter<S>& weight() { return weight_; }
  Parameter<S>& bias() { return bias_; }

 private:
  std::size_t in_, out_;
  Parameter<S> weight_;
  Parameter<S> bias_;
  Tensor<S> input_;
};

template <typename S>
using Layer = std::variant<Conv2d<S>, ReLU<S>, MaxPool2d<S>, GlobalAvgPool<S>, Flatten<S>>;

/// Ordered stack of feature-extraction layers.
template <typename S>
class Sequential {
 public:
  template <typename L>
  void add(L layer) {
    layers_.emplace_back(std::move(layer));
  }

  Tensor<S> forward(Tensor<S> x) {
    for (auto& layer : layers_) {
      x = std::visit([&](auto& l) { return l.forward(x); }, layer);
    }
    return x;
  }

  Tensor<S> backward(Tensor<S> dy, bool param_grads) {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      dy = std::visit([&](auto& l) { return l.backward(dy, param_grads); }, *it);
    }
    return dy;
  }

  std::vector<Parameter<S>*> parameters() {
    std::vector<Parameter<S>*> out;
    for (auto& layer : layers_) {
      auto p = std::visit([](auto& l) { return l.parameters(); }, layer);
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  template <typename Rng>
  void init(Rng& rng) {
    for (auto& layer : layers_) {
      if (auto* conv = std::get_if<Conv2d<S>>(&layer)) conv->init(rng);
    }
  }

  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<Layer<S>> layers_;
};

}  // namespace ascood::nn
