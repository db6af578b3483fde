#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ascood/core.hpp"
#include "ascood/error.hpp"
#include "ascood/nn/layers.hpp"
#include "ascood/tensor.hpp"

namespace ascood {

/// How the penultimate feature is conditioned before the linear head.
enum class FeatureMode {
  standardized,   ///< sigma * (h - mean) / std, norm sigma * sqrt(m - 1)
  raw,            ///< h unchanged
  l2_normalized,  ///< sigma * h / ||h||, norm sigma (ablation comparator)
};

struct ClassifierConfig {
  std::size_t num_classes = 2;
  std::size_t feature_dim = 32;
  double sigma = 0.5;
  /// "convnet": three 3x3 conv stages, leaky ReLU, global average pool (feature_dim = last width).
  /// "linear": flatten(x) is the feature (feature_dim = C * H * W).
  std::string backbone = "convnet";
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths = {16, 32};
  FeatureMode feature_mode = FeatureMode::standardized;

  bool operator==(const ClassifierConfig&) const = default;
};

template <typename S>
struct ForwardOutput {
  Tensor<S> features;      ///< raw h, [B x m]
  Tensor<S> std_features;  ///< conditioned h, [B x m]
  Tensor<S> logits;        ///< [B x C]
};

template <class M>
concept LogitModel = requires(M& m, const ImageBatch<typename M::scalar_type>& x) {
  { m.logits(x) } -> std::same_as<Tensor<typename M::scalar_type>>;
};

/// A classifier that can backpropagate a logit-space gradient to its input.
template <class M>
concept InputDifferentiable =
    LogitModel<M> && requires(M& m, const ImageBatch<typename M::scalar_type>& x,
                              const Tensor<typename M::scalar_type>& g) {
      { m.input_gradient(x, g) } -> std::same_as<ImageBatch<typename M::scalar_type>>;
    };

/// g = head o condition o backbone.
template <typename S>
class Classifier {
 public:
  using scalar_type = S;

  Classifier(ClassifierConfig cfg, std::uint64_t seed)
      : cfg_(validated(std::move(cfg))), head_("fc", cfg_.feature_dim, cfg_.num_classes, true) {
    if (cfg_.backbone == "convnet") {
      const std::size_t w0 = cfg_.widths.at(0), w1 = cfg_.widths.at(1);
      backbone_.add(nn::Conv2d<S>("conv1", cfg_.in_channels, w0));
      backbone_.add(nn::ReLU<S>{});
      backbone_.add(nn::MaxPool2d<S>{});
      backbone_.add(nn::Conv2d<S>("conv2", w0, w1));
      backbone_.add(nn::ReLU<S>{});
      backbone_.add(nn::MaxPool2d<S>{});
      backbone_.add(nn::Conv2d<S>("conv3", w1, cfg_.feature_dim));
      backbone_.add(nn::ReLU<S>{S(0.1)});
      backbone_.add(nn::GlobalAvgPool<S>{});
    } else {
      backbone_.add(nn::Flatten<S>{});
    }
    std::mt19937_64 rng(seed);
    backbone_.init(rng);
    head_.init(rng);
  }

  const ClassifierConfig& config() const { return cfg_; }

  ForwardOutput<S> forward(const ImageBatch<S>& x) { return forward(x, cfg_.feature_mode); }

  ForwardOutput<S> forward(const ImageBatch<S>& x, FeatureMode mode) {
    if (x.channels() != cfg_.in_channels) {
      throw ShapeMismatch("classifier expects " + std::to_string(cfg_.in_channels) + " channels, got " +
                          std::to_string(x.channels()));
    }
    ForwardOutput<S> out;
    out.features = backbone_.forward(x.pixels());
    if (out.features.dim(1) != cfg_.feature_dim) {
      throw ShapeMismatch("backbone produced " + std::to_string(out.features.dim(1)) +
                          " features, config says " + std::to_string(cfg_.feature_dim));
    }
    out.std_features = condition(out.features, mode);
    out.logits = head_.forward(out.std_features);
    input_shape_ = x.shape();
    input_range_ = x.range();
    last_mode_ = mode;
    conditioned_ = out.std_features;
    return out;
  }

  Tensor<S> logits(const ImageBatch<S>& x) { return forward(x).logits; }

  /// Backpropagates d(loss)/d(logits) through the most recent forward pass.
  /// Parameter gradients accumulate only when `param_grads` is set.
  ImageBatch<S> backward(const Tensor<S>& dlogits, bool param_grads = true) {
    if (dlogits.rank() != 2 || dlogits.dim(1) != cfg_.num_classes || dlogits.dim(0) != input_shape_.at(0)) {
      throw ShapeMismatch("dlogits " + shape_string(dlogits.shape()) + " does not match last forward");
    }
    Tensor<S> dfeat = head_.backward(dlogits, param_grads);
    Tensor<S> draw = condition_backward(dfeat);
    Tensor<S> dx = backbone_.backward(std::move(draw), param_grads);
    dx.reshape(input_shape_);
    return ImageBatch<S>(std::move(dx), input_range_);
  }

  ImageBatch<S> input_gradient(const ImageBatch<S>& x, const Tensor<S>& dlogits) {
    forward(x);
    return backward(dlogits, false);
  }

  std::vector<nn::Parameter<S>*> parameters() {
    auto params = backbone_.parameters();
    auto head = head_.parameters();
    params.insert(params.end(), head.begin(), head.end());
    return params;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->grad.fill(S(0));
  }

  nn::Linear<S>& head() { return head_; }

  /// Copies every non-head parameter from a model with the same backbone geometry.
  void copy_backbone_from(Classifier& other) {
    auto dst = parameters();
    auto src = other.parameters();
    if (dst.size() != src.size()) throw ShapeMismatch("copy_backbone_from: parameter count differs");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i]->head) continue;
      if (dst[i]->value.shape() != src[i]->value.shape()) {
        throw ShapeMismatch("copy_backbone_from: " + dst[i]->name + " is " + shape_string(dst[i]->value.shape()) +
                            ", source " + shape_string(src[i]->value.shape()));
      }
      dst[i]->value = src[i]->value;
    }
  }

 private:
  static ClassifierConfig validated(ClassifierConfig cfg) {
    if (cfg.num_classes < 2) throw InvalidArgument("classifier: num_classes must be >= 2");
    if (cfg.feature_dim < 2) throw InvalidArgument("classifier: feature_dim must be >= 2");
    if (!(cfg.sigma > 0.0)) throw InvalidArgument("classifier: sigma must be > 0");
    if (cfg.backbone == "convnet") {
      if (cfg.widths.size() != 2) throw InvalidArgument("classifier: convnet needs two widths");
    } else if (cfg.backbone != "linear") {
      throw InvalidArgument("classifier: unknown backbone '" + cfg.backbone + "'");
    }
    return cfg;
  }

  Tensor<S> condition(const Tensor<S>& h, FeatureMode mode) {
    const std::size_t rows = h.dim(0);
    const std::size_t m = h.dim(1);
    Tensor<S> out(h.shape());
    row_scale_.assign(rows, S(1));
    switch (mode) {
      case FeatureMode::raw:
        out = h;
        break;
      case FeatureMode::standardized:
        for (std::size_t r = 0; r < rows; ++r) {
          row_scale_[r] = standardize_row<S>(h.slice(r), out.slice(r), cfg_.sigma);
        }
        break;
      case FeatureMode::l2_normalized:
        for (std::size_t r = 0; r < rows; ++r) {
          auto src = h.slice(r);
          S sq = S(0);
          for (S v : src) sq += v * v;
          const S norm = std::sqrt(sq);
          if (!(norm >= S(kMinFeatureStd))) throw DegenerateFeature("feature norm is zero");
          row_scale_[r] = norm;
          auto dst = out.slice(r);
          for (std::size_t i = 0; i < m; ++i) dst[i] = src[i] * static_cast<S>(cfg_.sigma) / norm;
        }
        break;
    }
    return out;
  }

  Tensor<S> condition_backward(const Tensor<S>& g) const {
    const std::size_t rows = g.dim(0);
    const std::size_t m = g.dim(1);
    if (last_mode_ == FeatureMode::raw) return g;
    Tensor<S> dh(g.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      auto out = conditioned_.slice(r);
      auto gr = g.slice(r);
      auto dr = dh.slice(r);
      if (last_mode_ == FeatureMode::standardized) {
        standardize_row_backward<S>(out, row_scale_[r], cfg_.sigma, gr, dr);
      } else {
        // out = sigma * h / ||h||  =>  dh = sigma/||h|| * (g - u (u . g)), u = out / sigma
        const S inv_sigma = S(1) / static_cast<S>(cfg_.sigma);
        S dot = S(0);
        for (std::size_t i = 0; i < m; ++i) dot += gr[i] * out[i] * inv_sigma;
        const S scale = static_cast<S>(cfg_.sigma) / row_scale_[r];
        for (std::size_t i = 0; i < m; ++i) dr[i] = scale * (gr[i] - out[i] * inv_sigma * dot);
      }
    }
    return dh;
  }

  ClassifierConfig cfg_;
  nn::Sequential<S> backbone_;
  nn::Linear<S> head_;
  Shape input_shape_;
  ValueRange input_range_;
  FeatureMode last_mode_ = FeatureMode::standardized;
  Tensor<S> conditioned_;
  std::vector<S> row_scale_;
};

// ---------------------------------------------------------------------------
// SGD with momentum and decoupled head learning rate.
// ---------------------------------------------------------------------------

struct SgdConfig {
  double lr = 0.05;
  std::optional<double> fc_lr;  ///< learning rate for the linear head; defaults to lr
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool operator==(const SgdConfig&) const = default;
};

template <typename S>
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}

  /// `lr_scale` multiplies both learning rates (e.g. a cosine factor).
  void step(const std::vector<nn::Parameter<S>*>& params, double lr_scale = 1.0) {
    if (velocity_.empty()) {
      for (auto* p : params) velocity_.emplace_back(p->value.shape());
    }
    if (velocity_.size() != params.size()) throw InvalidArgument("optimizer: parameter set changed");
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto* p = params[k];
      const S lr = static_cast<S>(lr_scale * (p->head ? cfg_.fc_lr.value_or(cfg_.lr) : cfg_.lr));
      const S mu = static_cast<S>(cfg_.momentum);
      const S wd = static_cast<S>(cfg_.weight_decay);
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const S g = p->grad[i] + wd * p->value[i];
        v[i] = mu * v[i] + g;
        p->value[i] -= lr * v[i];
      }
    }
  }

  const SgdConfig& config() const { return cfg_; }
  std::vector<Tensor<S>>& velocity() { return velocity_; }
  const std::vector<Tensor<S>>& velocity() const { return velocity_; }

 private:
  SgdConfig cfg_;
  std::vector<Tensor<S>> velocity_;
};

inline double cosine_lr_factor(std::size_t step, std::size_t total_steps) {
  if (total_steps <= 1) return 1.0;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

}  // namespace ascood
