#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ascood/error.hpp"
#include "ascood/tensor.hpp"

namespace ascood {

// ---------------------------------------------------------------------------
// Softmax helpers. Generic over the scalar so forward-mode duals flow through.
// ---------------------------------------------------------------------------

template <typename T>
T log_sum_exp(std::span<const T> z) {
  using std::exp;
  using std::log;
  T top = z[0];
  for (const T& v : z) {
    if (top < v) top = v;
  }
  T acc = T(0);
  for (const T& v : z) acc += exp(v - top);
  return top + log(acc);
}

template <typename T>
std::vector<T> softmax(std::span<const T> z) {
  using std::exp;
  T top = z[0];
  for (const T& v : z) {
    if (top < v) top = v;
  }
  std::vector<T> p(z.size());
  T acc = T(0);
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = exp(z[i] - top);
    acc += p[i];
  }
  for (auto& v : p) v = v / acc;
  return p;
}

template <typename T>
std::vector<T> softmax(std::span<const T> z, double temperature) {
  std::vector<T> scaled(z.begin(), z.end());
  for (auto& v : scaled) v = v / temperature;
  return softmax<T>(std::span<const T>(scaled));
}

// ---------------------------------------------------------------------------
// Feature standardisation
// ---------------------------------------------------------------------------

/// Raw penultimate feature h.
template <typename T>
class FeatureVector {
 public:
  explicit FeatureVector(std::vector<T> values) : values_(std::move(values)) {
    if (values_.size() < 2) {
      throw InvalidArgument("feature vector needs m >= 2, got m = " +
                            std::to_string(values_.size()));
    }
  }
  std::span<const T> values() const { return values_; }
  std::size_t dim() const { return values_.size(); }

 private:
  std::vector<T> values_;
};

/// Zero-mean feature rescaled to sample standard deviation sigma.
/// Its Euclidean norm is sigma * sqrt(m - 1).
template <typename T>
struct StandardizedFeature {
  std::vector<T> values;
  double sigma = 0.5;

  T norm() const {
    T acc = T(0);
    for (const T& v : values) acc += v * v;
    using std::sqrt;
    return sqrt(acc);
  }
  static double expected_norm(std::size_t m, double sigma) {
    return sigma * std::sqrt(static_cast<double>(m - 1));
  }
};

inline constexpr double kMinFeatureStd = 1e-12;

/// Writes sigma * (h - mean) / std into `out` and returns the sample std
/// (m - 1 denominator). Throws DegenerateFeature for a near-constant row.
template <typename T>
T standardize_row(std::span<const T> h, std::span<T> out, double sigma) {
  const std::size_t m = h.size();
  if (m < 2) throw InvalidArgument("standardize: need m >= 2");
  T mean = T(0);
  for (const T& v : h) mean += v;
  mean /= static_cast<T>(m);
  T ss = T(0);
  for (const T& v : h) ss += (v - mean) * (v - mean);
  using std::sqrt;
  const T sd = sqrt(ss / static_cast<T>(m - 1));
  if (!(sd >= T(kMinFeatureStd))) {
    throw DegenerateFeature("feature sample std " + std::to_string(static_cast<double>(sd)) +
                            " below 1e-12; standardisation undefined");
  }
  const T scale = static_cast<T>(sigma) / sd;
  for (std::size_t i = 0; i < m; ++i) out[i] = (h[i] - mean) * scale;
  return sd;
}

/// Gradient of the standardised row w.r.t. the raw row.
/// `out` is the forward result, `sd` the std returned by standardize_row.
template <typename T>
void standardize_row_backward(std::span<const T> out, T sd, double sigma, std::span<const T> grad_out,
                              std::span<T> grad_in) {
  const std::size_t m = out.size();
  T mean_g = T(0);
  T dot = T(0);
  const T inv_sigma = T(1) / static_cast<T>(sigma);
  for (std::size_t i = 0; i < m; ++i) {
    mean_g += grad_out[i];
    dot += grad_out[i] * out[i] * inv_sigma;
  }
  mean_g /= static_cast<T>(m);
  dot /= static_cast<T>(m - 1);
  const T scale = static_cast<T>(sigma) / sd;
  for (std::size_t i = 0; i < m; ++i) {
    grad_in[i] = scale * (grad_out[i] - mean_g - out[i] * inv_sigma * dot);
  }
}

template <typename T>
StandardizedFeature<T> standardize(const FeatureVector<T>& h, double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument("standardize: sigma must be > 0");
  StandardizedFeature<T> out{std::vector<T>(h.dim()), sigma};
  standardize_row<T>(h.values(), out.values, sigma);
  return out;
}

// ---------------------------------------------------------------------------
// Joint objective: cross-entropy on ID logits + lambda * KL(softmax || uniform)
// on outlier logits. Both terms are batch means.
// ---------------------------------------------------------------------------

template <typename T>
struct LossBreakdown {
  T ce = T(0);
  T kl = T(0);
  double lambda = 0.0;
  T total = T(0);
};

namespace detail {

inline void require_rank2(const Shape& s, const char* what) {
  if (s.size() != 2) throw ShapeMismatch(std::string(what) + " must be rank 2, got " + shape_string(s));
}

template <typename T>
void check_one_hot(const Tensor<T>& labels) {
  for (std::size_t r = 0; r < labels.dim(0); ++r) {
    int ones = 0;
    for (std::size_t c = 0; c < labels.dim(1); ++c) {
      const double v = static_cast<double>(labels(r, c));
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        throw InvalidArgument("labels row " + std::to_string(r) + " is not one-hot");
      }
    }
    if (ones != 1) throw InvalidArgument("labels row " + std::to_string(r) + " is not one-hot");
  }
}

}  // namespace detail

/// Mean cross-entropy of softmax(logits) against one-hot labels.
template <typename T>
T cross_entropy(const Tensor<T>& logits, const Tensor<T>& labels) {
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  T acc = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    auto z = logits.slice(r);
    T row = log_sum_exp(z);
    for (std::size_t c = 0; c < classes; ++c) row -= labels(r, c) * z[c];
    acc += row;
  }
  return acc / static_cast<T>(rows);
}

/// Mean over rows of KL(softmax(logits) || Uniform(C)).
template <typename T>
T kl_to_uniform(const Tensor<T>& logits) {
  using std::log;
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  const double log_c = std::log(static_cast<double>(classes));
  T acc = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    auto z = logits.slice(r);
    T top = z[0];
    for (const T& v : z) {
      if (top < v) top = v;
    }
    T sum = T(0);
    for (const T& v : z) {
      using std::exp;
      sum += exp(v - top);
    }
    const T log_sum = log(sum);
    // sum p_c (log p_c + log C), zero exactly for equal logits
    T row = T(0);
    for (std::size_t c = 0; c < classes; ++c) {
      using std::exp;
      const T log_p = (z[c] - top) - log_sum;
      row += exp(log_p) * (log_p + T(log_c));
    }
    acc += row;
  }
  T kl = acc / static_cast<T>(rows);
  if (kl < T(0)) kl = T(0);  // rounding only; KL is nonnegative
  return kl;
}

/// `labels` is one-hot [B x C]; `logits_ood` may have a different row count but must share C.
/// An empty outlier batch contributes kl = 0.
template <typename T>
LossBreakdown<T> loss_total(const Tensor<T>& logits_id, const Tensor<T>& labels,
                            const Tensor<T>& logits_ood, double lambda) {
  detail::require_rank2(logits_id.shape(), "logits_id");
  detail::require_rank2(labels.shape(), "labels");
  detail::require_rank2(logits_ood.shape(), "logits_ood");
  const std::size_t classes = logits_id.dim(1);
  if (labels.shape() != logits_id.shape()) {
    throw ShapeMismatch("labels " + shape_string(labels.shape()) + " vs logits_id " +
                        shape_string(logits_id.shape()));
  }
  if (logits_ood.dim(1) != classes) {
    throw ShapeMismatch("class count differs: logits_id has " + std::to_string(classes) +
                        ", logits_ood has " + std::to_string(logits_ood.dim(1)));
  }
  if (classes < 2) throw InvalidArgument("loss_total: need C >= 2");
  if (logits_id.dim(0) == 0) throw InvalidArgument("loss_total: empty ID batch");
  if (lambda < 0.0) throw InvalidArgument("loss_total: lambda must be >= 0");
  detail::check_one_hot(labels);

  LossBreakdown<T> out;
  out.ce = cross_entropy(logits_id, labels);
  out.kl = logits_ood.dim(0) ? kl_to_uniform(logits_ood) : T(0);
  out.lambda = lambda;
  out.total = out.ce + static_cast<T>(lambda) * out.kl;
  return out;
}

template <typename T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor<T> out(Shape{labels.size(), classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw InvalidArgument("label " + std::to_string(labels[r]) + " out of range");
    }
    out(r, static_cast<std::size_t>(labels[r])) = T(1);
  }
  return out;
}

/// Closed-form logit gradient of L_CE + L_KL for a single ID row and a single
/// outlier row: row 0 is p_id - y, row 1 is p_ood - 1/C.
inline Tensor<double> analytic_logit_gradient(std::span<const double> p_id, std::span<const double> y,
                                              std::span<const double> p_ood, std::size_t classes) {
  if (p_id.size() != classes || y.size() != classes || p_ood.size() != classes) {
    throw ShapeMismatch("analytic_logit_gradient: vectors must have length C = " +
                        std::to_string(classes));
  }
  auto check_prob = [](std::span<const double> p, const char* what) {
    double s = 0.0;
    for (double v : p) {
      if (v < 0.0) throw InvalidArgument(std::string(what) + " has a negative entry");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw InvalidArgument(std::string(what) + " does not sum to 1");
  };
  check_prob(p_id, "p_id");
  check_prob(y, "y");
  check_prob(p_ood, "p_ood");
  Tensor<double> g(Shape{2, classes});
  for (std::size_t k = 0; k < classes; ++k) {
    g(0, k) = p_id[k] - y[k];
    g(1, k) = p_ood[k] - 1.0 / static_cast<double>(classes);
  }
  return g;
}

/// Batch logit gradients of loss_total, including the 1/B and lambda/B' scaling.
template <typename T>
struct LogitGradients {
  Tensor<T> id;
  Tensor<T> ood;
};

/// d(mean CE)/d(logits) = (softmax(z) - y) / B.
template <typename T>
Tensor<T> ce_logit_gradient(const Tensor<T>& logits, std::span<const int> labels) {
  if (labels.size() != logits.dim(0)) throw ShapeMismatch("ce_logit_gradient: label count");
  const std::size_t classes = logits.dim(1);
  Tensor<T> g(logits.shape());
  const T inv_b = T(1) / static_cast<T>(logits.dim(0));
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    const auto p = softmax(logits.slice(r));
    for (std::size_t c = 0; c < classes; ++c) {
      const T y = static_cast<std::size_t>(labels[r]) == c ? T(1) : T(0);
      g(r, c) = (p[c] - y) * inv_b;
    }
  }
  return g;
}

/// d(lambda * mean KL(softmax(z) || U))/d(logits) = lambda * p_k (log p_k - sum_j p_j log p_j) / B'.
template <typename T>
Tensor<T> kl_logit_gradient(const Tensor<T>& logits, double lambda) {
  const std::size_t classes = logits.dim(1);
  Tensor<T> g(logits.shape());
  if (logits.dim(0) == 0) return g;
  const T scale = static_cast<T>(lambda) / static_cast<T>(logits.dim(0));
  std::vector<T> log_p(classes);
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    auto z = logits.slice(r);
    const T lse = log_sum_exp(z);
    T neg_entropy = T(0);
    for (std::size_t c = 0; c < classes; ++c) {
      log_p[c] = z[c] - lse;
      neg_entropy += std::exp(log_p[c]) * log_p[c];
    }
    for (std::size_t c = 0; c < classes; ++c) g(r, c) = std::exp(log_p[c]) * (log_p[c] - neg_entropy) * scale;
  }
  return g;
}

template <typename T>
LogitGradients<T> loss_logit_gradients(const Tensor<T>& logits_id, std::span<const int> labels,
                                       const Tensor<T>& logits_ood, double lambda) {
  if (logits_ood.dim(1) != logits_id.dim(1)) throw ShapeMismatch("loss_logit_gradients: class count differs");
  return {ce_logit_gradient(logits_id, labels), kl_logit_gradient(logits_ood, lambda)};
}

// ---------------------------------------------------------------------------
// Perturbation-strength schedule
// ---------------------------------------------------------------------------

enum class ScheduleMode { constant, linear };

struct AlphaSchedule {
  double start = 10.0;
  double end = 10.0;
  std::size_t total_steps = 1;
  ScheduleMode mode = ScheduleMode::constant;

  static AlphaSchedule constant(double value) { return {value, value, 1, ScheduleMode::constant}; }
  static AlphaSchedule linear(double from, double to, std::size_t steps) {
    if (steps == 0) throw InvalidArgument("alpha schedule needs total_steps >= 1");
    return {from, to, steps, ScheduleMode::linear};
  }
  bool operator==(const AlphaSchedule&) const = default;
};

inline double alpha_at(const AlphaSchedule& s, std::size_t step) {
  if (s.mode == ScheduleMode::constant) return s.start;
  if (step >= s.total_steps) {
    throw StepOutOfRange("alpha step " + std::to_string(step) + " outside [0, " +
                         std::to_string(s.total_steps) + ")");
  }
  if (s.total_steps == 1) return s.start;
  const double t = static_cast<double>(step) / static_cast<double>(s.total_steps - 1);
  return s.start + (s.end - s.start) * t;
}

}  // namespace ascood
