#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ascood/core.hpp"
#include "ascood/error.hpp"
#include "ascood/model.hpp"
#include "ascood/tensor.hpp"

namespace ascood {

enum class SynthesisMethod { grad_add, grad_sub, invariant_shuffle, random_shuffle, gaussian_noise, identity };
enum class MaskGranularity { element, pixel };
/// Which scalar the saliency differentiates: the true-class logit or its softmax probability.
enum class SaliencySource { logit, probability };
/// Whether the alpha schedule advances once per epoch or once per optimiser step.
enum class ScheduleGranularity { epoch, step };

struct SynthesisConfig {
  SynthesisMethod method = SynthesisMethod::grad_add;
  double p_inv = 10.0;  ///< percent of entries/pixels treated as invariant
  AlphaSchedule alpha = AlphaSchedule::constant(10.0);
  ScheduleGranularity alpha_granularity = ScheduleGranularity::epoch;
  double noise_scale = 0.1;
  MaskGranularity mask_granularity = MaskGranularity::element;
  SaliencySource saliency = SaliencySource::logit;

  bool operator==(const SynthesisConfig&) const = default;

  void validate() const {
    if (!(p_inv > 0.0 && p_inv <= 100.0)) {
      throw InvalidPercentage("p_inv must lie in (0, 100], got " + std::to_string(p_inv));
    }
    if (noise_scale < 0.0) throw InvalidArgument("noise_scale must be >= 0");
    if (alpha.start < 0.0 || alpha.end < 0.0) throw InvalidArgument("alpha must be >= 0");
    if (alpha.total_steps == 0) throw InvalidArgument("alpha.total_steps must be >= 1");
  }
};

/// Per-image input gradients of the true-class score, same geometry as the source batch.
template <typename S>
struct SaliencyMaps {
  ImageBatch<S> grad;
  std::vector<int> target_class;

  std::size_t size() const { return target_class.size(); }
  std::span<const S> map(std::size_t i) const { return grad.image(i); }
};

/// Boolean selection per image. Element granularity: C*H*W entries per image;
/// pixel granularity: H*W locations per image (all channels move together).
struct InvariantMask {
  MaskGranularity granularity = MaskGranularity::element;
  double p_inv = 100.0;
  std::size_t batch = 0;
  std::size_t per_image = 0;
  std::vector<std::uint8_t> keep;

  bool at(std::size_t image, std::size_t j) const { return keep[image * per_image + j] != 0; }
  std::size_t count(std::size_t image) const {
    return static_cast<std::size_t>(
        std::count(keep.begin() + static_cast<std::ptrdiff_t>(image * per_image),
                   keep.begin() + static_cast<std::ptrdiff_t>((image + 1) * per_image), std::uint8_t{1}));
  }
};

/// Number of entries that fall in the top p percent of n: ceil(p/100 * n), at least 1.
inline std::size_t top_percent_count(double p, std::size_t n) {
  if (!(p > 0.0 && p <= 100.0)) {
    throw InvalidPercentage("percentage must lie in (0, 100], got " + std::to_string(p));
  }
  const double exact = p * static_cast<double>(n) / 100.0;
  auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Marks every score >= the k-th largest score (k = top_percent_count), so ties
/// at the threshold are all kept. Returns the threshold.
template <typename S>
double select_top_percent(std::span<const S> scores, double p, std::span<std::uint8_t> keep) {
  const std::size_t n = scores.size();
  const std::size_t k = top_percent_count(p, n);
  std::vector<S> sorted(scores.begin(), scores.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end(),
                   std::greater<S>{});
  const S threshold = sorted[k - 1];
  for (std::size_t j = 0; j < n; ++j) keep[j] = scores[j] >= threshold ? 1 : 0;
  return static_cast<double>(threshold);
}

template <typename S>
bool all_finite(std::span<const S> v) {
  return std::all_of(v.begin(), v.end(), [](S x) { return std::isfinite(static_cast<double>(x)); });
}

/// d(score of class y_i)/d(x_i) for every image. Model parameters are not touched.
template <typename M>
SaliencyMaps<typename M::scalar_type> compute_saliency(M& model, const ImageBatch<typename M::scalar_type>& x,
                                                        std::span<const int> labels,
                                                        SaliencySource source = SaliencySource::logit) {
  using S = typename M::scalar_type;
  if constexpr (!InputDifferentiable<M>) {
    throw NonDifferentiableModel("model does not expose input gradients");
  } else {
    if (labels.size() != x.batch()) {
      throw ShapeMismatch("compute_saliency: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(x.batch()) + " images");
    }
    Tensor<S> logits = model.logits(x);
    const std::size_t classes = logits.dim(1);
    Tensor<S> seed(logits.shape());
    for (std::size_t i = 0; i < x.batch(); ++i) {
      const auto y = static_cast<std::size_t>(labels[i]);
      if (labels[i] < 0 || y >= classes) throw InvalidArgument("compute_saliency: label out of range");
      if (source == SaliencySource::logit) {
        seed(i, y) = S(1);
      } else {
        const auto p = softmax<S>(logits.slice(i));
        for (std::size_t c = 0; c < classes; ++c) seed(i, c) = p[y] * ((c == y ? S(1) : S(0)) - p[c]);
      }
    }
    SaliencyMaps<S> out{model.input_gradient(x, seed), std::vector<int>(labels.begin(), labels.end())};
    if (!all_finite<S>(out.grad.pixels().values())) throw NumericFailure("saliency map has non-finite entries");
    return out;
  }
}

template <typename S>
struct SparseSaliency {
  SaliencyMaps<S> g_inv;
  InvariantMask mask;
};

/// Zeroes the low-magnitude saliency entries of each image, keeping the top p_inv percent.
/// Element granularity ranks |G| over all C*H*W entries; pixel granularity ranks
/// H*W locations by sum over channels of exp(G).
template <typename S>
SparseSaliency<S> sparsify(const SaliencyMaps<S>& g, double p_inv, MaskGranularity granularity) {
  if (!(p_inv > 0.0 && p_inv <= 100.0)) {
    throw InvalidPercentage("p_inv must lie in (0, 100], got " + std::to_string(p_inv));
  }
  const auto& grad = g.grad;
  const std::size_t n = grad.batch(), channels = grad.channels(), plane = grad.plane_size();
  InvariantMask mask;
  mask.granularity = granularity;
  mask.p_inv = p_inv;
  mask.batch = n;
  mask.per_image = granularity == MaskGranularity::element ? grad.image_size() : plane;
  mask.keep.assign(n * mask.per_image, 0);

  SparseSaliency<S> out{SaliencyMaps<S>{grad.zeros_like(), g.target_class}, std::move(mask)};
  std::vector<S> score(out.mask.per_image);
  for (std::size_t i = 0; i < n; ++i) {
    auto src = grad.image(i);
    auto dst = out.g_inv.grad.image(i);
    std::span<std::uint8_t> keep(out.mask.keep.data() + i * out.mask.per_image, out.mask.per_image);
    if (granularity == MaskGranularity::element) {
      for (std::size_t j = 0; j < src.size(); ++j) score[j] = std::abs(src[j]);
      select_top_percent<S>(score, p_inv, keep);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] = keep[j] ? src[j] : S(0);
    } else {
      std::fill(score.begin(), score.end(), S(0));
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t q = 0; q < plane; ++q) score[q] += std::exp(src[c * plane + q]);
      }
      select_top_percent<S>(score, p_inv, keep);
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t q = 0; q < plane; ++q) dst[c * plane + q] = keep[q] ? src[c * plane + q] : S(0);
      }
    }
  }
  return out;
}

/// x' = x + sign * alpha * G_inv. No clamping to the input value range.
template <typename S>
ImageBatch<S> synthesize_grad(const ImageBatch<S>& x, const SaliencyMaps<S>& g_inv, double alpha, int sign) {
  if (x.shape() != g_inv.grad.shape()) {
    throw ShapeMismatch("synthesize_grad: image " + shape_string(x.shape()) + " vs saliency " +
                        shape_string(g_inv.grad.shape()));
  }
  if (alpha < 0.0) throw InvalidArgument("synthesize_grad: alpha must be >= 0");
  if (sign != 1 && sign != -1) throw InvalidArgument("synthesize_grad: sign must be +1 or -1");
  ImageBatch<S> out = x;
  const S step = static_cast<S>(sign * alpha);
  auto& dst = out.pixels();
  const auto& g = g_inv.grad.pixels();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += step * g[i];
  return out;
}

/// Permutes whole pixels (all channels together) among the masked locations of each image.
template <typename S, typename Rng>
ImageBatch<S> synthesize_shuffle(const ImageBatch<S>& x, const InvariantMask& mask, Rng& rng) {
  if (mask.granularity != MaskGranularity::pixel) {
    throw InvalidArgument("synthesize_shuffle needs a pixel-granularity mask");
  }
  if (mask.batch != x.batch() || mask.per_image != x.plane_size()) {
    throw ShapeMismatch("synthesize_shuffle: mask does not match image geometry");
  }
  ImageBatch<S> out = x;
  const std::size_t channels = x.channels(), plane = x.plane_size();
  std::vector<std::size_t> locations;
  for (std::size_t i = 0; i < x.batch(); ++i) {
    locations.clear();
    for (std::size_t q = 0; q < plane; ++q) {
      if (mask.at(i, q)) locations.push_back(q);
    }
    if (locations.empty()) throw EmptyMask("image " + std::to_string(i) + " has no masked pixels");
    std::vector<std::size_t> source = locations;
    std::shuffle(source.begin(), source.end(), rng);
    auto src = x.image(i);
    auto dst = out.image(i);
    for (std::size_t k = 0; k < locations.size(); ++k) {
      for (std::size_t c = 0; c < channels; ++c) dst[c * plane + locations[k]] = src[c * plane + source[k]];
    }
  }
  return out;
}

/// Uniformly random pixel-granularity mask covering top_percent_count(p_inv, H*W) locations.
template <typename Rng>
InvariantMask random_pixel_mask(std::size_t batch, std::size_t plane, double p_inv, Rng& rng) {
  InvariantMask mask{MaskGranularity::pixel, p_inv, batch, plane, std::vector<std::uint8_t>(batch * plane, 0)};
  const std::size_t k = top_percent_count(p_inv, plane);
  std::vector<std::size_t> idx(plane);
  for (std::size_t i = 0; i < batch; ++i) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < k; ++j) mask.keep[i * plane + idx[j]] = 1;
  }
  return mask;
}

/// x' = x + noise_scale * N(0, I). No clamping.
template <typename S, typename Rng>
ImageBatch<S> synthesize_gaussian(const ImageBatch<S>& x, double noise_scale, Rng& rng) {
  if (noise_scale < 0.0) throw InvalidArgument("noise_scale must be >= 0");
  ImageBatch<S> out = x;
  if (noise_scale == 0.0) return out;
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : out.pixels().values()) v += static_cast<S>(noise_scale * dist(rng));
  return out;
}

template <typename S>
struct SynthesisResult {
  ImageBatch<S> outliers;
  std::optional<SaliencyMaps<S>> g_inv;
  std::optional<InvariantMask> mask;
  double alpha = 0.0;
};

/// Builds virtual outliers for one batch. The result is detached: it holds plain
/// pixel values and carries no link back to the model.
template <typename M, typename Rng>
SynthesisResult<typename M::scalar_type> synthesize_detailed(M& model, const ImageBatch<typename M::scalar_type>& x,
                                                            std::span<const int> labels, const SynthesisConfig& cfg,
                                                            std::size_t step, Rng& rng) {
  using S = typename M::scalar_type;
  cfg.validate();
  SynthesisResult<S> out;
  switch (cfg.method) {
    case SynthesisMethod::identity:
      out.outliers = x;
      return out;
    case SynthesisMethod::gaussian_noise:
      out.outliers = synthesize_gaussian(x, cfg.noise_scale, rng);
      return out;
    case SynthesisMethod::random_shuffle: {
      InvariantMask mask = random_pixel_mask(x.batch(), x.plane_size(), cfg.p_inv, rng);
      out.outliers = synthesize_shuffle(x, mask, rng);
      out.mask = std::move(mask);
      return out;
    }
    case SynthesisMethod::invariant_shuffle: {
      auto sparse = sparsify(compute_saliency(model, x, labels, cfg.saliency), cfg.p_inv, MaskGranularity::pixel);
      out.outliers = synthesize_shuffle(x, sparse.mask, rng);
      out.g_inv = std::move(sparse.g_inv);
      out.mask = std::move(sparse.mask);
      return out;
    }
    case SynthesisMethod::grad_add:
    case SynthesisMethod::grad_sub: {
      out.alpha = alpha_at(cfg.alpha, step);
      auto sparse = sparsify(compute_saliency(model, x, labels, cfg.saliency), cfg.p_inv, cfg.mask_granularity);
      const int sign = cfg.method == SynthesisMethod::grad_add ? 1 : -1;
      out.outliers = synthesize_grad(x, sparse.g_inv, out.alpha, sign);
      out.g_inv = std::move(sparse.g_inv);
      out.mask = std::move(sparse.mask);
      return out;
    }
  }
  throw InvalidArgument("unknown synthesis method");
}

template <typename M, typename Rng>
ImageBatch<typename M::scalar_type> synthesize(M& model, const ImageBatch<typename M::scalar_type>& x,
                                               std::span<const int> labels, const SynthesisConfig& cfg,
                                               std::size_t step, Rng& rng) {
  return synthesize_detailed(model, x, labels, cfg, step, rng).outliers;
}

}  // namespace ascood
