#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ascood/core.hpp"
#include "ascood/error.hpp"
#include "ascood/metrics.hpp"
#include "ascood/model.hpp"
#include "ascood/synthesis.hpp"
#include "ascood/tensor.hpp"

namespace ascood {

/// Where the ODIN input perturbation is applied.
enum class OdinMask {
  none,          ///< every input element (classic ODIN)
  topk_percent,  ///< the top p_inv percent of |grad| per image
  top_channel,   ///< per pixel, only the channel with the largest |grad|
};

struct OdinConfig {
  double temperature = 1000.0;
  double epsilon = 0.0014;
  OdinMask mask_mode = OdinMask::none;
  double p_inv = 10.0;
  bool operator==(const OdinConfig&) const = default;
};

/// Higher score = more in-distribution, for every postprocessor.
struct ScoreBatch {
  std::vector<double> scores;
  std::string postprocessor;
};

inline constexpr std::size_t kScoreChunk = 64;

namespace detail {

template <typename M, typename Fn>
ScoreBatch score_in_chunks(M& model, const ImageBatch<typename M::scalar_type>& x, std::string name, Fn&& per_chunk) {
  ScoreBatch out{{}, std::move(name)};
  out.scores.reserve(x.batch());
  for (std::size_t first = 0; first < x.batch(); first += kScoreChunk) {
    const std::size_t count = std::min(kScoreChunk, x.batch() - first);
    auto chunk = first == 0 && count == x.batch() ? x : x.subset(first, count);
    per_chunk(model, chunk, out.scores);
  }
  for (double s : out.scores) {
    if (!std::isfinite(s)) throw NumericFailure(out.postprocessor + " produced a non-finite score");
  }
  return out;
}

template <typename S>
double max_softmax(std::span<const S> z, double temperature) {
  std::vector<double> zd(z.begin(), z.end());
  const auto p = softmax<double>(std::span<const double>(zd), temperature);
  return *std::max_element(p.begin(), p.end());
}

}  // namespace detail

template <LogitModel M>
ScoreBatch score_msp(M& model, const ImageBatch<typename M::scalar_type>& x) {
  return detail::score_in_chunks(model, x, "msp", [](M& m, const auto& chunk, std::vector<double>& out) {
    const auto logits = m.logits(chunk);
    for (std::size_t i = 0; i < logits.dim(0); ++i) out.push_back(detail::max_softmax(logits.slice(i), 1.0));
  });
}

/// Max softmax probability at temperature T (no input perturbation).
template <LogitModel M>
ScoreBatch score_temperature(M& model, const ImageBatch<typename M::scalar_type>& x, double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  return detail::score_in_chunks(model, x, "tempscale", [&](M& m, const auto& chunk, std::vector<double>& out) {
    const auto logits = m.logits(chunk);
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
      out.push_back(detail::max_softmax(logits.slice(i), temperature));
    }
  });
}

/// T * log sum_i exp(z_i / T).
template <LogitModel M>
ScoreBatch score_energy(M& model, const ImageBatch<typename M::scalar_type>& x, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  return detail::score_in_chunks(model, x, "energy", [&](M& m, const auto& chunk, std::vector<double>& out) {
    const auto logits = m.logits(chunk);
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
      auto z = logits.slice(i);
      std::vector<double> scaled(z.size());
      for (std::size_t c = 0; c < z.size(); ++c) scaled[c] = static_cast<double>(z[c]) / temperature;
      out.push_back(temperature * log_sum_exp<double>(scaled));
    }
  });
}

/// Perturbation mask for one batch of input gradients (1 = perturb).
template <typename S>
std::vector<std::uint8_t> odin_mask(const ImageBatch<S>& grad, OdinMask mode, double p_inv) {
  const std::size_t n = grad.batch(), per = grad.image_size(), channels = grad.channels(), plane = grad.plane_size();
  std::vector<std::uint8_t> mask(n * per, 0);
  switch (mode) {
    case OdinMask::none:
      std::fill(mask.begin(), mask.end(), std::uint8_t{1});
      break;
    case OdinMask::topk_percent: {
      std::vector<S> mag(per);
      for (std::size_t i = 0; i < n; ++i) {
        auto g = grad.image(i);
        for (std::size_t j = 0; j < per; ++j) mag[j] = std::abs(g[j]);
        select_top_percent<S>(mag, p_inv, std::span<std::uint8_t>(mask.data() + i * per, per));
      }
      break;
    }
    case OdinMask::top_channel:
      for (std::size_t i = 0; i < n; ++i) {
        auto g = grad.image(i);
        for (std::size_t q = 0; q < plane; ++q) {
          std::size_t best = 0;
          for (std::size_t c = 1; c < channels; ++c) {
            if (std::abs(g[c * plane + q]) > std::abs(g[best * plane + q])) best = c;
          }
          mask[i * per + best * plane + q] = 1;
        }
      }
      break;
  }
  return mask;
}

/// x~ = x - eps * sign(-grad_x log S_max(x; T)) (masked), score = max_i S_i(x~; T).
template <LogitModel M>
ScoreBatch score_odin(M& model, const ImageBatch<typename M::scalar_type>& x, const OdinConfig& cfg) {
  using S = typename M::scalar_type;
  if (!(cfg.temperature > 0.0)) throw InvalidArgument("ODIN temperature must be > 0");
  if (cfg.epsilon < 0.0) throw InvalidArgument("ODIN epsilon must be >= 0");
  if (cfg.mask_mode == OdinMask::topk_percent && !(cfg.p_inv > 0.0 && cfg.p_inv <= 100.0)) {
    throw InvalidPercentage("ODIN p_inv must lie in (0, 100]");
  }
  std::string name = cfg.mask_mode == OdinMask::none ? "odin"
                     : cfg.mask_mode == OdinMask::topk_percent ? "iodin"
                                                               : "iodin_channel";
  if (cfg.epsilon == 0.0) {
    auto out = score_temperature(model, x, cfg.temperature);
    out.postprocessor = name;
    return out;
  }
  if constexpr (!InputDifferentiable<M>) {
    throw NonDifferentiableModel("ODIN input preprocessing needs input gradients");
  } else {
    return detail::score_in_chunks(model, x, name, [&](M& m, const ImageBatch<S>& chunk, std::vector<double>& out) {
      const auto logits = m.logits(chunk);
      const std::size_t classes = logits.dim(1);
      // d log S_k / d z = (e_k - S(z/T)) / T for the arg-max class k.
      Tensor<S> seed(logits.shape());
      for (std::size_t i = 0; i < chunk.batch(); ++i) {
        auto z = logits.slice(i);
        std::vector<double> zd(z.begin(), z.end());
        const auto p = softmax<double>(std::span<const double>(zd), cfg.temperature);
        const auto k = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        for (std::size_t c = 0; c < classes; ++c) {
          seed(i, c) = static_cast<S>(((c == k ? 1.0 : 0.0) - p[c]) / cfg.temperature);
        }
      }
      const ImageBatch<S> grad = m.input_gradient(chunk, seed);
      const auto mask = odin_mask(grad, cfg.mask_mode, cfg.p_inv);
      ImageBatch<S> perturbed = chunk;
      auto& px = perturbed.pixels();
      const auto& g = grad.pixels();
      for (std::size_t j = 0; j < px.size(); ++j) {
        if (!mask[j]) continue;
        // x - eps * sign(-g) == x + eps * sign(g); sign(0) = 0.
        const S sgn = g[j] > S(0) ? S(1) : (g[j] < S(0) ? S(-1) : S(0));
        px[j] += static_cast<S>(cfg.epsilon) * sgn;
      }
      const auto logits2 = m.logits(perturbed);
      for (std::size_t i = 0; i < logits2.dim(0); ++i) {
        out.push_back(detail::max_softmax(logits2.slice(i), cfg.temperature));
      }
    });
  }
}

struct OdinGrid {
  std::vector<double> temperatures = {1.0, 10.0, 100.0, 1000.0};
  std::vector<double> epsilons = {0.0014, 0.0028, 0.0042, 0.0056, 0.0070, 0.0084, 0.0098};
  OdinMask mask_mode = OdinMask::none;
  double p_inv = 10.0;
};

struct OdinTuning {
  OdinConfig best;
  double auroc = 0.0;
};

/// Exhaustive grid search for the highest validation AUROC. Ties go to the
/// smallest epsilon, then the smallest temperature.
template <LogitModel M>
OdinTuning tune_odin(M& model, const ImageBatch<typename M::scalar_type>& id_val,
                     const ImageBatch<typename M::scalar_type>& ood_val, const OdinGrid& grid) {
  if (grid.temperatures.empty() || grid.epsilons.empty()) throw InvalidArgument("tune_odin: empty grid");
  std::vector<double> eps = grid.epsilons, temps = grid.temperatures;
  std::sort(eps.begin(), eps.end());
  std::sort(temps.begin(), temps.end());
  OdinTuning best;
  best.auroc = -std::numeric_limits<double>::infinity();
  for (double e : eps) {
    for (double t : temps) {
      const OdinConfig cfg{t, e, grid.mask_mode, grid.p_inv};
      const auto s_id = score_odin(model, id_val, cfg);
      const auto s_ood = score_odin(model, ood_val, cfg);
      const double a = auroc(s_id.scores, s_ood.scores);
      if (a > best.auroc) best = {cfg, a};  // strict: earlier (smaller eps, T) wins ties
    }
  }
  return best;
}

/// Temperature minimising the mean negative log-likelihood of `logits` (golden-section on log T).
template <typename S>
double fit_temperature(const Tensor<S>& logits, std::span<const int> labels, double t_min = 0.05,
                       double t_max = 100.0) {
  if (logits.dim(0) == 0 || labels.size() != logits.dim(0)) throw InvalidArgument("fit_temperature: bad input");
  auto nll = [&](double log_t) {
    const double t = std::exp(log_t);
    double acc = 0.0;
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
      auto z = logits.slice(i);
      std::vector<double> scaled(z.size());
      for (std::size_t c = 0; c < z.size(); ++c) scaled[c] = static_cast<double>(z[c]) / t;
      acc += log_sum_exp<double>(scaled) - scaled[static_cast<std::size_t>(labels[i])];
    }
    return acc / static_cast<double>(logits.dim(0));
  };
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(t_min), b = std::log(t_max);
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = nll(c), fd = nll(d);
  for (int it = 0; it < 80; ++it) {
    if (fc < fd) {
      b = d, d = c, fd = fc;
      c = b - phi * (b - a);
      fc = nll(c);
    } else {
      a = c, c = d, fc = fd;
      d = a + phi * (b - a);
      fd = nll(d);
    }
  }
  return std::exp(0.5 * (a + b));
}

}  // namespace ascood
