#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ascood/core.hpp"
#include "ascood/data.hpp"
#include "ascood/error.hpp"
#include "ascood/model.hpp"
#include "ascood/synthesis.hpp"

namespace ascood {

struct EpochStats {
  std::size_t epoch = 0;
  double ce = 0.0;
  double kl = 0.0;
  double total = 0.0;
  double accuracy = 0.0;  ///< percent, on the (augmented) training batches
  double alpha = 0.0;     ///< perturbation strength used in the last batch
  double lr = 0.0;
  std::size_t batches = 0;
  bool operator==(const EpochStats&) const = default;
};

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  bool cosine_lr = true;
  bool shuffle = true;
  /// Check the standardised-feature norm every this many batches (0 disables).
  std::size_t norm_check_interval = 25;
};

/// Everything that advances across epochs: counters and the two random streams.
/// Data order/augmentation and outlier synthesis draw from separate generators so
/// the synthesis method cannot perturb the data stream.
struct TrainState {
  std::size_t epoch = 0;
  std::size_t global_step = 0;
  std::mt19937_64 data_rng;
  std::mt19937_64 synth_rng;

  static TrainState seeded(std::uint64_t seed) {
    std::seed_seq data_seq{seed, std::uint64_t{1}};
    std::seed_seq synth_seq{seed, std::uint64_t{2}};
    TrainState s;
    s.data_rng.seed(data_seq);
    s.synth_rng.seed(synth_seq);
    return s;
  }
};

namespace detail {

template <typename S>
double batch_accuracy(const Tensor<S>& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    auto z = logits.slice(i);
    const auto pred = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    hits += pred == labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits);
}

template <typename S>
void check_norms(const Classifier<S>& model, const ForwardOutput<S>& out) {
  if (model.config().feature_mode != FeatureMode::standardized) return;
  const std::size_t m = out.std_features.dim(1);
  const double expected = StandardizedFeature<S>::expected_norm(m, model.config().sigma);
  const double tol = std::is_same_v<S, float> ? 1e-4 : 1e-9;
  for (std::size_t r = 0; r < out.std_features.dim(0); ++r) {
    double sq = 0.0;
    for (S v : out.std_features.slice(r)) sq += static_cast<double>(v) * static_cast<double>(v);
    if (std::abs(std::sqrt(sq) - expected) > tol * expected) {
      throw NumericFailure("standardised feature norm " + std::to_string(std::sqrt(sq)) + " != " +
                           std::to_string(expected));
    }
  }
}

inline std::size_t alpha_step(const SynthesisConfig& cfg, const TrainState& state) {
  return cfg.alpha_granularity == ScheduleGranularity::epoch ? state.epoch : state.global_step;
}

inline double lr_factor(const TrainOptions& opts, const TrainState& state, std::size_t steps_per_epoch) {
  if (!opts.cosine_lr) return 1.0;
  return cosine_lr_factor(state.global_step, opts.epochs * steps_per_epoch);
}

}  // namespace detail

/// One pass over the training set with the joint objective
/// L_CE(x) + lambda * L_KL(x'), x' synthesised from the pre-update model.
template <typename S>
EpochStats train_epoch(Classifier<S>& model, const BatchMaker<S>& data, const SynthesisConfig& synthesis,
                       double lambda, Sgd<S>& optimizer, const TrainOptions& opts, TrainState& state) {
  synthesis.validate();
  if (lambda < 0.0) throw InvalidArgument("lambda must be >= 0");
  const auto batches = epoch_batches(data.set().size(), opts.batch_size, opts.shuffle, state.data_rng);
  EpochStats stats;
  stats.epoch = state.epoch;
  std::size_t seen = 0;
  double hits = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& idx = batches[b];
    const ImageBatch<S> x = data.make(idx, true, state.data_rng);
    const std::vector<int> y = data.labels(idx);

    auto synth = synthesize_detailed(model, x, y, synthesis, detail::alpha_step(synthesis, state), state.synth_rng);

    model.zero_grad();
    const auto out_id = model.forward(x);
    if (opts.norm_check_interval && b % opts.norm_check_interval == 0) detail::check_norms(model, out_id);
    model.backward(ce_logit_gradient(out_id.logits, y));
    const double ce = static_cast<double>(cross_entropy(out_id.logits, one_hot<S>(y, out_id.logits.dim(1))));
    const double acc = detail::batch_accuracy(out_id.logits, y);

    const auto out_ood = model.forward(synth.outliers);
    model.backward(kl_logit_gradient(out_ood.logits, lambda));
    const double kl = static_cast<double>(kl_to_uniform(out_ood.logits));

    const double total = ce + lambda * kl;
    if (!std::isfinite(total)) throw NumericFailure("non-finite loss at epoch " + std::to_string(state.epoch));

    stats.lr = optimizer.config().lr * detail::lr_factor(opts, state, batches.size());
    optimizer.step(model.parameters(), detail::lr_factor(opts, state, batches.size()));

    stats.ce += ce * static_cast<double>(idx.size());
    stats.kl += kl * static_cast<double>(idx.size());
    hits += acc;
    seen += idx.size();
    stats.alpha = synth.alpha;
    ++state.global_step;
  }
  stats.batches = batches.size();
  stats.ce /= static_cast<double>(seen);
  stats.kl /= static_cast<double>(seen);
  stats.total = stats.ce + lambda * stats.kl;
  stats.accuracy = 100.0 * hits / static_cast<double>(seen);
  ++state.epoch;
  return stats;
}

/// Plain cross-entropy training; the reference trajectory for the degenerate joint configuration.
template <typename S>
EpochStats train_epoch_ce(Classifier<S>& model, const BatchMaker<S>& data, Sgd<S>& optimizer,
                          const TrainOptions& opts, TrainState& state) {
  const auto batches = epoch_batches(data.set().size(), opts.batch_size, opts.shuffle, state.data_rng);
  EpochStats stats;
  stats.epoch = state.epoch;
  std::size_t seen = 0;
  double hits = 0.0;
  for (const auto& idx : batches) {
    const ImageBatch<S> x = data.make(idx, true, state.data_rng);
    const std::vector<int> y = data.labels(idx);
    model.zero_grad();
    const auto out = model.forward(x);
    model.backward(ce_logit_gradient(out.logits, y));
    const double ce = static_cast<double>(cross_entropy(out.logits, one_hot<S>(y, out.logits.dim(1))));
    if (!std::isfinite(ce)) throw NumericFailure("non-finite loss at epoch " + std::to_string(state.epoch));
    stats.lr = optimizer.config().lr * detail::lr_factor(opts, state, batches.size());
    optimizer.step(model.parameters(), detail::lr_factor(opts, state, batches.size()));
    stats.ce += ce * static_cast<double>(idx.size());
    hits += detail::batch_accuracy(out.logits, y);
    seen += idx.size();
    ++state.global_step;
  }
  stats.batches = batches.size();
  stats.ce /= static_cast<double>(seen);
  stats.total = stats.ce;
  stats.accuracy = 100.0 * hits / static_cast<double>(seen);
  ++state.epoch;
  return stats;
}

/// Top-1 accuracy (percent) over a labeled set, evaluated in chunks.
template <typename S>
double evaluate_accuracy(Classifier<S>& model, const BatchMaker<S>& data, std::size_t chunk = 128) {
  std::mt19937_64 unused(0);
  double hits = 0.0;
  const auto batches = epoch_batches(data.set().size(), chunk, false, unused);
  for (const auto& idx : batches) {
    const auto x = data.make(idx, false, unused);
    hits += detail::batch_accuracy(model.logits(x), data.labels(idx));
  }
  return 100.0 * hits / static_cast<double>(data.set().size());
}

}  // namespace ascood
