#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ascood/checkpoint.hpp"
#include "ascood/config.hpp"
#include "ascood/data.hpp"
#include "ascood/metrics.hpp"
#include "ascood/model.hpp"
#include "ascood/postprocess.hpp"
#include "ascood/render.hpp"
#include "ascood/report.hpp"
#include "ascood/synthesis.hpp"
#include "ascood/training.hpp"

namespace ascood {

struct NamedSet {
  std::string name;
  ImageSet set;
};

struct RunData {
  std::optional<ImageSet> train;
  std::optional<ImageSet> val_id;
  std::optional<ImageSet> test_id;
  std::vector<NamedSet> ood;
  std::optional<ImageSet> val_ood;
};

struct DataSelection {
  bool train = true;
  bool eval = true;
};

/// Loads every non-empty reference of the selected phases.
inline RunData load_run_data(const RunConfig& cfg, DataSelection which = {}) {
  RunData d;
  const auto& t = cfg.data.transform;
  auto load = [&](const std::string& ref) -> std::optional<ImageSet> {
    if (ref.empty()) return std::nullopt;
    return load_image_source(ref, t);
  };
  if (which.train) {
    if (cfg.data.train.empty()) throw ConfigParseError("data.train: required for training");
    d.train = load(cfg.data.train);
  }
  if (which.eval) {
    if (cfg.data.test_id.empty()) throw ConfigParseError("data.test_id: required for evaluation");
    d.test_id = load(cfg.data.test_id);
    for (const auto& [name, ref] : cfg.data.ood) d.ood.push_back({name, *load(ref)});
    d.val_ood = load(cfg.data.val_ood);
  }
  d.val_id = load(cfg.data.val_id);
  return d;
}

/// Fills alpha.total_steps == 0 with the length of the run in schedule units.
inline SynthesisConfig resolve_synthesis(SynthesisConfig s, std::size_t epochs, std::size_t steps_per_epoch) {
  if (s.alpha.total_steps == 0) {
    s.alpha.total_steps =
        s.alpha_granularity == ScheduleGranularity::epoch ? epochs : std::max<std::size_t>(1, epochs * steps_per_epoch);
  }
  return s;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) { return (n + batch_size - 1) / batch_size; }

inline TrainOptions train_options(const RunConfig& cfg) {
  TrainOptions o;
  o.epochs = cfg.optimizer.epochs;
  o.batch_size = cfg.optimizer.batch_size;
  o.cosine_lr = cfg.optimizer.cosine;
  return o;
}

/// A plain-CE run: no outlier branch at all.
inline bool is_ce_only(const RunConfig& cfg) {
  return cfg.lambda == 0.0 && cfg.synthesis.method == SynthesisMethod::identity;
}

using EpochCallback = std::function<void(const EpochStats&)>;

/// Model plus all the state a run advances; restartable from a Checkpoint.
template <typename S>
class Run {
 public:
  explicit Run(RunConfig cfg)
      : cfg_(std::move(cfg)),
        model_(cfg_.classifier, cfg_.seed),
        optimizer_(cfg_.optimizer.sgd),
        state_(TrainState::seeded(cfg_.seed)) {
    validate(cfg_);
    if (!cfg_.init_from.empty()) {
      const Checkpoint source = load_checkpoint(cfg_.init_from);
      Classifier<S> pretrained(source.config.classifier, 0);
      restore_weights(source, pretrained);
      model_.copy_backbone_from(pretrained);
    }
  }

  static Run resume(const Checkpoint& c) {
    RunConfig cfg = c.config;
    cfg.init_from.clear();
    Run run(std::move(cfg));
    run.cfg_.init_from = c.config.init_from;
    restore_checkpoint(c, run.model_, run.optimizer_, run.state_);
    run.history_ = c.history;
    return run;
  }

  /// Trains until `epochs` total epochs are done (the config value when omitted).
  void train(const ImageSet& train_set, const EpochCallback& on_epoch = {},
             std::optional<std::size_t> epochs = std::nullopt) {
    const std::size_t target = epochs.value_or(cfg_.optimizer.epochs);
    BatchMaker<S> maker(train_set, cfg_.data.transform);
    auto opts = train_options(cfg_);
    const auto synthesis =
        resolve_synthesis(cfg_.synthesis, opts.epochs, steps_per_epoch(train_set.size(), opts.batch_size));
    while (state_.epoch < target) {
      EpochStats stats = is_ce_only(cfg_) ? train_epoch_ce(model_, maker, optimizer_, opts, state_)
                                          : train_epoch(model_, maker, synthesis, cfg_.lambda, optimizer_, opts, state_);
      history_.push_back(stats);
      if (on_epoch) on_epoch(stats);
    }
  }

  Checkpoint checkpoint() { return capture_checkpoint(cfg_, model_, optimizer_, state_, history_); }

  const RunConfig& config() const { return cfg_; }
  Classifier<S>& model() { return model_; }
  Sgd<S>& optimizer() { return optimizer_; }
  TrainState& state() { return state_; }
  const std::vector<EpochStats>& history() const { return history_; }

 private:
  RunConfig cfg_;
  Classifier<S> model_;
  Sgd<S> optimizer_;
  TrainState state_;
  std::vector<EpochStats> history_;
};

/// Builds a model from a checkpoint for evaluation.
template <typename S>
Classifier<S> model_from_checkpoint(const Checkpoint& c) {
  Classifier<S> model(c.config.classifier, c.config.seed);
  restore_weights(c, model);
  return model;
}

// ---- evaluation ---------------------------------------------------------------

struct ScorerSettings {
  OdinConfig odin;
  OdinConfig iodin;
  OdinConfig iodin_channel;
  double energy_temperature = 1.0;
  double tempscale_temperature = 1.0;
};

template <typename S>
ScoreBatch score_with(Classifier<S>& model, const ImageBatch<S>& x, const std::string& name, const ScorerSettings& s) {
  if (name == "msp") return score_msp(model, x);
  if (name == "tempscale") return score_temperature(model, x, s.tempscale_temperature);
  if (name == "energy") return score_energy(model, x, s.energy_temperature);
  if (name == "odin") return score_odin(model, x, s.odin);
  if (name == "iodin") return score_odin(model, x, s.iodin);
  if (name == "iodin_channel") return score_odin(model, x, s.iodin_channel);
  throw ConfigParseError("eval.postprocessors: unknown value '" + name + "'");
}

struct EvalOutcome {
  EvalReport report;
  std::vector<ScoreRecord> scores;
  ScorerSettings settings;
};

/// Resolves temperature-scaling and (optionally tuned) ODIN settings for a model.
template <typename S>
ScorerSettings resolve_scorers(Classifier<S>& model, const RunConfig& cfg, const RunData& data) {
  ScorerSettings s;
  s.energy_temperature = cfg.eval.energy_temperature;
  s.odin = cfg.eval.odin;
  s.odin.mask_mode = OdinMask::none;
  s.iodin = cfg.eval.odin;
  s.iodin.mask_mode = OdinMask::topk_percent;
  s.iodin_channel = cfg.eval.odin;
  s.iodin_channel.mask_mode = OdinMask::top_channel;
  const auto& pp = cfg.eval.postprocessors;
  auto wants = [&](const char* n) { return std::find(pp.begin(), pp.end(), n) != pp.end(); };

  s.tempscale_temperature = cfg.eval.tempscale_temperature;
  if (s.tempscale_temperature == 0.0) {
    s.tempscale_temperature = 1.0;
    if (wants("tempscale") && data.val_id && data.val_id->num_classes() > 0) {
      BatchMaker<S> maker(*data.val_id, cfg.data.transform);
      const auto x = maker.all();
      Tensor<S> logits = model.logits(x);
      s.tempscale_temperature = fit_temperature(logits, data.val_id->labels);
    }
  }

  if (cfg.eval.tune_odin) {
    if (!data.val_id || !data.val_ood) {
      throw ConfigParseError("eval.tune_odin: needs data.val_id and data.val_ood");
    }
    BatchMaker<S> mid(*data.val_id, cfg.data.transform), mood(*data.val_ood, cfg.data.transform);
    const auto xid = mid.all(), xood = mood.all();
    OdinGrid grid{cfg.eval.odin_temperatures, cfg.eval.odin_epsilons, OdinMask::none, cfg.eval.odin.p_inv};
    for (auto [name, target] : {std::pair{"odin", &s.odin}, std::pair{"iodin", &s.iodin},
                                std::pair{"iodin_channel", &s.iodin_channel}}) {
      if (!wants(name)) continue;
      grid.mask_mode = target->mask_mode;
      *target = tune_odin(model, xid, xood, grid).best;
    }
  }
  return s;
}

template <typename S>
EvalOutcome evaluate_run(Classifier<S>& model, const RunConfig& cfg, const RunData& data) {
  if (!data.test_id) throw ConfigParseError("data.test_id: required for evaluation");
  EvalOutcome out;
  out.settings = resolve_scorers(model, cfg, data);
  out.report.seed = cfg.seed;
  out.report.config_digest = config_digest(cfg);

  BatchMaker<S> id_maker(*data.test_id, cfg.data.transform);
  if (data.test_id->num_classes() > 0) out.report.id_accuracy = evaluate_accuracy(model, id_maker);
  const auto x_id = id_maker.all();
  std::vector<std::pair<std::string, ImageBatch<S>>> ood_batches;
  for (const auto& [name, set] : data.ood) ood_batches.emplace_back(name, BatchMaker<S>(set, cfg.data.transform).all());

  for (const auto& pp : cfg.eval.postprocessors) {
    const auto sid = score_with(model, x_id, pp, out.settings);
    for (std::size_t i = 0; i < sid.scores.size(); ++i) {
      out.scores.push_back({data.test_id->ids[i], true, pp, sid.scores[i], "test_id"});
    }
    for (std::size_t k = 0; k < ood_batches.size(); ++k) {
      const auto& [name, x] = ood_batches[k];
      const auto sood = score_with(model, x, pp, out.settings);
      for (std::size_t i = 0; i < sood.scores.size(); ++i) {
        out.scores.push_back({data.ood[k].set.ids[i], false, pp, sood.scores[i], name});
      }
      out.report.entries.push_back(evaluate_pair("test_id", name, pp, sid.scores, sood.scores));
    }
  }
  return out;
}

// ---- outlier preview ----------------------------------------------------------------

template <typename S>
struct Preview {
  ImageBatch<S> x;
  ImageBatch<S> saliency;  ///< G_inv, or the pixel mask for shuffle methods, or zeros
  ImageBatch<S> outliers;
  double alpha = 0.0;
};

/// Synthesises outliers for the first n labelled images with the run's method at its last schedule step.
template <typename S>
Preview<S> preview_outliers(Classifier<S>& model, const RunConfig& cfg, const ImageSet& set, std::size_t n,
                            std::uint64_t seed) {
  n = std::min(n, set.size());
  if (n == 0) throw EmptySet("preview: no images");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  BatchMaker<S> maker(set, cfg.data.transform);
  std::mt19937_64 rng(seed);
  Preview<S> p{maker.make(idx, false, rng), {}, {}, 0.0};
  auto labels = maker.labels(idx);
  for (auto& l : labels) {
    if (l < 0) throw InvalidArgument("preview: images need class labels");
  }
  const auto synthesis = resolve_synthesis(cfg.synthesis, cfg.optimizer.epochs, 1);
  const std::size_t last = synthesis.alpha.mode == ScheduleMode::linear ? synthesis.alpha.total_steps - 1 : 0;
  auto res = synthesize_detailed(model, p.x, labels, synthesis, last, rng);
  p.outliers = std::move(res.outliers);
  p.alpha = res.alpha;
  if (res.g_inv) {
    p.saliency = std::move(res.g_inv->grad);
  } else {
    p.saliency = p.x.zeros_like();
    if (res.mask) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < p.x.channels(); ++c) {
          for (std::size_t q = 0; q < p.x.plane_size(); ++q) {
            if (res.mask->at(i, q)) p.saliency.image(i)[c * p.x.plane_size() + q] = S(1);
          }
        }
      }
    }
  }
  return p;
}

}  // namespace ascood
