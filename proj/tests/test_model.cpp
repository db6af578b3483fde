#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace ascood;
using namespace ascood::testing;

namespace {

double row_norm(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(Forward, StandardizedRowsHaveFixedNorm) {
  Classifier<double> model(tiny_convnet(3, 9), 1);
  std::mt19937_64 rng(1);
  const auto out = model.forward(random_batch<double>(rng, 6, 3, 8, 8));
  for (std::size_t r = 0; r < 6; ++r) {
    EXPECT_NEAR(row_norm(out.std_features.slice(r)), 0.5 * std::sqrt(8.0), 1e-9);
  }
}

TEST(Forward, L2RowsHaveNormSigma) {
  auto cfg = tiny_convnet(2, 5, FeatureMode::l2_normalized);
  cfg.sigma = 1.7;
  Classifier<double> model(cfg, 2);
  std::mt19937_64 rng(2);
  const auto out = model.forward(random_batch<double>(rng, 4, 3, 8, 8));
  for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(row_norm(out.std_features.slice(r)), 1.7, 1e-9);
}

TEST(Forward, RawPassesFeaturesThrough) {
  Classifier<double> model(tiny_convnet(2, 5, FeatureMode::raw), 3);
  std::mt19937_64 rng(3);
  const auto out = model.forward(random_batch<double>(rng, 4, 3, 8, 8));
  EXPECT_EQ(out.std_features, out.features);
}

TEST(Forward, LogitsAreLinearInStandardizedFeatures) {
  Classifier<double> model(tiny_convnet(3, 6), 4);
  std::mt19937_64 rng(4);
  const auto out = model.forward(random_batch<double>(rng, 3, 3, 8, 8));
  const auto& w = model.head().weight().value;
  const auto& b = model.head().bias().value;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      double z = b[c];
      for (std::size_t k = 0; k < 6; ++k) z += w(c, k) * out.std_features(r, k);
      EXPECT_NEAR(out.logits(r, c), z, 1e-12);
    }
  }
}

TEST(Forward, DeterministicForFixedWeights) {
  Classifier<double> model(tiny_convnet(), 5);
  std::mt19937_64 rng(5);
  const auto x = random_batch<double>(rng, 5, 3, 8, 8);
  EXPECT_EQ(model.logits(x), model.logits(x));
}

TEST(Forward, ConstantFeaturesAreDegenerate) {
  auto cfg = linear_model(1, 2, 2);
  cfg.feature_mode = FeatureMode::standardized;
  Classifier<double> model(cfg, 6);
  ImageBatch<double> x(1, 1, 2, 2);
  x.pixels().fill(0.3);
  EXPECT_THROW(model.forward(x), DegenerateFeature);
}

TEST(Forward, ChannelMismatch) {
  Classifier<double> model(tiny_convnet(), 7);
  std::mt19937_64 rng(7);
  EXPECT_THROW(model.forward(random_batch<double>(rng, 1, 1, 8, 8)), ShapeMismatch);
}

TEST(Backward, ParameterGradientsMatchFiniteDifferences) {
  for (auto mode : {FeatureMode::standardized, FeatureMode::l2_normalized, FeatureMode::raw}) {
    auto cfg = tiny_convnet(3, 5, mode);
    cfg.widths = {2, 3};
    Classifier<double> model(cfg, 8);
    std::mt19937_64 rng(8);
    const auto x = random_batch<double>(rng, 3, 3, 4, 4);
    const std::vector<int> y{0, 2, 1};
    auto loss = [&] {
      const auto z = model.logits(x);
      return cross_entropy(z, one_hot<double>(y, 3));
    };
    model.zero_grad();
    const auto out = model.forward(x);
    model.backward(ce_logit_gradient(out.logits, y));
    for (auto* p : model.parameters()) {
      for (std::size_t i = 0; i < p->value.size(); i += 3) {
        const double keep = p->value[i];
        p->value[i] = keep + 1e-6;
        const double up = loss();
        p->value[i] = keep - 1e-6;
        const double down = loss();
        p->value[i] = keep;
        ASSERT_NEAR(p->grad[i], (up - down) / 2e-6, 1e-6) << p->name << "[" << i << "]";
      }
    }
  }
}

TEST(Sgd, HeadUsesItsOwnLearningRate) {
  Classifier<double> model(tiny_convnet(), 9);
  for (auto* p : model.parameters()) p->grad.fill(1.0);
  std::vector<Tensor<double>> before;
  for (auto* p : model.parameters()) before.push_back(p->value);
  SgdConfig cfg;
  cfg.lr = 0.1;
  cfg.fc_lr = 0.005;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  Sgd<double> opt(cfg);
  opt.step(model.parameters());
  const auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double lr = params[k]->head ? 0.005 : 0.1;
    for (std::size_t i = 0; i < params[k]->value.size(); ++i) {
      ASSERT_NEAR(params[k]->value[i], before[k][i] - lr, 1e-15);
    }
  }
}

TEST(Model, CopyBackboneLeavesHead) {
  Classifier<double> a(tiny_convnet(), 10), b(tiny_convnet(), 11);
  const auto head = b.head().weight().value;
  b.copy_backbone_from(a);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) {
    if (pb[k]->head) continue;
    EXPECT_EQ(pa[k]->value, pb[k]->value);
  }
  EXPECT_EQ(b.head().weight().value, head);
  Classifier<double> wide(tiny_convnet(2, 8), 12);
  EXPECT_THROW(wide.copy_backbone_from(a), ShapeMismatch);
}

TEST(Training, DegenerateJointObjectiveIsCrossEntropy) {
  const auto set = toy_set(48, 20);
  BatchMaker<float> data(set, toy_transform());
  TrainOptions opts;
  opts.epochs = 3;
  opts.batch_size = 8;
  SynthesisConfig identity;
  identity.method = SynthesisMethod::identity;

  Classifier<float> joint(tiny_convnet(), 21), plain(tiny_convnet(), 21);
  Sgd<float> oj(SgdConfig{}), op(SgdConfig{});
  auto sj = TrainState::seeded(5), sp = TrainState::seeded(5);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto a = train_epoch(joint, data, identity, 0.0, oj, opts, sj);
    const auto b = train_epoch_ce(plain, data, op, opts, sp);
    EXPECT_EQ(a.ce, b.ce);
    EXPECT_EQ(a.kl * 0.0, 0.0);
    EXPECT_EQ(a.total, b.total);
  }
  const auto pj = joint.parameters(), pp = plain.parameters();
  for (std::size_t k = 0; k < pj.size(); ++k) EXPECT_EQ(pj[k]->value, pp[k]->value);
}

TEST(Training, CrossEntropyFallsOnToyData) {
  const auto set = toy_set(96, 30);
  BatchMaker<float> data(set, toy_transform());
  TrainOptions opts;
  opts.epochs = 4;
  opts.batch_size = 16;
  SynthesisConfig cfg;
  cfg.alpha = AlphaSchedule::linear(30.0, 3.0, 4);
  double first = 0.0, last = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    Classifier<float> model(tiny_convnet(), seed);
    Sgd<float> opt(SgdConfig{});
    auto state = TrainState::seeded(seed);
    for (std::size_t e = 0; e < 4; ++e) {
      const auto s = train_epoch(model, data, cfg, 1.0, opt, opts, state);
      EXPECT_TRUE(std::isfinite(s.total));
      EXPECT_EQ(s.epoch, e);
      EXPECT_DOUBLE_EQ(s.alpha, alpha_at(cfg.alpha, e));
      if (e == 0) first += s.ce;
      if (e == 3) last += s.ce;
    }
  }
  EXPECT_LT(last, first);
}

TEST(Training, NonFiniteLossIsNumericFailure) {
  const auto set = toy_set(16, 31);
  BatchMaker<float> data(set, toy_transform());
  Classifier<float> model(tiny_convnet(2, 6, FeatureMode::raw), 4);
  SgdConfig sgd;
  sgd.lr = 1e30;
  Sgd<float> opt(sgd);
  TrainOptions opts;
  opts.batch_size = 4;
  auto state = TrainState::seeded(0);
  EXPECT_THROW(
      {
        for (int e = 0; e < 5; ++e) train_epoch_ce(model, data, opt, opts, state);
      },
      NumericError);
}

TEST(Training, StepGranularityAdvancesPerBatch) {
  SynthesisConfig cfg;
  cfg.alpha_granularity = ScheduleGranularity::step;
  TrainState s;
  s.epoch = 2;
  s.global_step = 17;
  EXPECT_EQ(detail::alpha_step(cfg, s), 17u);
  cfg.alpha_granularity = ScheduleGranularity::epoch;
  EXPECT_EQ(detail::alpha_step(cfg, s), 2u);
}

TEST(RunLoop, ResumeReproducesUninterruptedTrajectory) {
  const auto dir = scratch_dir("resume");
  const auto set = toy_set(40, 40);
  RunConfig cfg;
  cfg.seed = 3;
  cfg.classifier = tiny_convnet();
  cfg.data.transform = toy_transform();
  cfg.optimizer.epochs = 4;
  cfg.optimizer.batch_size = 8;
  cfg.synthesis.alpha = {100.0, 10.0, 0, ScheduleMode::linear};

  ascood::Run<float> full(cfg);
  full.train(set);

  ascood::Run<float> first(cfg);
  first.train(set, {}, 2);
  save_checkpoint(first.checkpoint(), dir / "ck.json");
  auto resumed = ascood::Run<float>::resume(load_checkpoint(dir / "ck.json"));
  EXPECT_EQ(resumed.state().epoch, 2u);
  std::vector<std::size_t> epochs;
  resumed.train(set, [&](const EpochStats& s) { epochs.push_back(s.epoch); });
  EXPECT_EQ(epochs, (std::vector<std::size_t>{2, 3}));

  ASSERT_EQ(resumed.history().size(), full.history().size());
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_EQ(resumed.history()[e].ce, full.history()[e].ce);
    EXPECT_EQ(resumed.history()[e].kl, full.history()[e].kl);
  }
  const auto a = full.model().parameters(), b = resumed.model().parameters();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k]->value, b[k]->value);
}

TEST(RunLoop, InitFromCopiesBackbone) {
  const auto dir = scratch_dir("init_from");
  const auto set = toy_set(16, 41);
  RunConfig pre;
  pre.classifier = tiny_convnet(2, 6, FeatureMode::raw);
  pre.data.transform = toy_transform();
  pre.optimizer.epochs = 1;
  pre.lambda = 0.0;
  pre.synthesis.method = SynthesisMethod::identity;
  ascood::Run<float> base(pre);
  base.train(set);
  save_checkpoint(base.checkpoint(), dir / "pre.json");

  RunConfig fine = pre;
  fine.classifier.feature_mode = FeatureMode::standardized;
  fine.init_from = (dir / "pre.json").string();
  ascood::Run<float> tuned(fine);
  const auto a = base.model().parameters(), b = tuned.model().parameters();
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (b[k]->head) {
      EXPECT_NE(a[k]->value, b[k]->value);
    } else {
      EXPECT_EQ(a[k]->value, b[k]->value);
    }
  }
}
