#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>

#include "support.hpp"

using namespace ascood;
using namespace ascood::testing;

namespace {

SaliencyMaps<double> flat_saliency(const std::vector<double>& g) {
  ImageBatch<double> b(1, 1, 1, g.size());
  std::copy(g.begin(), g.end(), b.image(0).begin());
  return {b, {0}};
}

/// Brute force: sort |G| descending, take the k-th value as threshold, keep everything >= it.
std::vector<std::uint8_t> sort_oracle(const std::vector<double>& score, double p) {
  const std::size_t n = score.size();
  std::size_t k = 0;
  while (100.0 * static_cast<double>(k) < p * static_cast<double>(n) - 1e-9) ++k;
  k = std::clamp<std::size_t>(k, 1, n);
  std::vector<double> sorted = score;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  std::vector<std::uint8_t> keep(n);
  for (std::size_t j = 0; j < n; ++j) keep[j] = score[j] >= sorted[k - 1];
  return keep;
}

std::vector<std::vector<double>> pixel_vectors(const ImageBatch<double>& x, std::size_t i) {
  std::vector<std::vector<double>> px(x.plane_size(), std::vector<double>(x.channels()));
  for (std::size_t q = 0; q < x.plane_size(); ++q) {
    for (std::size_t c = 0; c < x.channels(); ++c) px[q][c] = x.image(i)[c * x.plane_size() + q];
  }
  std::sort(px.begin(), px.end());
  return px;
}

}  // namespace

TEST(Saliency, LinearModelGradientIsWeightRow) {
  Classifier<double> model(linear_model(2, 3, 3, 3), 5);
  std::mt19937_64 rng(1);
  const auto x = random_batch<double>(rng, 4, 2, 3, 3);
  const std::vector<int> y{0, 2, 1, 2};
  const auto g = compute_saliency(model, x, y);
  const auto& w = model.head().weight().value;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < x.image_size(); ++j) {
      EXPECT_NEAR(g.map(i)[j], w(static_cast<std::size_t>(y[i]), j), 1e-14);
    }
  }
  EXPECT_EQ(g.target_class, y);
}

TEST(Saliency, DuplicatedImagesGiveMatchingMaps) {
  Classifier<double> model(tiny_convnet(), 9);
  std::mt19937_64 rng(2);
  const auto one = random_batch<double>(rng, 1, 3, 8, 8);
  const auto x = concat(one, one);
  const auto g = compute_saliency(model, x, std::vector<int>{1, 1});
  for (std::size_t j = 0; j < x.image_size(); ++j) EXPECT_NEAR(g.map(0)[j], g.map(1)[j], 1e-12);
}

TEST(Saliency, ConvnetMatchesCentralDifferences) {
  auto cfg = tiny_convnet(2, 4);
  cfg.in_channels = 1;
  cfg.widths = {2, 3};
  Classifier<double> model(cfg, 17);
  std::size_t params = 0;
  for (auto* p : model.parameters()) params += p->value.size();
  ASSERT_LE(params, 1000u);
  std::mt19937_64 rng(3);
  const auto x = random_batch<double>(rng, 2, 1, 4, 4);
  const std::vector<int> y{0, 1};
  const auto g = compute_saliency(model, x, y);
  double worst = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < x.image_size(); ++j) {
      auto z = [&](double d) {
        auto xp = x.subset(i, 1);
        xp.image(0)[j] += d;
        return model.logits(xp)(0, static_cast<std::size_t>(y[i]));
      };
      worst = std::max(worst, std::abs((z(1e-3) - z(-1e-3)) / 2e-3 - g.map(i)[j]));
    }
  }
  EXPECT_LE(worst, 1e-3);
}

TEST(Saliency, LeavesParametersUntouched) {
  Classifier<double> model(tiny_convnet(), 4);
  model.zero_grad();
  std::mt19937_64 rng(4);
  const auto x = random_batch<double>(rng, 3, 3, 8, 8);
  std::vector<Tensor<double>> before;
  for (auto* p : model.parameters()) before.push_back(p->value);
  compute_saliency(model, x, std::vector<int>{0, 1, 0});
  const auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    EXPECT_EQ(params[k]->value, before[k]);
    for (double v : params[k]->grad.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Saliency, ProbabilitySourceIsScaledLogitGradientForTwoClasses) {
  // For C = 2, dp_y/dx = p0 * p1 * d(z_y - z_other)/dx.
  Classifier<double> model(linear_model(1, 2, 2, 2), 8);
  std::mt19937_64 rng(5);
  const auto x = random_batch<double>(rng, 1, 1, 2, 2);
  const auto gp = compute_saliency(model, x, std::vector<int>{0}, SaliencySource::probability);
  const auto p = softmax<double>(model.logits(x).slice(0));
  const auto& w = model.head().weight().value;
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(gp.map(0)[j], p[0] * p[1] * (w(0, j) - w(1, j)), 1e-12);
}

TEST(Sparsify, WorkedExample) {
  const auto out = sparsify(flat_saliency({0.1, -0.5, 0.2, 0.9}), 50.0, MaskGranularity::element);
  const std::vector<double> expected{0.0, -0.5, 0.0, 0.9};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out.g_inv.map(0)[j], expected[j]);
  EXPECT_EQ(out.mask.count(0), 2u);
}

TEST(Sparsify, FullPercentKeepsEverything) {
  const std::vector<double> g{0.3, -0.1, 0.0, 2.0, -7.0};
  const auto out = sparsify(flat_saliency(g), 100.0, MaskGranularity::element);
  for (std::size_t j = 0; j < g.size(); ++j) {
    EXPECT_EQ(out.g_inv.map(0)[j], g[j]);
    EXPECT_TRUE(out.mask.at(0, j));
  }
}

TEST(Sparsify, AllEqualMagnitudesAreAllKept) {
  const std::vector<double> g{0.4, -0.4, 0.4, -0.4, 0.4, 0.4, -0.4, 0.4};
  const auto out = sparsify(flat_saliency(g), 25.0, MaskGranularity::element);
  EXPECT_EQ(out.mask.count(0), g.size());
  EXPECT_EQ(sort_oracle(std::vector<double>(g.size(), 0.4), 25.0), out.mask.keep);
}

TEST(Sparsify, InvalidPercentage) {
  EXPECT_THROW(sparsify(flat_saliency({1.0, 2.0}), 0.0, MaskGranularity::element), InvalidPercentage);
  EXPECT_THROW(sparsify(flat_saliency({1.0, 2.0}), 100.5, MaskGranularity::element), InvalidPercentage);
}

TEST(Sparsify, ElementMaskMatchesSortOracle) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> pct(0.5, 100.0);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t c = 1 + trial % 3, h = 1 + trial % 5, w = 2 + trial % 4;
    const bool ties = trial % 3 == 0;
    auto x = random_batch<double>(rng, 2, c, h, w);
    if (ties) {
      for (auto& v : x.pixels().values()) v = std::round(v * 2.0) / 2.0;
    }
    const double p = trial % 10 == 0 ? 100.0 : pct(rng);
    const auto out = sparsify(SaliencyMaps<double>{x, {0, 1}}, p, MaskGranularity::element);
    for (std::size_t i = 0; i < 2; ++i) {
      std::vector<double> mag;
      for (double v : x.image(i)) mag.push_back(std::abs(v));
      const auto keep = sort_oracle(mag, p);
      for (std::size_t j = 0; j < mag.size(); ++j) {
        ASSERT_EQ(out.mask.at(i, j), keep[j] != 0);
        ASSERT_EQ(out.g_inv.map(i)[j], keep[j] ? x.image(i)[j] : 0.0);
      }
      const std::size_t expect_k = top_percent_count(p, mag.size());
      if (!ties) {
        std::vector<double> s = mag;
        std::sort(s.begin(), s.end());
        if (std::adjacent_find(s.begin(), s.end()) == s.end()) ASSERT_EQ(out.mask.count(i), expect_k);
      }
      ASSERT_GE(out.mask.count(i), expect_k);
    }
  }
}

TEST(Sparsify, PixelMaskRanksByChannelSumOfExp) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const auto g = random_batch<double>(rng, 1, 3, 4, 5);
    const double p = 5.0 + trial;
    const auto out = sparsify(SaliencyMaps<double>{g, {0}}, std::min(p, 100.0), MaskGranularity::pixel);
    ASSERT_EQ(out.mask.per_image, 20u);
    std::vector<double> score(20, 0.0);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t q = 0; q < 20; ++q) score[q] += std::exp(g.image(0)[c * 20 + q]);
    }
    const auto keep = sort_oracle(score, std::min(p, 100.0));
    for (std::size_t q = 0; q < 20; ++q) {
      ASSERT_EQ(out.mask.at(0, q), keep[q] != 0);
      for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(out.g_inv.map(0)[c * 20 + q], keep[q] ? g.image(0)[c * 20 + q] : 0.0);
    }
  }
}

TEST(SynthesizeGrad, ZeroAlphaIsIdentity) {
  std::mt19937_64 rng(50);
  const auto x = random_batch<double>(rng, 2, 3, 4, 4);
  const auto g = random_batch<double>(rng, 2, 3, 4, 4);
  EXPECT_EQ(synthesize_grad(x, SaliencyMaps<double>{g, {0, 1}}, 0.0, 1), x);
}

TEST(SynthesizeGrad, SingleElementSuperposition) {
  ImageBatch<double> x(1, 1, 2, 2);
  x.pixels().fill(0.5);
  auto g = x.zeros_like();
  g.image(0)[2] = 1.0;
  const auto out = synthesize_grad(x, SaliencyMaps<double>{g, {0}}, 10.0, 1);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out.image(0)[j], j == 2 ? 10.5 : 0.5);
}

TEST(SynthesizeGrad, ShapeMismatchAndBadArguments) {
  ImageBatch<double> x(1, 1, 2, 2), g(1, 1, 2, 3);
  EXPECT_THROW(synthesize_grad(x, SaliencyMaps<double>{g, {0}}, 1.0, 1), ShapeMismatch);
  EXPECT_THROW(synthesize_grad(x, SaliencyMaps<double>{x, {0}}, -1.0, 1), InvalidArgument);
  EXPECT_THROW(synthesize_grad(x, SaliencyMaps<double>{x, {0}}, 1.0, 2), InvalidArgument);
}

TEST(SynthesizeGrad, LinearModelLogitChangeIsMaskedRowNorm) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 50; ++trial) {
    Classifier<double> model(linear_model(3, 2, 2, 3), 100 + trial);
    const auto x = random_batch<double>(rng, 3, 3, 2, 2);
    const std::vector<int> y{0, 1, 2};
    const double alpha = 0.5 + trial % 7;
    const auto sparse = sparsify(compute_saliency(model, x, y), 20.0 + trial, MaskGranularity::element);
    const auto up = synthesize_grad(x, sparse.g_inv, alpha, 1);
    const auto down = synthesize_grad(x, sparse.g_inv, alpha, -1);
    const auto z = model.logits(x), zu = model.logits(up), zd = model.logits(down);
    const auto& w = model.head().weight().value;
    for (std::size_t i = 0; i < 3; ++i) {
      const auto c = static_cast<std::size_t>(y[i]);
      double masked = 0.0;
      for (std::size_t j = 0; j < 12; ++j) {
        if (sparse.mask.at(i, j)) masked += w(c, j) * w(c, j);
      }
      ASSERT_NEAR(zu(i, c) - z(i, c), alpha * masked, 1e-9);
      ASSERT_GE(zu(i, c), z(i, c));
      ASSERT_LE(zd(i, c), z(i, c));
    }
  }
}

TEST(SynthesizeGrad, UnmaskedEntriesBitIdentical) {
  std::mt19937_64 rng(52);
  Classifier<double> model(tiny_convnet(), 3);
  const auto x = random_batch<double>(rng, 4, 3, 8, 8);
  const std::vector<int> y{0, 1, 1, 0};
  for (auto gran : {MaskGranularity::element, MaskGranularity::pixel}) {
    const auto sparse = sparsify(compute_saliency(model, x, y), 10.0, gran);
    const auto out = synthesize_grad(x, sparse.g_inv, 300.0, 1);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < x.image_size(); ++j) {
        const std::size_t m = gran == MaskGranularity::element ? j : j % x.plane_size();
        if (!sparse.mask.at(i, m)) ASSERT_EQ(out.image(i)[j], x.image(i)[j]);
      }
    }
  }
}

TEST(SynthesizeShuffle, SingletonMaskIsIdentity) {
  std::mt19937_64 rng(60);
  const auto x = random_batch<double>(rng, 2, 3, 3, 3);
  InvariantMask mask{MaskGranularity::pixel, 1.0, 2, 9, std::vector<std::uint8_t>(18, 0)};
  mask.keep[4] = 1;
  mask.keep[9 + 7] = 1;
  EXPECT_EQ(synthesize_shuffle(x, mask, rng), x);
}

TEST(SynthesizeShuffle, EmptyMaskAndWrongGranularity) {
  std::mt19937_64 rng(61);
  const auto x = random_batch<double>(rng, 1, 3, 3, 3);
  InvariantMask empty{MaskGranularity::pixel, 1.0, 1, 9, std::vector<std::uint8_t>(9, 0)};
  EXPECT_THROW(synthesize_shuffle(x, empty, rng), EmptyMask);
  InvariantMask element{MaskGranularity::element, 1.0, 1, 27, std::vector<std::uint8_t>(27, 1)};
  EXPECT_THROW(synthesize_shuffle(x, element, rng), InvalidArgument);
}

TEST(SynthesizeShuffle, ConservesPixelsAndUnmaskedRegion) {
  std::mt19937_64 rng(62);
  std::uniform_real_distribution<double> pct(1.0, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = random_batch<double>(rng, 2, 3, 3 + trial % 5, 4);
    const double p = trial % 8 == 0 ? 100.0 : pct(rng);
    const auto mask = random_pixel_mask(2, x.plane_size(), p, rng);
    const auto out = synthesize_shuffle(x, mask, rng);
    for (std::size_t i = 0; i < 2; ++i) {
      ASSERT_EQ(pixel_vectors(out, i), pixel_vectors(x, i));
      ASSERT_EQ(mask.count(i), top_percent_count(p, x.plane_size()));
      for (std::size_t q = 0; q < x.plane_size(); ++q) {
        if (mask.at(i, q)) continue;
        for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(out.image(i)[c * x.plane_size() + q], x.image(i)[c * x.plane_size() + q]);
      }
    }
  }
}

TEST(SynthesizeShuffle, FixedSeedReproducible) {
  std::mt19937_64 rng(63);
  const auto x = random_batch<double>(rng, 3, 3, 6, 6);
  std::mt19937_64 a(5), b(5);
  const auto ma = random_pixel_mask(3, 36, 50.0, a), mb = random_pixel_mask(3, 36, 50.0, b);
  EXPECT_EQ(synthesize_shuffle(x, ma, a), synthesize_shuffle(x, mb, b));
}

TEST(SynthesizeGaussian, ZeroScaleIsIdentity) {
  std::mt19937_64 rng(70);
  const auto x = random_batch<double>(rng, 2, 3, 4, 4);
  EXPECT_EQ(synthesize_gaussian(x, 0.0, rng), x);
  EXPECT_THROW(synthesize_gaussian(x, -0.1, rng), InvalidArgument);
}

TEST(SynthesizeGaussian, NoiseStdMatchesScale) {
  ImageBatch<double> x(40, 3, 32, 32);  // 122880 elements
  x.pixels().fill(0.25);
  std::mt19937_64 rng(71);
  const auto out = synthesize_gaussian(x, 0.1, rng);
  double mean = 0.0, sq = 0.0;
  const double n = static_cast<double>(x.pixels().size());
  for (std::size_t j = 0; j < x.pixels().size(); ++j) mean += out.pixels()[j] - 0.25;
  mean /= n;
  for (std::size_t j = 0; j < x.pixels().size(); ++j) sq += std::pow(out.pixels()[j] - 0.25 - mean, 2);
  EXPECT_NEAR(std::sqrt(sq / (n - 1.0)), 0.1, 0.005);
  std::mt19937_64 again(71);
  EXPECT_EQ(synthesize_gaussian(x, 0.1, again), out);
}

TEST(Synthesize, DispatchUsesScheduledAlpha) {
  Classifier<double> model(tiny_convnet(), 21);
  std::mt19937_64 rng(80);
  const auto x = random_batch<double>(rng, 2, 3, 8, 8);
  const std::vector<int> y{1, 0};
  SynthesisConfig cfg;
  cfg.alpha = AlphaSchedule::linear(300.0, 30.0, 10);
  cfg.p_inv = 10.0;
  for (std::size_t step : {0u, 4u, 9u}) {
    const auto res = synthesize_detailed(model, x, y, cfg, step, rng);
    EXPECT_DOUBLE_EQ(res.alpha, alpha_at(cfg.alpha, step));
    const auto sparse = sparsify(compute_saliency(model, x, y), 10.0, MaskGranularity::element);
    EXPECT_EQ(res.outliers, synthesize_grad(x, sparse.g_inv, alpha_at(cfg.alpha, step), 1));
  }
  cfg.method = SynthesisMethod::grad_sub;
  const auto sparse = sparsify(compute_saliency(model, x, y), 10.0, MaskGranularity::element);
  EXPECT_EQ(synthesize(model, x, y, cfg, 9, rng), synthesize_grad(x, sparse.g_inv, 30.0, -1));
  EXPECT_THROW(synthesize(model, x, y, cfg, 10, rng), StepOutOfRange);
}

TEST(Synthesize, IdentityReturnsInput) {
  Classifier<double> model(tiny_convnet(), 22);
  std::mt19937_64 rng(81);
  const auto x = random_batch<double>(rng, 2, 3, 8, 8);
  SynthesisConfig cfg;
  cfg.method = SynthesisMethod::identity;
  const std::mt19937_64 before = rng;
  EXPECT_EQ(synthesize(model, x, std::vector<int>{0, 1}, cfg, 0, rng), x);
  EXPECT_EQ(rng, before);
}

TEST(Synthesize, InvariantShuffleMovesOnlySalientPixels) {
  Classifier<double> model(tiny_convnet(), 23);
  std::mt19937_64 rng(82);
  const auto x = random_batch<double>(rng, 2, 3, 8, 8);
  const std::vector<int> y{0, 1};
  SynthesisConfig cfg;
  cfg.method = SynthesisMethod::invariant_shuffle;
  cfg.p_inv = 25.0;
  const auto res = synthesize_detailed(model, x, y, cfg, 0, rng);
  ASSERT_TRUE(res.mask.has_value());
  const auto expected = sparsify(compute_saliency(model, x, y), 25.0, MaskGranularity::pixel).mask;
  EXPECT_EQ(res.mask->keep, expected.keep);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(pixel_vectors(res.outliers, i), pixel_vectors(x, i));
}
