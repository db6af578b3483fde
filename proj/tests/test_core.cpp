#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "support.hpp"

using namespace ascood;
using ascood::testing::random_values;

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Tensor<double> rows_tensor(const std::vector<std::vector<double>>& rows) {
  Tensor<double> t(Shape{rows.size(), rows.at(0).size()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) t(r, c) = rows[r][c];
  }
  return t;
}

// Independent scalar reference: softmax via direct exponentials (inputs kept small).
std::vector<double> plain_softmax(const std::vector<double>& z) {
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (e[i] = std::exp(z[i]));
  for (auto& v : e) v /= s;
  return e;
}

}  // namespace

TEST(Standardize, SymmetricPair) {
  const auto out = standardize(FeatureVector<double>({1.0, -1.0}), 0.5);
  ASSERT_EQ(out.values.size(), 2u);
  EXPECT_NEAR(out.values[0], 0.35355, 1e-5);
  EXPECT_NEAR(out.values[1], -0.35355, 1e-5);
  EXPECT_NEAR(out.norm(), 0.5, 1e-12);
}

TEST(Standardize, NormAt512) {
  std::mt19937_64 rng(7);
  const auto h = random_values(rng, 512, -3.0, 5.0);
  const auto out = standardize(FeatureVector<double>(h), 0.5);
  EXPECT_NEAR(out.norm(), 11.3027, 1e-4);
  EXPECT_NEAR(out.norm(), 0.5 * std::sqrt(511.0), 1e-10);
}

TEST(Standardize, ConstantVectorIsDegenerate) {
  EXPECT_THROW(standardize(FeatureVector<double>({3.0, 3.0, 3.0}), 0.5), DegenerateFeature);
}

TEST(Standardize, RejectsShortVectorsAndBadSigma) {
  EXPECT_THROW(FeatureVector<double>({1.0}), InvalidArgument);
  EXPECT_THROW(standardize(FeatureVector<double>({1.0, 2.0}), 0.0), InvalidArgument);
}

TEST(Standardize, NormAndMeanProperty) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(2, 512);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t m = dim(rng);
    for (double sigma : {0.1, 0.5, 2.5}) {
      const auto h = random_values(rng, m, -10.0, 10.0);
      const auto out = standardize(FeatureVector<double>(h), sigma);
      const double expected = sigma * std::sqrt(static_cast<double>(m - 1));
      ASSERT_NEAR(out.norm() / expected, 1.0, 1e-5) << "m=" << m << " sigma=" << sigma;
      const double mean = std::accumulate(out.values.begin(), out.values.end(), 0.0) / static_cast<double>(m);
      ASSERT_NEAR(mean, 0.0, 1e-6);
    }
  }
}

TEST(Standardize, ShiftScaleInvariance) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> coef(-4.0, 4.0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto h = random_values(rng, 2 + trial % 40, -2.0, 2.0);
    double a = coef(rng);
    if (std::abs(a) < 0.05) a = 0.5;
    const double b = coef(rng);
    std::vector<double> t(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) t[i] = a * h[i] + b;
    const auto base = standardize(FeatureVector<double>(h), 0.5);
    const auto moved = standardize(FeatureVector<double>(t), 0.5);
    for (std::size_t i = 0; i < h.size(); ++i) {
      ASSERT_NEAR(moved.values[i], (a > 0 ? 1.0 : -1.0) * base.values[i], 1e-9);
    }
  }
}

TEST(Standardize, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 2 + trial % 9;
    const auto h = random_values(rng, m, -2.0, 2.0);
    const auto w = random_values(rng, m, -1.0, 1.0);  // loss = w . standardize(h)
    std::vector<double> out(m), grad(m);
    const double sd = standardize_row<double>(h, out, 0.7);
    standardize_row_backward<double>(out, sd, 0.7, w, grad);
    for (std::size_t i = 0; i < m; ++i) {
      auto loss = [&](double delta) {
        auto hp = h;
        hp[i] += delta;
        std::vector<double> o(m);
        standardize_row<double>(hp, o, 0.7);
        return std::inner_product(w.begin(), w.end(), o.begin(), 0.0);
      };
      const double fd = (loss(1e-6) - loss(-1e-6)) / 2e-6;
      ASSERT_NEAR(grad[i], fd, 1e-6);
    }
  }
}

TEST(Loss, KlOfThreeToOne) {
  const auto lid = rows_tensor({{0.0, 0.0}});
  const auto y = rows_tensor({{1.0, 0.0}});
  const auto lood = rows_tensor({{std::log(3.0), 0.0}});
  const auto loss = loss_total(lid, y, lood, 1.0);
  const double reference = 0.75 * std::log(0.75 / 0.5) + 0.25 * std::log(0.25 / 0.5);
  EXPECT_NEAR(loss.kl, reference, 1e-12);
  EXPECT_NEAR(loss.kl, 0.13081, 1e-5);
}

TEST(Loss, UniformOutlierRowsHaveZeroKl) {
  const auto loss = loss_total(rows_tensor({{1.0, 2.0, 3.0}}), rows_tensor({{0.0, 0.0, 1.0}}),
                               rows_tensor({{4.0, 4.0, 4.0}, {-2.0, -2.0, -2.0}}), 2.0);
  EXPECT_NEAR(loss.kl, 0.0, 1e-15);
  EXPECT_EQ(loss.total, loss.ce);
}

TEST(Loss, HugeMarginDrivesCrossEntropyToZero) {
  const auto loss = loss_total(rows_tensor({{800.0, 0.0}}), rows_tensor({{1.0, 0.0}}), rows_tensor({{0.0, 0.0}}), 1.0);
  EXPECT_LT(loss.ce, 1e-300);
  EXPECT_TRUE(std::isfinite(loss.ce));
}

TEST(Loss, TotalIsCePlusLambdaKl) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 + trial % 8;
    const double lambda = 0.25 * (trial % 9);
    Tensor<double> lid(Shape{3, c}), lood(Shape{5, c}), y(Shape{3, c});
    for (auto& v : lid.values()) v = random_values(rng, 1, -4, 4)[0];
    for (auto& v : lood.values()) v = random_values(rng, 1, -4, 4)[0];
    for (std::size_t r = 0; r < 3; ++r) y(r, (r * 7 + trial) % c) = 1.0;
    const auto loss = loss_total(lid, y, lood, lambda);
    ASSERT_EQ(loss.total, loss.ce + lambda * loss.kl);
    ASSERT_GE(loss.kl, 0.0);
    ASSERT_GE(loss.ce, 0.0);

    // Independent batch means from direct softmax.
    double ce = 0.0, kl = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      const auto p = plain_softmax({lid.slice(r).begin(), lid.slice(r).end()});
      for (std::size_t k = 0; k < c; ++k) ce -= y(r, k) * std::log(p[k]);
    }
    for (std::size_t r = 0; r < 5; ++r) {
      const auto p = plain_softmax({lood.slice(r).begin(), lood.slice(r).end()});
      for (double pk : p) kl += pk * std::log(pk * static_cast<double>(c));
    }
    ASSERT_NEAR(loss.ce, ce / 3.0, 1e-12);
    ASSERT_NEAR(loss.kl, kl / 5.0, 1e-12);
  }
}

TEST(Loss, PermutationEquivariantInClassIndex) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 2 + trial % 6;
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> lid(Shape{2, c}), lood(Shape{2, c}), y(Shape{2, c});
    for (auto& v : lid.values()) v = random_values(rng, 1, -3, 3)[0];
    for (auto& v : lood.values()) v = random_values(rng, 1, -3, 3)[0];
    y(0, 0) = 1.0;
    y(1, c - 1) = 1.0;
    auto permute = [&](const Tensor<double>& t) {
      Tensor<double> out(t.shape());
      for (std::size_t r = 0; r < t.dim(0); ++r) {
        for (std::size_t k = 0; k < c; ++k) out(r, perm[k]) = t(r, k);
      }
      return out;
    };
    const auto a = loss_total(lid, y, lood, 1.0);
    const auto b = loss_total(permute(lid), permute(y), permute(lood), 1.0);
    ASSERT_NEAR(a.ce, b.ce, 1e-12);
    ASSERT_NEAR(a.kl, b.kl, 1e-12);
  }
}

TEST(Loss, KlVanishesOnlyAtUniform) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 2 + trial % 5;
    Tensor<double> lood(Shape{1, c});
    for (auto& v : lood.values()) v = random_values(rng, 1, -1e-3, 1e-3)[0];
    if (trial % 2) lood(0, trial % c) += 0.5;
    const auto p = softmax<double>(lood.slice(0));
    double spread = 0.0;
    for (double v : p) spread = std::max(spread, std::abs(v - 1.0 / static_cast<double>(c)));
    const double kl = kl_to_uniform(lood);
    ASSERT_GE(kl, 0.0);
    if (kl == 0.0) ASSERT_LT(spread, 1e-8);
    if (spread > 1e-3) ASSERT_GT(kl, 0.0);
  }
  EXPECT_EQ(kl_to_uniform(rows_tensor({{0.3, 0.3, 0.3}})), 0.0);
}

TEST(Loss, ShapeMismatchOnClassCount) {
  EXPECT_THROW(loss_total(rows_tensor({{0.0, 1.0}}), rows_tensor({{1.0, 0.0}}), rows_tensor({{0.0, 1.0, 2.0}}), 1.0),
               ShapeMismatch);
  EXPECT_THROW(loss_total(rows_tensor({{0.0, 1.0}}), rows_tensor({{1.0, 0.0, 0.0}}), rows_tensor({{0.0, 1.0}}), 1.0),
               ShapeMismatch);
}

TEST(Gradient, AnalyticExamples) {
  const std::vector<double> y{0.0, 1.0, 0.0, 0.0};
  const std::vector<double> uniform(4, 0.25);
  const std::vector<double> p_ood{0.7, 0.1, 0.1, 0.1};
  const auto g = analytic_logit_gradient(y, y, p_ood, 4);
  const double expected[4] = {0.45, -0.15, -0.15, -0.15};
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(g(0, k), 0.0);
    EXPECT_NEAR(g(1, k), expected[k], 1e-15);
  }
  const auto g2 = analytic_logit_gradient(p_ood, y, uniform, 4);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(g2(1, k), 0.0);
}

TEST(Gradient, AnalyticRejectsBadProbabilities) {
  const std::vector<double> ok{0.5, 0.5}, bad{0.9, 0.3};
  EXPECT_THROW(analytic_logit_gradient(bad, ok, ok, 2), InvalidArgument);
  EXPECT_THROW(analytic_logit_gradient(ok, ok, ok, 3), ShapeMismatch);
}

TEST(Gradient, OodExampleMatchesFiniteDifferences) {
  // Logits whose softmax is [0.7, 0.1, 0.1, 0.1].
  const auto lood = rows_tensor({{std::log(7.0), 0.0, 0.0, 0.0}});
  const auto lid = rows_tensor({{0.0, 0.0, 0.0, 0.0}});
  const auto y = rows_tensor({{1.0, 0.0, 0.0, 0.0}});
  const double expected[4] = {0.45, -0.15, -0.15, -0.15};
  for (std::size_t k = 0; k < 4; ++k) {
    auto f = [&](double d) {
      auto t = lood;
      t(0, k) += d;
      return loss_total(lid, y, t, 1.0).total;
    };
    EXPECT_NEAR((f(1e-6) - f(-1e-6)) / 2e-6, expected[k], 1e-8);
  }
}

TEST(Gradient, AutodiffMatchesAnalyticSingleRow) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 2 + trial % 9;
    Tensor<double> lid(Shape{1, c}), lood(Shape{1, c}), y(Shape{1, c});
    for (auto& v : lid.values()) v = random_values(rng, 1, -5, 5)[0];
    for (auto& v : lood.values()) v = random_values(rng, 1, -5, 5)[0];
    y(0, static_cast<std::size_t>(trial) % c) = 1.0;
    const auto ad = autodiff_logit_gradient(lid, y, lood, 1.0);
    const auto pid = softmax<double>(lid.slice(0));
    const auto pood = softmax<double>(lood.slice(0));
    const auto an = analytic_logit_gradient(pid, y.slice(0), pood, c);
    for (std::size_t k = 0; k < c; ++k) {
      ASSERT_NEAR(ad.id(0, k), an(0, k), 1e-10);
      ASSERT_NEAR(ad.ood(0, k), an(1, k), 1e-10);
    }
  }
}

TEST(Gradient, BatchGradientsCarryMeanScaling) {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t c = 2 + trial % 5, b = 1 + trial % 4, bo = 1 + (trial * 3) % 5;
    const double lambda = 0.5 + 0.25 * (trial % 4);
    Tensor<double> lid(Shape{b, c}), lood(Shape{bo, c});
    for (auto& v : lid.values()) v = random_values(rng, 1, -3, 3)[0];
    for (auto& v : lood.values()) v = random_values(rng, 1, -3, 3)[0];
    std::vector<int> labels(b);
    for (std::size_t r = 0; r < b; ++r) labels[r] = static_cast<int>((r + trial) % c);
    const auto y = one_hot<double>(labels, c);
    const auto ad = autodiff_logit_gradient(lid, y, lood, lambda);
    const auto an = loss_logit_gradients(lid, labels, lood, lambda);
    for (std::size_t i = 0; i < lid.size(); ++i) ASSERT_NEAR(ad.id[i], an.id[i], 1e-10);
    for (std::size_t i = 0; i < lood.size(); ++i) ASSERT_NEAR(ad.ood[i], an.ood[i], 1e-10);
  }
}

TEST(Softmax, StableForLargeLogits) {
  const std::vector<double> z{1000.0, 1000.0};
  const auto p = softmax<double>(z);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_NEAR(log_sum_exp<double>(z), 1000.0 + std::log(2.0), 1e-12);
  const auto pt = softmax<double>(std::vector<double>{2.0, 0.0}, 2.0);
  EXPECT_NEAR(pt[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-15);
}

TEST(AlphaSchedule, LinearEndpoints) {
  const auto s = AlphaSchedule::linear(300.0, 30.0, 100);
  EXPECT_EQ(alpha_at(s, 0), 300.0);
  EXPECT_EQ(alpha_at(s, 99), 30.0);
  double prev = alpha_at(s, 0);
  for (std::size_t t = 1; t < 100; ++t) {
    const double a = alpha_at(s, t);
    EXPECT_LE(a, prev);
    EXPECT_NEAR(a, 300.0 - 270.0 * static_cast<double>(t) / 99.0, 1e-12);
    prev = a;
  }
  EXPECT_THROW(alpha_at(s, 100), StepOutOfRange);
}

TEST(AlphaSchedule, ConstantAtAnyStep) {
  const auto s = AlphaSchedule::constant(10.0);
  for (std::size_t t : {0u, 1u, 50u, 100000u}) EXPECT_EQ(alpha_at(s, t), 10.0);
}

TEST(AlphaSchedule, SingleStepLinearReturnsStart) {
  EXPECT_EQ(alpha_at(AlphaSchedule::linear(5.0, 1.0, 1), 0), 5.0);
  EXPECT_THROW(AlphaSchedule::linear(5.0, 1.0, 0), InvalidArgument);
}
