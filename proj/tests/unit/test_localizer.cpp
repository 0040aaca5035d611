#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "teddy/localizer.hpp"
#include "teddy/rng.hpp"

using namespace teddy;

namespace {

// Straight transcription of the pooling formula, one channel at a time.
double ref_pool(const ScoreMap& s, int c, const PoolingConfig& cfg) {
  const int N = s.pixels();
  double num = 0.0, den = 0.0;
  for (int i = 0; i < N; ++i) {
    double z = 0.0;
    for (int j = 0; j < s.channels(); ++j) z += std::exp(s.at(j, i));
    const double w = std::exp(s.at(c, i)) / z;
    num += w * s.at(c, i);
    den += w;
  }
  const double m = den / N;
  return num / (cfg.epsilon + den) +
         cfg.focal_lambda * std::pow(1.0 - m, cfg.focal_p) * std::log(m + cfg.epsilon);
}

double ref_sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double ref_bce(double t, double p) { return -(t * std::log(p) + (1 - t) * std::log(1 - p)); }

PoolingConfig no_focal() {
  PoolingConfig c;
  c.focal_lambda = 0.0;
  return c;
}

}  // namespace

TEST(SeedScores, ZeroScorerGivesZeroMap) {
  LinearScorer sc(3, 4);
  ScoreMap f(4, 2, 2, Semantics::Scores, 0.7);
  const SeedMap s = seed_scores(sc, f);
  for (double v : s.scores.data()) EXPECT_EQ(v, 0.0);
  EXPECT_FALSE(s.tme_mask.has_value());
}

TEST(SeedScores, BiasOnlyIsSpatiallyConstant) {
  LinearScorer sc(2, 3);
  sc.bias = {0.5, -1.25};
  ScoreMap f(3, 3, 2, Semantics::Scores);
  for (int k = 0; k < 18; ++k) f.data()[k] = k * 0.1;
  const SeedMap s = seed_scores(sc, f);
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(s.scores.at(0, i), 0.5);
    EXPECT_EQ(s.scores.at(1, i), -1.25);
  }
}

TEST(SeedScores, HandComputedMatrixProduct) {
  // 2 output rows, 2 features, 2x2 grid.
  LinearScorer sc(2, 2);
  sc.weights = {1.0, 2.0, -1.0, 0.5};
  sc.bias = {0.1, -0.2};
  ScoreMap f(2, 2, 2, Semantics::Scores, {1.0, 0.0, -1.0, 2.0, 3.0, 1.0, 0.5, -2.0});
  const ScoreMap s = seed_scores(sc, f).scores;
  const std::vector<double> expect{
      0.1 + 1.0 * 1.0 + 2.0 * 3.0,   0.1 + 0.0 + 2.0 * 1.0,
      0.1 - 1.0 + 2.0 * 0.5,         0.1 + 2.0 - 4.0,
      -0.2 - 1.0 + 0.5 * 3.0,        -0.2 - 0.0 + 0.5 * 1.0,
      -0.2 + 1.0 + 0.5 * 0.5,        -0.2 - 2.0 - 1.0};
  for (int k = 0; k < 8; ++k) EXPECT_NEAR(s.data()[k], expect[k], 1e-15) << k;
}

TEST(SeedScores, DimensionMismatchThrows) {
  EXPECT_THROW(seed_scores(LinearScorer(2, 3), ScoreMap(4, 2, 2)), ShapeError);
}

TEST(GwpPool, ConstantSingleChannel) {
  const double s = 1.7, eps = 1e-5;
  ScoreMap m(1, 3, 3, Semantics::Scores, s);
  const std::vector<int> ch{0};
  const double got = gwp_pool(m, ch, no_focal())[0];
  EXPECT_NEAR(got, s * 9 / (eps + 9), 1e-15);
  EXPECT_NEAR(got, s, 1e-5);
}

TEST(GwpPool, WeightsConcentrateOnTheStrongPixel) {
  ScoreMap m(2, 2, 2, Semantics::Scores);
  m.at(1, 0) = 10.0;
  for (int i = 1; i < 4; ++i) m.at(1, i) = -10.0;
  const std::vector<int> ch{1};
  const double got = gwp_pool(m, ch, no_focal())[0];
  EXPECT_NEAR(got, ref_pool(m, 1, no_focal()), 1e-12);
  const double on = 1.0 / (1.0 + std::exp(-10.0)), off = 1.0 / (1.0 + std::exp(10.0));
  EXPECT_NEAR(got, (10.0 * on - 30.0 * off) / (1e-5 + on + 3 * off), 1e-12);
  EXPECT_NEAR(got, 10.0, 5e-3);
}

TEST(GwpPool, FocalTermDominatesOnAllBackgroundMap) {
  ScoreMap m(2, 2, 2, Semantics::Scores);
  for (int i = 0; i < 4; ++i) {
    m.at(0, i) = 10.0;
    m.at(1, i) = -10.0;
  }
  const PoolingConfig cfg;
  const std::vector<int> ch{1};
  const double got = gwp_pool(m, ch, cfg)[0];
  EXPECT_NEAR(got, ref_pool(m, 1, cfg), 1e-12);
  const double focal_only = cfg.focal_lambda * std::log(cfg.epsilon);
  const double pooled_only = ref_pool(m, 1, no_focal());
  EXPECT_LT(got, 0.0);
  EXPECT_GT(std::abs(got - pooled_only), std::abs(pooled_only));
  EXPECT_NEAR(got - pooled_only, focal_only, 1e-3);
}

TEST(GwpPool, OneHotConcentratedEqualsScore) {
  // 20 pixels carry all the weight of channel 1 with score 1.
  ScoreMap m(2, 5, 5, Semantics::Scores);
  for (int i = 0; i < 25; ++i) {
    const bool on = i < 20;
    m.at(0, i) = on ? -40.0 : 0.0;
    m.at(1, i) = on ? 1.0 : -80.0;
  }
  const std::vector<int> ch{1};
  EXPECT_NEAR(gwp_pool(m, ch, no_focal())[0], 1.0, 1e-6);
}

TEST(GwpPool, MatchesReferenceOnRandomMaps) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    ScoreMap m(4, 3, 4, Semantics::Scores);
    for (double& v : m.data()) v = rng.normal(0.0, 3.0);
    PoolingConfig cfg;
    cfg.focal_lambda = rng.uniform(0.0, 1.0);
    cfg.focal_p = rng.uniform_int(1, 4);
    const std::vector<int> ch{1, 3};
    const auto got = gwp_pool(m, ch, cfg);
    EXPECT_NEAR(got[0], ref_pool(m, 1, cfg), 1e-12);
    EXPECT_NEAR(got[1], ref_pool(m, 3, cfg), 1e-12);
  }
}

TEST(GwpPool, EmptyChannelSetThrows) {
  EXPECT_THROW(gwp_pool(ScoreMap(2, 2, 2), std::vector<int>{}, PoolingConfig{}), Error);
}

TEST(GwpPool, BackwardMatchesFiniteDifferences) {
  Rng rng(9);
  ScoreMap m(3, 2, 3, Semantics::Scores);
  for (double& v : m.data()) v = rng.normal(0.0, 1.5);
  PoolingConfig cfg;
  cfg.focal_lambda = 0.3;
  const std::vector<int> ch{1, 2};
  const std::vector<double> up{0.7, -1.3};
  const ScoreMap g = gwp_pool_backward(m, ch, cfg, up);
  const double h = 1e-6;
  for (std::size_t k = 0; k < m.data().size(); ++k) {
    ScoreMap a = m, b = m;
    a.data()[k] += h;
    b.data()[k] -= h;
    const auto pa = gwp_pool(a, ch, cfg), pb = gwp_pool(b, ch, cfg);
    const double num = (up[0] * (pa[0] - pb[0]) + up[1] * (pa[1] - pb[1])) / (2 * h);
    EXPECT_NEAR(g.data()[k], num, 1e-7);
  }
}

TEST(LossCls, LargePositiveLogitWithLabelIsNearZero) {
  const double got = loss_cls_pooled(std::vector<int>{1}, std::vector<double>{30.0});
  EXPECT_NEAR(got, -std::log1p(-1e-7), 1e-15);
  EXPECT_LT(got, 1e-6);
}

TEST(LossCls, ZeroLogitIsLn2PerClass) {
  EXPECT_NEAR(loss_cls_pooled(std::vector<int>{1, 0}, std::vector<double>{0.0, 0.0}),
              std::log(2.0), 1e-12);
}

TEST(LossCls, ScalarExample) {
  const double expect = (ref_bce(1, ref_sig(2.0)) + ref_bce(0, ref_sig(-1.0))) / 2;
  const double got = loss_cls_pooled(std::vector<int>{1, 0}, std::vector<double>{2.0, -1.0});
  EXPECT_NEAR(got, expect, 1e-12);
  EXPECT_NEAR(got, 0.220095, 1e-6);
}

TEST(LossCls, MapFormUsesPoolingOfNewChannels) {
  Rng rng(21);
  ScoreMap m(4, 3, 3, Semantics::Scores);
  for (double& v : m.data()) v = rng.normal(0.0, 2.0);
  const PoolingConfig cfg;
  const std::vector<int> y{0, 1}, ch{2, 3};
  const double expect =
      (ref_bce(0, ref_sig(ref_pool(m, 2, cfg))) + ref_bce(1, ref_sig(ref_pool(m, 3, cfg)))) / 2;
  EXPECT_NEAR(loss_cls(y, m, ch, cfg), expect, 1e-12);
  EXPECT_THROW(loss_cls(std::vector<int>{1}, m, ch, cfg), ShapeError);
  EXPECT_THROW(loss_cls(std::vector<int>{}, m, std::vector<int>{}, cfg), Error);
}

TEST(LossLoc, MatchingLogitsGiveEntropy) {
  ScoreMap old(2, 1, 3, Semantics::Logits, {0.0, 0.0, 0.0, 1.5, -0.5, 3.0});
  const std::vector<int> ch{1};
  double ent = 0.0;
  for (double z : {1.5, -0.5, 3.0}) ent += ref_bce(ref_sig(z), ref_sig(z));
  EXPECT_NEAR(loss_loc(old, old, ch), ent / 3, 1e-12);
}

TEST(LossLoc, SaturatedDisagreementIsClipped) {
  ScoreMap old(2, 1, 1, Semantics::Logits, {0.0, -1e9});
  ScoreMap s(2, 1, 1, Semantics::Scores, {0.0, 1e9});
  const std::vector<int> ch{1};
  EXPECT_NEAR(loss_loc(old, s, ch), -std::log(1e-7), 1e-6);
}

TEST(LossLoc, ScalarExample) {
  ScoreMap old(2, 1, 2, Semantics::Logits, {0.0, 0.0, 0.0, 2.0});
  ScoreMap s(2, 1, 2, Semantics::Scores, {0.0, 0.0, 1.0, 1.0});
  const std::vector<int> ch{1};
  const double a = ref_bce(0.5, ref_sig(1.0)), b = ref_bce(ref_sig(2.0), ref_sig(1.0));
  EXPECT_NEAR(a, 0.81326, 1e-5);
  EXPECT_NEAR(b, 0.432465, 1e-6);
  EXPECT_NEAR(loss_loc(old, s, ch), (a + b) / 2, 1e-12);
  EXPECT_NEAR(loss_loc(old, s, ch), 0.622863, 1e-6);
}

TEST(LossLoc, PerPixelMinimumAtMatchingProbability) {
  for (int a = 1; a < 20; ++a) {
    const double t = a / 20.0;
    double best_p = 0.0, best = 1e300;
    for (int b = 1; b < 1000; ++b) {
      const double p = b / 1000.0;
      if (bce(t, p) < best) {
        best = bce(t, p);
        best_p = p;
      }
    }
    EXPECT_NEAR(best_p, t, 1e-3);
  }
}

TEST(Losses, NonNegativeAndFinite) {
  Rng rng(17);
  for (int t = 0; t < 100; ++t) {
    ScoreMap old(3, 2, 2, Semantics::Logits), s(3, 2, 2, Semantics::Scores);
    for (double& v : old.data()) v = rng.normal(0.0, 50.0);
    for (double& v : s.data()) v = rng.normal(0.0, 50.0);
    const std::vector<int> ch{1, 2}, y{rng.uniform_int(0, 1), rng.uniform_int(0, 1)};
    const double l1 = loss_loc(old, s, ch), l2 = loss_cls(y, s, ch, PoolingConfig{});
    EXPECT_TRUE(std::isfinite(l1) && l1 >= 0.0);
    EXPECT_TRUE(std::isfinite(l2) && l2 >= 0.0);
  }
}

TEST(PoolingConfig, RejectsBadValues) {
  PoolingConfig c;
  c.focal_p = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}
