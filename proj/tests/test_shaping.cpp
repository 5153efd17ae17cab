#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "oracles.hpp"
#include "pepo/shaping.hpp"

using namespace pepo;
using namespace pepo::shaping;

namespace {

std::vector<double> randn(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

Tensor random_cube(Rng& rng, std::size_t a, std::size_t b, std::size_t c) {
  Tensor t({a, b, c}, 0.0);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

oracle::Cube to_cube(const Tensor& t) {
  oracle::Cube c(t.dim(0), std::vector<std::vector<double>>(t.dim(1), std::vector<double>(t.dim(2))));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j)
      for (std::size_t k = 0; k < t.dim(2); ++k) c[i][j][k] = t.at(i, j, k);
  return c;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

ShapingConfig with_mode(WeightingMode m, double alpha = 0.05, bool minmax = true) {
  ShapingConfig c;
  c.mode = m;
  c.alpha = alpha;
  c.use_minmax = minmax;
  return c;
}

}  // namespace

TEST(GroupAdvantages, Examples) {
  EXPECT_EQ(grpo_advantages(std::vector<double>{1, 1, 0, 0}, 0.0), (std::vector<double>{1, 1, -1, -1}));
  const auto a = grpo_advantages(std::vector<double>{1, 0, 0, 0}, 0.0);
  EXPECT_NEAR(a[0], std::sqrt(3.0), 1e-12);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(a[i], -1.0 / std::sqrt(3.0), 1e-12);
  EXPECT_EQ(grpo_advantages(std::vector<double>{0.5, 0.5, 0.5}, 1e-6), (std::vector<double>{0, 0, 0}));
  EXPECT_THROW(grpo_advantages(std::vector<double>{1.0}, 1e-6), std::invalid_argument);
}

TEST(GroupAdvantages, StandardizedMoments) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto r = randn(rng, 8);
    const auto a = grpo_advantages(r, 0.0);
    EXPECT_NEAR(mean_of(a), 0.0, 1e-12);
    double var = 0.0;
    for (double v : a) var += v * v;
    EXPECT_NEAR(std::sqrt(var / 8), 1.0, 1e-9);
    const auto o = oracle::group_advantages(r, 1e-6);
    const auto b = grpo_advantages(r, 1e-6);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(b[k], o[k], 1e-12);
  }
}

TEST(VisualSimilarity, TrivialCases) {
  Tensor h({1, 1, 3}, std::vector<double>{1, 2, 3});
  EXPECT_NEAR(visual_similarity(h, h, {}, SimilarityMetric::cosine)[0], 1.0, 1e-15);
  Tensor v({1, 2, 3}, std::vector<double>{0, 0, 1, 0, 3, -2});
  Tensor h2({1, 1, 3}, std::vector<double>{1, 0, 0});
  EXPECT_EQ(visual_similarity(h2, v, {}, SimilarityMetric::cosine)[0], 0.0);
}

TEST(VisualSimilarity, MatchesTripleLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = 1 + rng.below(4), N = 1 + rng.below(8), T = 1 + rng.below(16), d = 1 + rng.below(32);
    const Tensor h = random_cube(rng, L, T, d), v = random_cube(rng, L, N, d);
    const auto hc = to_cube(h), vc = to_cube(v);
    for (std::size_t first = 1; first <= L; ++first) {
      for (std::size_t last = first; last <= L; ++last) {
        const LayerRange range{first, last == L && rng.below(2) ? 0 : last};
        for (auto [m, om] : {std::pair{SimilarityMetric::cosine, oracle::Metric::cosine},
                             std::pair{SimilarityMetric::neg_l1, oracle::Metric::neg_l1},
                             std::pair{SimilarityMetric::neg_l2, oracle::Metric::neg_l2}}) {
          const auto got = visual_similarity(h, v, range, m);
          const auto want = oracle::visual_similarity(hc, vc, first, last, om);
          for (std::size_t t = 0; t < T; ++t) ASSERT_NEAR(got[t], want[t], 1e-12);
        }
      }
    }
  }
}

TEST(VisualSimilarity, ZeroHiddenStateUnderCosineIsAnError) {
  Tensor h({1, 1, 2}, 0.0);
  Tensor v({1, 1, 2}, 1.0);
  EXPECT_THROW(visual_similarity(h, v, {}, SimilarityMetric::cosine), DegenerateInputError);
  EXPECT_NO_THROW(visual_similarity(h, v, {}, SimilarityMetric::neg_l2));
}

TEST(VisualSimilarity, LayerRangeMustFitModel) {
  Rng rng(3);
  const Tensor h = random_cube(rng, 2, 3, 4), v = random_cube(rng, 2, 2, 4);
  EXPECT_THROW(visual_similarity(h, v, LayerRange{1, 3}, SimilarityMetric::cosine), std::invalid_argument);
  EXPECT_THROW(visual_similarity(h, v, LayerRange{3, 0}, SimilarityMetric::cosine), std::invalid_argument);
}

TEST(LayerRange, Parse) {
  EXPECT_EQ(LayerRange::parse("all"), (LayerRange{1, 0}));
  EXPECT_EQ(LayerRange::parse("2-4"), (LayerRange{2, 4}));
  EXPECT_EQ(LayerRange::parse("3"), (LayerRange{3, 3}));
  EXPECT_EQ(LayerRange::parse("2-last"), (LayerRange{2, 0}));
  EXPECT_THROW(LayerRange::parse("4-2"), ConfigError);
  EXPECT_THROW(LayerRange::parse("x"), ConfigError);
  EXPECT_EQ(LayerRange::parse(LayerRange{2, 3}.str()), (LayerRange{2, 3}));
}

TEST(FuseWeights, ConstantSignalsGiveUnitWeights) {
  const std::vector<double> vs(5, 0.3), h(5, 1.2);
  const auto f = fuse_weights(vs, h, with_mode(WeightingMode::pepo, 0.1));
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_NEAR(f.weights[t], 1.0, 1e-15);
    EXPECT_EQ(f.gate[t], 0.0);
  }
}

TEST(FuseWeights, AlphaZeroExample) {
  const std::vector<double> vs{0.0, std::log(3.0)}, h{0.4, 0.1};
  const auto f = fuse_weights(vs, h, with_mode(WeightingMode::pepo, 0.0));
  EXPECT_NEAR(f.weights[0], 0.5, 1e-15);
  EXPECT_NEAR(f.weights[1], 1.5, 1e-15);
}

TEST(FuseWeights, TwoTokenExampleMatchesOracle) {
  const std::vector<double> vs{0.2, 0.4}, h{1.0, 0.5};
  const auto f = fuse_weights(vs, h, with_mode(WeightingMode::pepo, 0.1));
  const auto o = oracle::fuse(vs, h, 0.1, oracle::Fusion::pepo, true);
  EXPECT_NEAR(f.weights[0] + f.weights[1], 2.0, 1e-15);
  EXPECT_GT(f.weights[1], f.weights[0]);
  EXPECT_NEAR(f.weights[0], o.w[0], 1e-15);
  EXPECT_NEAR(f.weights[1], o.w[1], 1e-15);
}

TEST(FuseWeights, MatchesScalarOracleInEveryMode) {
  Rng rng(4);
  const std::pair<WeightingMode, oracle::Fusion> modes[] = {
      {WeightingMode::pepo, oracle::Fusion::pepo},
      {WeightingMode::perception_only, oracle::Fusion::perception_only},
      {WeightingMode::exploration_only, oracle::Fusion::exploration_only},
      {WeightingMode::additive_fusion, oracle::Fusion::additive}};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng.below(16);
    const auto vs = randn(rng, T, 0.5);
    std::vector<double> h(T);
    for (double& x : h) x = 3.0 * rng.uniform();
    const double alpha = rng.uniform(0.0, 0.3);
    for (auto [mode, om] : modes) {
      for (bool minmax : {true, false}) {
        const auto got = fuse_weights(vs, h, with_mode(mode, alpha, minmax));
        const auto want = oracle::fuse(vs, h, alpha, om, minmax);
        for (std::size_t t = 0; t < T; ++t) {
          ASSERT_NEAR(got.weights[t], want.w[t], 1e-10);
          ASSERT_NEAR(got.gate[t], want.gate[t], 1e-10);
        }
      }
    }
  }
}

TEST(FuseWeights, UnitMeanAndZeroGateSum) {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t T = 1 + rng.below(32);
    const auto vs = randn(rng, T, 2.0), h = randn(rng, T, 2.0);
    for (auto m : {WeightingMode::pepo, WeightingMode::perception_only, WeightingMode::exploration_only,
                   WeightingMode::additive_fusion}) {
      const auto f = fuse_weights(vs, h, with_mode(m, rng.uniform(0.0, 1.0)));
      EXPECT_NEAR(mean_of(f.weights), 1.0, 1e-9);
      EXPECT_NEAR(std::accumulate(f.gate.begin(), f.gate.end(), 0.0), 0.0, 1e-9);
    }
  }
}

TEST(FuseWeights, AlphaZeroEqualsPerceptionOnly) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng.below(12);
    const auto vs = randn(rng, T), h = randn(rng, T);
    EXPECT_EQ(fuse_weights(vs, h, with_mode(WeightingMode::pepo, 0.0)).weights,
              fuse_weights(vs, h, with_mode(WeightingMode::perception_only)).weights);
  }
}

TEST(FuseWeights, ContinuousInAlpha) {
  Rng rng(7);
  const auto vs = randn(rng, 9), h = randn(rng, 9);
  const auto a = fuse_weights(vs, h, with_mode(WeightingMode::pepo, 0.05)).weights;
  const auto b = fuse_weights(vs, h, with_mode(WeightingMode::pepo, 0.05 + 1e-9)).weights;
  for (std::size_t t = 0; t < 9; ++t) EXPECT_NEAR(a[t], b[t], 1e-7);
}

TEST(FuseWeights, EntropyShiftInvariantWithMinMax) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 2 + rng.below(10);
    const auto vs = randn(rng, T), h = randn(rng, T);
    std::vector<double> shifted = h;
    for (double& x : shifted) x += 4.0;
    const auto a = fuse_weights(vs, h, with_mode(WeightingMode::pepo, 0.2));
    const auto b = fuse_weights(vs, shifted, with_mode(WeightingMode::pepo, 0.2));
    for (std::size_t t = 0; t < T; ++t) EXPECT_NEAR(a.weights[t], b.weights[t], 1e-12);
  }
}

TEST(FuseWeights, RaisingOneGateDoesNotLowerItsWeight) {
  // With nonnegative VS, raising one token's entropy raises its gate while the
  // centring lowers everyone else's, so its weight cannot fall.
  Rng rng(9);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t T = 2 + rng.below(10);
    std::vector<double> vs(T), h(T);
    for (auto& x : vs) x = rng.uniform();
    for (auto& x : h) x = rng.uniform();
    const std::size_t j = rng.below(T);
    std::vector<double> h2 = h;
    h2[j] += rng.uniform(0.01, 0.5);
    const auto cfg = with_mode(WeightingMode::pepo, 0.5, false);
    const auto a = fuse_weights(vs, h, cfg), b = fuse_weights(vs, h2, cfg);
    ASSERT_GT(b.gate[j], a.gate[j]);
    EXPECT_GE(b.weights[j], a.weights[j] - 1e-15);
  }
}

TEST(FuseWeights, Errors) {
  EXPECT_THROW(fuse_weights(std::vector<double>{}, std::vector<double>{}, ShapingConfig{}), std::invalid_argument);
  EXPECT_THROW(fuse_weights(std::vector<double>{1}, std::vector<double>{1, 2}, ShapingConfig{}),
               std::invalid_argument);
}

TEST(LambdaSchedule, Examples) {
  EXPECT_EQ(lambda_schedule(0, 300, true), 0.0);
  EXPECT_EQ(lambda_schedule(300, 300, true), 1.0);
  EXPECT_EQ(lambda_schedule(150, 300, true), 0.5);
  EXPECT_EQ(lambda_schedule(400, 300, true), 1.0);
  EXPECT_EQ(lambda_schedule(7, 300, false), 1.0);
}

TEST(TokenAdvantages, Examples) {
  const std::vector<double> w{1.5, 0.5};
  EXPECT_EQ(token_advantages(2.0, w, 0.0), (std::vector<double>{2.0, 2.0}));
  EXPECT_EQ(token_advantages(2.0, std::vector<double>{1, 1}, 1.0), (std::vector<double>{2.0, 2.0}));
  EXPECT_EQ(token_advantages(2.0, w, 0.5), (std::vector<double>{2.5, 1.5}));
}

TEST(TokenAdvantages, MassPreserved) {
  Rng rng(10);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t T = 1 + rng.below(20);
    const auto f = fuse_weights(randn(rng, T), randn(rng, T), with_mode(WeightingMode::pepo, 0.1));
    const double A = rng.normal();
    for (double lambda : {0.0, 0.25, 0.5, 1.0}) {
      const auto at = token_advantages(A, f.weights, lambda);
      const double mass = std::accumulate(at.begin(), at.end(), 0.0);
      EXPECT_NEAR(mass, T * A, 1e-9 * std::max(1.0, std::abs(T * A)));
    }
  }
}

TEST(HighEntropyMask, Examples) {
  EXPECT_EQ(high_entropy_mask(std::vector<double>{3, 1, 2}, 1.0), (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(high_entropy_mask(std::vector<double>{1, 2, 3, 4, 5}, 0.2), (std::vector<double>{0, 0, 0, 0, 1}));
  const auto m = high_entropy_mask(std::vector<double>{0.1, 0.7, 0.3}, 0.2);
  EXPECT_EQ(std::accumulate(m.begin(), m.end(), 0.0), 1.0);
  EXPECT_EQ(m[1], 1.0);
}

TEST(HighEntropyMask, TiesGoToEarlierPositions) {
  EXPECT_EQ(high_entropy_mask(std::vector<double>{2, 2, 2, 2}, 0.5), (std::vector<double>{1, 1, 0, 0}));
}

TEST(HighEntropyMask, CeilingCount) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng.below(30);
    const auto m = high_entropy_mask(randn(rng, T), 0.2);
    EXPECT_EQ(std::accumulate(m.begin(), m.end(), 0.0), std::ceil(0.2 * T - 1e-9));
  }
}

TEST(ShapeRollout, ModeSpecificAdvantages) {
  Rng rng(12);
  Rollout r;
  r.token_ids = {3, 5, 2, 7, 8};
  r.entropies = {0.1, 0.9, 0.3, 0.5, 0.2};
  r.hidden = random_cube(rng, 2, 5, 4);
  r.vision_hidden = random_cube(rng, 2, 3, 4);
  const double A = -0.7;

  const auto uniform = shape_rollout(r, A, with_mode(WeightingMode::grpo_uniform), 0.6);
  EXPECT_EQ(uniform.token_adv, std::vector<double>(5, A));
  EXPECT_EQ(uniform.lambda_used, 0.0);

  const auto he = shape_rollout(r, A, with_mode(WeightingMode::high_entropy), 0.6);
  EXPECT_EQ(he.token_adv, (std::vector<double>{0, A, 0, 0, 0}));
  EXPECT_EQ(he.active_tokens(WeightingMode::high_entropy), (std::vector<std::size_t>{1}));

  const auto pepo = shape_rollout(r, A, with_mode(WeightingMode::pepo), 0.6);
  EXPECT_EQ(pepo.lambda_used, 0.6);
  EXPECT_EQ(pepo.token_adv, token_advantages(A, pepo.weights, 0.6));
  EXPECT_EQ(pepo.active_tokens(WeightingMode::pepo).size(), 5u);

  const auto reduced = shape_rollout(r, A, with_mode(WeightingMode::pepo), 0.0);
  EXPECT_EQ(reduced.token_adv, uniform.token_adv);
}
