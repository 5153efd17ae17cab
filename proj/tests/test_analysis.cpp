#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "pepo/analysis.hpp"

using namespace pepo;
using namespace pepo::analysis;

namespace {

PolicyState small_policy(std::uint64_t seed) {
  const env::GeneratorConfig gen;
  PolicyConfig c;
  c.vocab_size = gen.vocabulary().size();
  c.vision_dim = gen.vision_dim;
  c.model_dim = 16;
  c.num_layers = 3;
  c.num_heads = 2;
  c.ffn_dim = 24;
  c.max_positions = 16;
  c.seed = seed;
  return init_policy(c);
}

// Per-token layer-averaged L2 distance, computed straight from two traces.
std::vector<double> shift_oracle(const ForwardTrace& a, const ForwardTrace& b, std::size_t len) {
  const std::size_t layers = a.hidden.dim(0), d = a.hidden.dim(2);
  std::vector<double> out(len, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t l = 0; l < layers; ++l) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double x = a.hidden.at(l, a.response_span.first + t, k) - b.hidden.at(l, b.response_span.first + t, k);
        s += x * x;
      }
      out[t] += std::sqrt(s);
    }
    out[t] /= static_cast<double>(layers);
  }
  return out;
}

}  // namespace

TEST(Aggregates, Example) {
  const std::vector<double> vs{0.1, 0.5, 0.3, 0.9, 0.2};
  const auto a = aggregate_vs(vs, 1);
  EXPECT_NEAR(a.m_glob, 0.4, 1e-15);
  EXPECT_EQ(a.m_high, 0.9);
  EXPECT_EQ(a.m_low, 0.1);
  const auto b = aggregate_vs(vs, 2);
  EXPECT_NEAR(b.m_high, 0.7, 1e-15);
  EXPECT_NEAR(b.m_low, 0.15, 1e-15);
  EXPECT_THROW(aggregate_vs(vs, 0), std::invalid_argument);
  EXPECT_THROW(aggregate_vs(vs, 6), std::invalid_argument);
}

TEST(Aggregates, DefaultK) {
  EXPECT_EQ(default_k(1), 1u);
  EXPECT_EQ(default_k(5), 1u);
  EXPECT_EQ(default_k(10), 2u);
  EXPECT_EQ(default_k(11), 3u);
}

TEST(Aggregates, OrderingHolds) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> vs(1 + rng.below(20));
    for (double& v : vs) v = rng.normal();
    const auto a = aggregate_vs(vs, default_k(vs.size()));
    EXPECT_LE(a.m_low, a.m_glob + 1e-12);
    EXPECT_LE(a.m_glob, a.m_high + 1e-12);
  }
}

TEST(CorrectnessSplit, PartitionsByAccuracy) {
  std::vector<ResponseRecord> rs(3);
  rs[0].vs = {0.1, 0.2};
  rs[0].correct = true;
  rs[1].vs = {0.4};
  rs[2].vs = {0.3, 0.9, 0.0, 0.5, 0.5, 0.5};
  rs[2].correct = true;
  const auto split = correctness_split(rs);
  ASSERT_EQ(split.correct.size(), 2u);
  ASSERT_EQ(split.incorrect.size(), 1u);
  EXPECT_EQ(split.correct[1].k_used, 2u);
  EXPECT_NEAR(split.correct[1].m_high, 0.7, 1e-15);
  const auto pinned = correctness_split(rs, 4);
  EXPECT_EQ(pinned.correct[0].k_used, 2u);  // clipped to the response length
  EXPECT_EQ(pinned.correct[1].k_used, 4u);
}

TEST(Histogram, LayoutAndCounts) {
  std::vector<ResponseRecord> rs(10);
  Rng rng(2);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    rs[i].vs.resize(6);
    for (double& v : rs[i].vs) v = rng.normal();
    rs[i].correct = i % 3 == 0;
  }
  std::istringstream in(histogram_csv(correctness_split(rs)));
  std::string line;
  std::getline(in, line);
  EXPECT_TRUE(line.starts_with("# bins=64 lo="));
  std::getline(in, line);
  EXPECT_EQ(line, "bin,lo,hi,correct_glob,correct_high,correct_low,incorrect_glob,incorrect_high,incorrect_low");
  std::vector<std::size_t> totals(6, 0);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (int c = 0; c < 3; ++c) std::getline(ss, cell, ',');
    for (std::size_t c = 0; c < 6; ++c) {
      std::getline(ss, cell, ',');
      totals[c] += std::stoul(cell);
    }
    ++rows;
  }
  EXPECT_EQ(rows, 64u);
  EXPECT_EQ(totals, (std::vector<std::size_t>{4, 4, 4, 6, 6, 6}));
}

TEST(BinnedShift, EqualCountBinsWithRemainderFirst) {
  const std::vector<double> d{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const std::vector<double> rank{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
  const auto b = binned_shift(d, rank, 3);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0], 8.5);  // lowest four ranks: d = 10, 9, 8, 7
  EXPECT_EQ(b[1], 5.0);
  EXPECT_EQ(b[2], 2.0);
  const auto sparse = binned_shift(std::vector<double>{1, 2}, std::vector<double>{0, 0}, 3);
  EXPECT_EQ(sparse[0], 1.0);  // stable order keeps the earlier token first
  EXPECT_EQ(sparse[1], 2.0);
  EXPECT_TRUE(std::isnan(sparse[2]));
  EXPECT_THROW(binned_shift(d, std::vector<double>{1}, 2), std::invalid_argument);
}

TEST(FrequencyPartition, RecoversPlantedOrdering) {
  // Token 7 is always uncertain, token 9 always certain, token 8 in between;
  // token 6 is high but too rare to report.
  std::vector<ResponseRecord> corpus;
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    ResponseRecord r;
    r.token_ids = {7, 8, 9, 8};
    r.entropies = {2.0 + 0.01 * rng.normal(), 1.0 + 0.01 * rng.normal(), 0.1, 1.0};
    r.vs = {0.1, 0.2, 0.3, 0.2};
    if (i < 10) {
      r.token_ids.push_back(6);
      r.entropies.push_back(5.0);
      r.vs.push_back(0.9);
    }
    corpus.push_back(std::move(r));
  }
  const auto rows = frequency_partition(corpus, Ranking::entropy, 50, 100);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].id, 7);
  EXPECT_EQ(rows[1].id, 8);
  EXPECT_EQ(rows[2].id, 9);
  EXPECT_EQ(rows[1].count, 400u);
  EXPECT_NEAR(rows[2].mean, 0.1, 1e-15);

  const auto by_vs = frequency_partition(corpus, Ranking::vs, 5, 2);
  ASSERT_EQ(by_vs.size(), 2u);
  EXPECT_EQ(by_vs[0].id, 6);
  EXPECT_EQ(by_vs[1].id, 9);
}

TEST(FrequencyPartition, TiesOrderedById) {
  std::vector<ResponseRecord> corpus(1);
  corpus[0].token_ids = {5, 3, 4};
  corpus[0].entropies = {1.0, 1.0, 1.0};
  corpus[0].vs = {0, 0, 0};
  const auto rows = frequency_partition(corpus, Ranking::entropy, 1, 10);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].id, 3);
  EXPECT_EQ(rows[1].id, 4);
  EXPECT_EQ(rows[2].id, 5);
}

TEST(Parsing, UnknownNamesAreConfigErrors) {
  EXPECT_EQ(parse_removal("delete"), RemovalMode::delete_prefix);
  EXPECT_EQ(parse_removal("zero-features"), RemovalMode::zero_features);
  EXPECT_THROW(parse_removal("mask"), ConfigError);
  EXPECT_EQ(parse_ranking("vs"), Ranking::vs);
  EXPECT_THROW(parse_ranking("loss"), ConfigError);
}

TEST(HiddenShift, LayerMeanShiftMatchesDefinition) {
  Rng rng(4);
  Tensor a({3, 5, 4}, 0.0), b({3, 5, 4}, 0.0);
  for (double& v : a.data()) v = rng.normal();
  for (double& v : b.data()) v = rng.normal();
  const auto d = layer_mean_shift(a, b);
  for (std::size_t t = 0; t < 5; ++t) {
    double want = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += (a.at(l, t, k) - b.at(l, t, k)) * (a.at(l, t, k) - b.at(l, t, k));
      want += std::sqrt(s) / 3.0;
    }
    EXPECT_NEAR(d[t], want, 1e-12);
  }
  EXPECT_EQ(layer_mean_shift(a, a), std::vector<double>(5, 0.0));
}

TEST(HiddenShift, MatchesDirectReplayForEveryRemovalMode) {
  const PolicyState s = small_policy(5);
  const env::Task task = env::sample_task(11, env::GeneratorConfig{});
  const std::vector<TokenId> response{13, 3, 7, 2};
  std::vector<TokenId> seq = task.prompt_tokens;
  seq.insert(seq.end(), response.begin(), response.end());
  const std::size_t prompt = task.prompt_tokens.size();
  const ForwardTrace with = forward(s, task.vision_feats, seq, prompt);

  const ForwardTrace rel = forward(s, Tensor{}, seq, prompt, 0);
  const ForwardTrace abs = forward(s, Tensor{}, seq, prompt, task.vision_feats.rows());
  const ForwardTrace zero = forward(s, Tensor(task.vision_feats.shape(), 0.0), seq, prompt);

  auto check = [&](const std::vector<double>& got, const ForwardTrace& other) {
    const auto want = shift_oracle(with, other, response.size());
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t t = 0; t < want.size(); ++t) EXPECT_NEAR(got[t], want[t], 1e-12);
  };
  check(hidden_state_shift(s, task, response, {RemovalMode::delete_prefix, false}), rel);
  check(hidden_state_shift(s, task, response, {RemovalMode::delete_prefix, true}), abs);
  check(hidden_state_shift(s, task, response, {RemovalMode::zero_features, false}), zero);

  for (double v : hidden_state_shift(s, task, response)) EXPECT_GT(v, 0.0);
}

TEST(HiddenShift, ZeroImageUnderFeatureRemovalGivesNoShift) {
  const PolicyState s = small_policy(6);
  env::Task task = env::sample_task(12, env::GeneratorConfig{});
  task.vision_feats = Tensor(task.vision_feats.shape(), 0.0);
  const std::vector<TokenId> response{13, 3, 5, 2};
  for (double v : hidden_state_shift(s, task, response, {RemovalMode::zero_features, false})) EXPECT_EQ(v, 0.0);
}
