#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "pepo/environment.hpp"
#include "pepo/numerics.hpp"
#include "pepo/policy.hpp"
#include "pepo/rng.hpp"

namespace pepo {

struct SamplingConfig {
  std::size_t group_size = 8;
  double temperature = 1.0;
  double top_p = 1.0;
  std::size_t max_len = 8;
  bool greedy = false;
  // Threads used to generate rollouts of one group. Output does not depend on it.
  std::size_t workers = 1;

  void validate() const {
    if (group_size < 2) throw ConfigError("rollout.group_size", "must be at least 2");
    if (!(temperature > 0.0)) throw ConfigError("rollout.temperature", "must be positive");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("rollout.top_p", "must lie in (0, 1]");
    if (max_len < 2) throw ConfigError("rollout.max_len", "must be at least 2");
    if (workers < 1) throw ConfigError("rollout.workers", "must be at least 1");
  }

  friend bool operator==(const SamplingConfig&, const SamplingConfig&) = default;
};

struct Rollout {
  std::vector<TokenId> token_ids;
  std::vector<double> logprobs;         // log q(token), q = post-top-p sampling distribution
  std::vector<double> policy_logprobs;  // log p(token), p = temperature-scaled policy distribution
  std::vector<double> entropies;        // H(p) in nats
  Tensor hidden;                        // [L x T x d] response positions
  Tensor vision_hidden;                 // [L x N x d] vision positions
  env::RewardBreakdown reward;
  bool truncated = false;
  std::uint64_t seed = 0;

  std::size_t length() const noexcept { return token_ids.size(); }

  friend bool operator==(const Rollout&, const Rollout&) = default;
};

struct GroupBatch {
  env::Task task;
  std::vector<Rollout> rollouts;
  std::uint64_t group_seed = 0;

  friend bool operator==(const GroupBatch&, const GroupBatch&) = default;
};

/// Keeps the smallest probability-sorted prefix with mass >= top_p (ties by
/// ascending id) and renormalizes it.
inline std::vector<double> top_p_filter(std::span<const double> p, double top_p) {
  std::vector<double> out(p.begin(), p.end());
  if (top_p >= 1.0 || p.empty()) return out;
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += p[order[keep]];
    ++keep;
    if (mass >= top_p) break;
  }
  std::fill(out.begin(), out.end(), 0.0);
  double kept = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept += p[order[i]];
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = p[order[i]] / kept;
  return out;
}

namespace detail {

inline std::size_t argmax_lowest(std::span<const double> x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return best;
}

inline std::size_t sample_index(std::span<const double> q, double u) {
  double c = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] <= 0.0) continue;
    last = i;
    c += q[i];
    if (u < c) return i;
  }
  return last;
}

}  // namespace detail

/// Response-position hidden states [L x T x d] and vision-position states
/// [L x N x d] from a full-sequence trace.
inline void extract_hidden(const ForwardTrace& trace, std::size_t response_begin, std::size_t response_len,
                           Tensor& hidden, Tensor& vision_hidden) {
  const std::size_t layers = trace.hidden.dim(0);
  const std::size_t d = trace.hidden.dim(2);
  const std::size_t n = trace.vision_span.second - trace.vision_span.first;
  hidden = Tensor({layers, response_len, d}, 0.0);
  vision_hidden = Tensor({layers, n, d}, 0.0);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t t = 0; t < response_len; ++t) {
      const auto src = trace.hidden.fiber(l, response_begin + t);
      std::copy(src.begin(), src.end(), hidden.data().begin() + static_cast<std::ptrdiff_t>((l * response_len + t) * d));
    }
    for (std::size_t v = 0; v < n; ++v) {
      const auto src = trace.hidden.fiber(l, trace.vision_span.first + v);
      std::copy(src.begin(), src.end(), vision_hidden.data().begin() + static_cast<std::ptrdiff_t>((l * n + v) * d));
    }
  }
}

/// Autoregressively samples one response. Entropy and the policy
/// log-probability come from the temperature-scaled distribution before
/// top-p truncation.
inline Rollout sample_rollout(const PolicyState& state, const env::Task& task, const SamplingConfig& cfg,
                              std::uint64_t seed, const env::RewardWeights& weights = {}) {
  Rng rng(seed);
  Rollout r;
  r.seed = seed;
  std::vector<TokenId> seq = task.prompt_tokens;
  const std::size_t prompt_len = seq.size();
  const std::size_t n_vis = task.vision_feats.rows();
  for (std::size_t step = 0; step < cfg.max_len; ++step) {
    const ForwardTrace trace = forward(state, task.vision_feats, seq);
    const auto last = trace.logits.row(n_vis + seq.size() - 1);
    std::vector<double> scaled(last.begin(), last.end());
    // Multiply by the reciprocal so sampling matches the loss path bit for bit.
    const double inv_t = 1.0 / cfg.temperature;
    if (cfg.temperature != 1.0) {
      for (double& v : scaled) v *= inv_t;
    }
    const std::vector<double> logp = numerics::log_softmax(scaled);
    std::vector<double> p(logp.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logp[i]);
    double h = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] > 0.0) h -= p[i] * logp[i];
    }

    std::size_t tok;
    double sample_logprob;
    if (cfg.greedy) {
      tok = detail::argmax_lowest(logp);
      sample_logprob = 0.0;
    } else {
      const std::vector<double> q = top_p_filter(p, cfg.top_p);
      tok = detail::sample_index(q, rng.uniform());
      sample_logprob = cfg.top_p >= 1.0 ? logp[tok] : std::log(q[tok]);
    }
    seq.push_back(static_cast<TokenId>(tok));
    r.token_ids.push_back(static_cast<TokenId>(tok));
    r.logprobs.push_back(sample_logprob);
    r.policy_logprobs.push_back(logp[tok]);
    r.entropies.push_back(std::max(h, 0.0));
    if (static_cast<TokenId>(tok) == env::Vocabulary::kEos) break;
  }
  r.truncated = r.token_ids.back() != env::Vocabulary::kEos;
  const ForwardTrace full = forward(state, task.vision_feats, seq, prompt_len);
  extract_hidden(full, full.response_span.first, r.token_ids.size(), r.hidden, r.vision_hidden);
  r.reward = env::reward(r.token_ids, task, weights);
  return r;
}

inline std::uint64_t rollout_seed(std::uint64_t group_seed, std::size_t index) {
  return derive_seed(group_seed, {0x726f6c6cULL, index});
}

/// Draws G responses for one task. Rollout i uses its own seed stream, so the
/// batch is identical for any worker count.
inline GroupBatch generate_group(const PolicyState& state, const env::Task& task, const SamplingConfig& cfg,
                                 std::uint64_t group_seed, const env::RewardWeights& weights = {}) {
  cfg.validate();
  GroupBatch batch;
  batch.task = task;
  batch.group_seed = group_seed;
  batch.rollouts.resize(cfg.group_size);
  const std::size_t workers = std::min(cfg.workers, cfg.group_size);
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < cfg.group_size; i += workers) {
      batch.rollouts[i] = sample_rollout(state, task, cfg, rollout_seed(group_seed, i), weights);
    }
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
  }
  return batch;
}

/// Greedy decode of a single response (evaluation path).
inline Rollout greedy_decode(const PolicyState& state, const env::Task& task, std::size_t max_len,
                             const env::RewardWeights& weights = {}) {
  SamplingConfig cfg;
  cfg.greedy = true;
  cfg.max_len = max_len;
  return sample_rollout(state, task, cfg, 0, weights);
}

inline std::vector<double> rewards_of(const GroupBatch& batch) {
  std::vector<double> out;
  out.reserve(batch.rollouts.size());
  for (const auto& r : batch.rollouts) out.push_back(r.reward.total);
  return out;
}

}  // namespace pepo
