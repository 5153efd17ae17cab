#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pepo/errors.hpp"
#include "pepo/numerics.hpp"
#include "pepo/rollout.hpp"
#include "pepo/tensor.hpp"

// Token-level advantage shaping: group-relative sequence advantages, the
// hidden-state perception prior, perception/exploration fusion into unit-mean
// token weights, and the scheduled interpolation into token advantages.
namespace pepo::shaping {

enum class WeightingMode { pepo, perception_only, exploration_only, additive_fusion, grpo_uniform, high_entropy };
enum class SimilarityMetric { cosine, neg_l1, neg_l2 };

inline std::string_view to_string(WeightingMode m) {
  switch (m) {
    case WeightingMode::pepo: return "pepo";
    case WeightingMode::perception_only: return "perception_only";
    case WeightingMode::exploration_only: return "exploration_only";
    case WeightingMode::additive_fusion: return "additive_fusion";
    case WeightingMode::grpo_uniform: return "grpo_uniform";
    case WeightingMode::high_entropy: return "high_entropy";
  }
  return "?";
}

inline std::string_view to_string(SimilarityMetric m) {
  switch (m) {
    case SimilarityMetric::cosine: return "cosine";
    case SimilarityMetric::neg_l1: return "neg_l1";
    case SimilarityMetric::neg_l2: return "neg_l2";
  }
  return "?";
}

inline SimilarityMetric parse_metric(std::string_view s) {
  if (s == "cosine") return SimilarityMetric::cosine;
  if (s == "neg_l1" || s == "l1") return SimilarityMetric::neg_l1;
  if (s == "neg_l2" || s == "l2") return SimilarityMetric::neg_l2;
  throw ConfigError("shaping.similarity_metric", "unknown metric '" + std::string(s) + "'");
}

/// Inclusive 1-based layer interval. last == 0 means "through the final layer".
struct LayerRange {
  std::size_t first = 1;
  std::size_t last = 0;

  std::pair<std::size_t, std::size_t> resolve(std::size_t num_layers) const {
    const std::size_t hi = last == 0 ? num_layers : last;
    if (first < 1 || first > hi || hi > num_layers) {
      throw std::invalid_argument("layer range [" + std::to_string(first) + ", " + std::to_string(hi) +
                                  "] outside [1, " + std::to_string(num_layers) + "]");
    }
    return {first, hi};
  }

  std::string str() const {
    return last == 0 ? std::to_string(first) + "-last" : std::to_string(first) + "-" + std::to_string(last);
  }

  static LayerRange parse(std::string_view s) {
    if (s == "all") return {};
    const auto dash = s.find('-');
    auto num = [&](std::string_view part) -> std::size_t {
      if (part == "last") return 0;
      std::size_t v = 0;
      if (part.empty()) throw ConfigError("shaping.layer_range", "malformed '" + std::string(s) + "'");
      for (char ch : part) {
        if (ch < '0' || ch > '9') throw ConfigError("shaping.layer_range", "malformed '" + std::string(s) + "'");
        v = v * 10 + static_cast<std::size_t>(ch - '0');
      }
      return v;
    };
    if (dash == std::string_view::npos) {
      const std::size_t v = num(s);
      return {v, v};
    }
    LayerRange r{num(s.substr(0, dash)), num(s.substr(dash + 1))};
    if (r.first < 1 || (r.last != 0 && r.last < r.first)) {
      throw ConfigError("shaping.layer_range", "empty range '" + std::string(s) + "'");
    }
    return r;
  }

  friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

struct ShapingConfig {
  double alpha = 0.05;
  WeightingMode mode = WeightingMode::pepo;
  SimilarityMetric similarity_metric = SimilarityMetric::cosine;
  LayerRange layer_range;
  bool use_minmax = true;
  bool use_schedule = true;
  double entropy_quantile = 0.2;
  double adv_epsilon = 1e-6;
  // Pins lambda to a constant, bypassing the schedule.
  std::optional<double> lambda_override;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("shaping.alpha", "must be nonnegative");
    if (!(entropy_quantile > 0.0 && entropy_quantile <= 1.0)) {
      throw ConfigError("shaping.entropy_quantile", "must lie in (0, 1]");
    }
    if (!(adv_epsilon > 0.0)) throw ConfigError("shaping.adv_epsilon", "must be positive");
    if (lambda_override && !(*lambda_override >= 0.0 && *lambda_override <= 1.0)) {
      throw ConfigError("shaping.lambda_override", "must lie in [0, 1]");
    }
  }

  friend bool operator==(const ShapingConfig&, const ShapingConfig&) = default;
};

/// (R_i - mean R) / (population std R + eps).
inline std::vector<double> grpo_advantages(std::span<const double> rewards, double adv_epsilon) {
  if (rewards.size() < 2) throw std::invalid_argument("grpo_advantages: need at least 2 rewards");
  const double m = numerics::mean(rewards);
  double var = 0.0;
  for (double r : rewards) var += (r - m) * (r - m);
  const double sd = std::sqrt(var / static_cast<double>(rewards.size()));
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - m) / (sd + adv_epsilon);
  return out;
}

/// Per response token, the mean over selected layers and all vision tokens of
/// metric(h_{l,t}, v_{l,n}). hidden is [L x T x d], vision_hidden [L x N x d].
inline std::vector<double> visual_similarity(const Tensor& hidden, const Tensor& vision_hidden, LayerRange range,
                                             SimilarityMetric metric) {
  if (hidden.rank() != 3 || vision_hidden.rank() != 3) {
    throw std::invalid_argument("visual_similarity: expected rank-3 hidden arrays");
  }
  const std::size_t layers = hidden.dim(0);
  const std::size_t steps = hidden.dim(1);
  const std::size_t n = vision_hidden.dim(1);
  if (vision_hidden.dim(0) != layers || vision_hidden.dim(2) != hidden.dim(2)) {
    throw std::invalid_argument("visual_similarity: hidden and vision_hidden shapes disagree");
  }
  if (n == 0) throw std::invalid_argument("visual_similarity: no vision tokens");
  const auto [lo, hi] = range.resolve(layers);

  std::vector<double> vs(steps, 0.0);
  const double count = static_cast<double>((hi - lo + 1) * n);
  for (std::size_t t = 0; t < steps; ++t) {
    double acc = 0.0;
    for (std::size_t l = lo - 1; l < hi; ++l) {
      const auto h = hidden.fiber(l, t);
      for (std::size_t k = 0; k < n; ++k) {
        const auto v = vision_hidden.fiber(l, k);
        switch (metric) {
          case SimilarityMetric::cosine: acc += numerics::cosine_similarity(h, v); break;
          case SimilarityMetric::neg_l1: acc -= numerics::l1_distance(h, v); break;
          case SimilarityMetric::neg_l2: acc -= numerics::l2_distance(h, v); break;
        }
      }
    }
    vs[t] = acc / count;
  }
  return vs;
}

struct FusedWeights {
  std::vector<double> weights;
  std::vector<double> gate;
  std::vector<double> vs_norm;
  std::vector<double> h_norm;
};

namespace detail {

inline std::vector<double> scaled_softmax(std::span<const double> z) {
  std::vector<double> w = numerics::stable_softmax(z);
  const double t = static_cast<double>(z.size());
  for (double& v : w) v *= t;
  return w;
}

}  // namespace detail

/// Selects the ceil(q T) highest-entropy tokens; earlier positions win ties.
inline std::vector<double> high_entropy_mask(std::span<const double> entropies, double quantile) {
  if (entropies.empty()) throw std::invalid_argument("high_entropy_mask: empty input");
  if (!(quantile > 0.0 && quantile <= 1.0)) throw std::invalid_argument("high_entropy_mask: quantile outside (0, 1]");
  const std::size_t t = entropies.size();
  // Guard against q*T landing a hair above an integer through rounding.
  const double raw = quantile * static_cast<double>(t);
  std::size_t k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  k = std::clamp<std::size_t>(k, 1, t);
  std::vector<std::size_t> order(t);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return entropies[a] > entropies[b]; });
  std::vector<double> mask(t, 0.0);
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1.0;
  return mask;
}

/// Token weights for one response. In the softmax-based modes mean(w) = 1.
/// The gate is the mean-centred joint score and is reported in every mode.
inline FusedWeights fuse_weights(std::span<const double> vs, std::span<const double> entropies,
                                 const ShapingConfig& cfg) {
  if (vs.empty()) throw std::invalid_argument("fuse_weights: empty response");
  if (vs.size() != entropies.size()) throw std::invalid_argument("fuse_weights: signal lengths differ");
  FusedWeights out;
  if (cfg.use_minmax) {
    out.vs_norm = numerics::minmax_normalize(vs);
    out.h_norm = numerics::minmax_normalize(entropies);
  } else {
    out.vs_norm.assign(vs.begin(), vs.end());
    out.h_norm.assign(entropies.begin(), entropies.end());
  }
  const std::size_t t = vs.size();
  std::vector<double> joint(t);
  for (std::size_t i = 0; i < t; ++i) joint[i] = out.vs_norm[i] + out.h_norm[i];
  out.gate = numerics::mean_center(joint);

  switch (cfg.mode) {
    case WeightingMode::pepo: {
      std::vector<double> z(t);
      for (std::size_t i = 0; i < t; ++i) z[i] = (1.0 + cfg.alpha * std::tanh(out.gate[i])) * vs[i];
      out.weights = detail::scaled_softmax(z);
      break;
    }
    case WeightingMode::perception_only: out.weights = detail::scaled_softmax(vs); break;
    case WeightingMode::exploration_only: out.weights = detail::scaled_softmax(entropies); break;
    case WeightingMode::additive_fusion: out.weights = detail::scaled_softmax(joint); break;
    case WeightingMode::grpo_uniform: out.weights.assign(t, 1.0); break;
    case WeightingMode::high_entropy: out.weights = high_entropy_mask(entropies, cfg.entropy_quantile); break;
  }
  return out;
}

/// min(1, k / K_max), or 1 when the schedule is disabled.
inline double lambda_schedule(std::size_t step, std::size_t k_max, bool enabled) {
  if (k_max < 1) throw std::invalid_argument("lambda_schedule: K_max must be at least 1");
  if (!enabled) return 1.0;
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(k_max));
}

/// [(1 - lambda) + lambda w_t] A.
inline std::vector<double> token_advantages(double advantage, std::span<const double> weights, double lambda) {
  std::vector<double> out(weights.size());
  const double keep = 1.0 - lambda;
  for (std::size_t i = 0; i < weights.size(); ++i) out[i] = (keep + lambda * weights[i]) * advantage;
  return out;
}

struct TokenSignals {
  std::vector<double> vs;
  std::vector<double> vs_norm;
  std::vector<double> h_norm;
  std::vector<double> gate;
  std::vector<double> weights;    // unit-mean weights, all ones, or a 0/1 mask
  std::vector<double> token_adv;  // zero at masked-out tokens in high_entropy mode
  double lambda_used = 0.0;

  /// Tokens that carry gradient (all of them outside high_entropy mode).
  std::vector<std::size_t> active_tokens(WeightingMode mode) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (mode != WeightingMode::high_entropy || weights[i] != 0.0) idx.push_back(i);
    }
    return idx;
  }
};

/// Shapes one rollout's sequence advantage into token advantages. `lambda` is
/// ignored outside the softmax-weighted modes, where lambda_used is reported 0.
inline TokenSignals shape_rollout(const Rollout& r, double advantage, const ShapingConfig& cfg, double lambda) {
  TokenSignals s;
  s.vs = visual_similarity(r.hidden, r.vision_hidden, cfg.layer_range, cfg.similarity_metric);
  FusedWeights f = fuse_weights(s.vs, r.entropies, cfg);
  s.vs_norm = std::move(f.vs_norm);
  s.h_norm = std::move(f.h_norm);
  s.gate = std::move(f.gate);
  s.weights = std::move(f.weights);
  switch (cfg.mode) {
    case WeightingMode::grpo_uniform: s.token_adv.assign(s.weights.size(), advantage); break;
    case WeightingMode::high_entropy:
      s.token_adv.resize(s.weights.size());
      for (std::size_t i = 0; i < s.weights.size(); ++i) s.token_adv[i] = s.weights[i] != 0.0 ? advantage : 0.0;
      break;
    default:
      s.lambda_used = lambda;
      s.token_adv = token_advantages(advantage, s.weights, lambda);
      break;
  }
  return s;
}

}  // namespace pepo::shaping
