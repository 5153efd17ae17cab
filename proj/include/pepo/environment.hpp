#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepo/errors.hpp"
#include "pepo/numerics.hpp"
#include "pepo/policy.hpp"
#include "pepo/rng.hpp"
#include "pepo/tensor.hpp"

// Synthetic verifiable-reward task. An "image" is a handful of feature rows:
// one is a noisy copy of the target concept's codebook vector, the rest are
// noisy background patterns. The policy must answer with the concept's token.
namespace pepo::env {

/// Fixed token layout: specials, one answer token per concept, then free
/// "think" tokens.
struct Vocabulary {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kMarker = 3;
  static constexpr TokenId kQuery = 4;
  static constexpr TokenId kFirstAnswer = 5;

  std::size_t num_concepts = 8;
  std::size_t num_think = 3;

  std::size_t size() const { return static_cast<std::size_t>(kFirstAnswer) + num_concepts + num_think; }
  TokenId answer_token(std::size_t concept_id) const { return kFirstAnswer + static_cast<TokenId>(concept_id); }
  bool is_answer(TokenId t) const {
    return t >= kFirstAnswer && t < kFirstAnswer + static_cast<TokenId>(num_concepts);
  }
  TokenId first_think() const { return kFirstAnswer + static_cast<TokenId>(num_concepts); }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

struct GeneratorConfig {
  std::size_t num_concepts = 8;
  std::size_t num_vision_tokens = 4;
  std::size_t vision_dim = 16;
  double noise_scale = 0.1;
  std::size_t num_background = 8;
  std::uint64_t codebook_seed = 7;
  std::size_t num_think_tokens = 3;

  Vocabulary vocabulary() const { return Vocabulary{num_concepts, num_think_tokens}; }

  void validate() const {
    if (num_concepts < 2) throw ConfigError("env.num_concepts", "need at least 2 concepts");
    if (num_vision_tokens < 1) throw ConfigError("env.num_vision_tokens", "need at least 1 vision token");
    if (vision_dim < 1) throw ConfigError("env.vision_dim", "must be positive");
    if (!(noise_scale >= 0.0)) throw ConfigError("env.noise_scale", "must be nonnegative");
    if (num_background + 1 < num_vision_tokens) {
      throw ConfigError("env.num_background", "fewer background patterns than distractor slots");
    }
  }

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct Task {
  Tensor vision_feats;  // [N x vision_dim]
  std::size_t concept_id = 0;
  std::vector<TokenId> prompt_tokens;
  TokenId target_token = 0;
  std::vector<std::size_t> distractor_ids;  // codebook rows >= num_concepts
  std::size_t target_row = 0;
  std::uint64_t seed = 0;
  Vocabulary vocab;

  friend bool operator==(const Task&, const Task&) = default;
};

/// Rows [0, C) are concepts, rows [C, C + B) background patterns.
inline Tensor make_codebook(const GeneratorConfig& g) {
  Rng rng(derive_seed(g.codebook_seed, {0x636f6465ULL}));
  Tensor book = Tensor::matrix(g.num_concepts + g.num_background, g.vision_dim);
  for (double& v : book.data()) v = rng.normal();
  return book;
}

inline Task sample_task(std::uint64_t seed, const GeneratorConfig& g) {
  g.validate();
  const Tensor book = make_codebook(g);
  Rng rng(derive_seed(seed, {0x7461736bULL}));
  Task task;
  task.seed = seed;
  task.vocab = g.vocabulary();
  task.concept_id = static_cast<std::size_t>(rng.below(g.num_concepts));
  task.target_token = task.vocab.answer_token(task.concept_id);
  task.prompt_tokens = {Vocabulary::kBos, Vocabulary::kQuery};
  task.target_row = static_cast<std::size_t>(rng.below(g.num_vision_tokens));

  // Distinct background patterns via a partial Fisher-Yates shuffle.
  std::vector<std::size_t> pool(g.num_background);
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = g.num_concepts + i;
  for (std::size_t i = 0; i + 1 < g.num_vision_tokens; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
    task.distractor_ids.push_back(pool[i]);
  }

  task.vision_feats = Tensor::matrix(g.num_vision_tokens, g.vision_dim);
  std::size_t next_distractor = 0;
  for (std::size_t r = 0; r < g.num_vision_tokens; ++r) {
    const std::size_t src = r == task.target_row ? task.concept_id : task.distractor_ids[next_distractor++];
    for (std::size_t j = 0; j < g.vision_dim; ++j) {
      const double noise = g.noise_scale > 0.0 ? g.noise_scale * rng.normal() : 0.0;
      task.vision_feats.at(r, j) = book.at(src, j) + noise;
    }
  }
  return task;
}

/// Nearest-codebook decoder: the concept whose codebook row lies closest to
/// any feature row. Used as a solvability oracle.
inline std::size_t nearest_concept(const Task& task, const Tensor& codebook, std::size_t num_concepts) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_concept = 0;
  for (std::size_t r = 0; r < task.vision_feats.rows(); ++r) {
    for (std::size_t c = 0; c < codebook.rows(); ++c) {
      const double d = numerics::l2_distance(task.vision_feats.row(r), codebook.row(c));
      if (d < best && c < num_concepts) {
        best = d;
        best_concept = c;
      }
    }
  }
  return best_concept;
}

struct RewardWeights {
  double format = 0.5;
  double accuracy = 0.5;

  friend bool operator==(const RewardWeights&, const RewardWeights&) = default;
};

struct RewardBreakdown {
  int format = 0;
  int accuracy = 0;
  double total = 0.0;

  friend bool operator==(const RewardBreakdown&, const RewardBreakdown&) = default;
};

/// Format: exactly one marker, and the response ends marker, answer, EOS.
/// Accuracy: that answer is the target. Accuracy is gated on format.
inline RewardBreakdown reward(std::span<const TokenId> response, const Task& task, const RewardWeights& w) {
  RewardBreakdown r;
  const std::size_t n = response.size();
  const auto markers = std::count(response.begin(), response.end(), Vocabulary::kMarker);
  if (n >= 3 && markers == 1 && response[n - 3] == Vocabulary::kMarker && task.vocab.is_answer(response[n - 2]) &&
      response[n - 1] == Vocabulary::kEos) {
    r.format = 1;
    r.accuracy = response[n - 2] == task.target_token ? 1 : 0;
  }
  r.total = w.format * r.format + w.accuracy * r.accuracy;
  return r;
}

inline nlohmann::json task_to_json(const Task& task) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < task.vision_feats.rows(); ++r) {
    const auto row = task.vision_feats.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return {{"seed", task.seed},
          {"concept_id", task.concept_id},
          {"target_token", task.target_token},
          {"target_row", task.target_row},
          {"prompt_tokens", task.prompt_tokens},
          {"distractor_ids", task.distractor_ids},
          {"vision_feats", rows}};
}

}  // namespace pepo::env
