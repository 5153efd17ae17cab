#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pepo/environment.hpp"
#include "pepo/errors.hpp"
#include "pepo/numerics.hpp"
#include "pepo/policy.hpp"

// Token-level diagnostics over rollouts: similarity aggregates split by
// correctness, hidden-state shift when the image is removed, binned shift
// profiles and per-token frequency tables.
namespace pepo::analysis {

struct ResponseAggregates {
  double m_glob = 0.0;
  double m_high = 0.0;
  double m_low = 0.0;
  std::size_t k_used = 0;
  bool correct = false;
};

inline std::size_t default_k(std::size_t length) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(length) - 1e-9)));
}

/// Mean of all values, of the K largest and of the K smallest.
inline ResponseAggregates aggregate_vs(std::span<const double> vs, std::size_t k) {
  if (k < 1 || k > vs.size()) {
    throw std::invalid_argument("aggregate_vs: K=" + std::to_string(k) + " outside [1, " + std::to_string(vs.size()) +
                                "]");
  }
  std::vector<double> sorted(vs.begin(), vs.end());
  std::sort(sorted.begin(), sorted.end());
  ResponseAggregates a;
  a.k_used = k;
  a.m_glob = numerics::mean(sorted);
  a.m_low = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), 0.0) /
            static_cast<double>(k);
  a.m_high = std::accumulate(sorted.end() - static_cast<std::ptrdiff_t>(k), sorted.end(), 0.0) /
             static_cast<double>(k);
  return a;
}

enum class RemovalMode { delete_prefix, zero_features };

inline std::string_view to_string(RemovalMode m) { return m == RemovalMode::delete_prefix ? "delete" : "zero-features"; }

inline RemovalMode parse_removal(std::string_view s) {
  if (s == "delete") return RemovalMode::delete_prefix;
  if (s == "zero-features") return RemovalMode::zero_features;
  throw ConfigError("removal", "unknown removal mode '" + std::string(s) + "'");
}

struct ShiftOptions {
  RemovalMode removal = RemovalMode::delete_prefix;
  // Keep the text at the positions it had with the image present instead of
  // re-indexing it from 0. Only meaningful for delete_prefix.
  bool absolute_positions = false;
};

/// D_t = (1/L) sum_l ||with[l,t] - without[l,t]||_2 for [L x T x d] tensors.
inline std::vector<double> layer_mean_shift(const Tensor& with, const Tensor& without) {
  if (!with.same_shape(without) || with.rank() != 3) {
    throw std::invalid_argument("layer_mean_shift: expected equal [L x T x d] tensors");
  }
  const std::size_t layers = with.dim(0), len = with.dim(1);
  std::vector<double> d(len, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t l = 0; l < layers; ++l) d[t] += numerics::l2_distance(with.fiber(l, t), without.fiber(l, t));
    d[t] /= static_cast<double>(layers);
  }
  return d;
}

/// Replays prompt + response with and without the image and measures the
/// per-token change of the response hidden states.
inline std::vector<double> hidden_state_shift(const PolicyState& state, const env::Task& task,
                                              std::span<const TokenId> response, const ShiftOptions& opts = {}) {
  std::vector<TokenId> seq = task.prompt_tokens;
  seq.insert(seq.end(), response.begin(), response.end());
  const std::size_t n_vis = task.vision_feats.rows();
  const std::size_t prompt = task.prompt_tokens.size();
  const std::size_t layers = state.config().num_layers;
  const std::size_t d = state.config().model_dim;

  auto response_hidden = [&](const ForwardTrace& tr) {
    Tensor h({layers, response.size(), d}, 0.0);
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t t = 0; t < response.size(); ++t) {
        const auto src = tr.hidden.fiber(l, tr.response_span.first + t);
        std::copy(src.begin(), src.end(), h.data().begin() + static_cast<std::ptrdiff_t>((l * response.size() + t) * d));
      }
    }
    return h;
  };

  const Tensor with = response_hidden(forward(state, task.vision_feats, seq, prompt));
  Tensor without;
  if (opts.removal == RemovalMode::zero_features) {
    const Tensor zeros(task.vision_feats.shape(), 0.0);
    without = response_hidden(forward(state, zeros, seq, prompt));
  } else {
    const std::size_t offset = opts.absolute_positions ? n_vis : 0;
    without = response_hidden(forward(state, Tensor{}, seq, prompt, offset));
  }
  return layer_mean_shift(with, without);
}

/// Sorts tokens by `ranking` (stable, ascending), cuts them into num_bins
/// equal-count bins with the remainder going to the earlier bins, and returns
/// the mean of `d` per bin. Empty bins are NaN.
inline std::vector<double> binned_shift(std::span<const double> d, std::span<const double> ranking,
                                        std::size_t num_bins) {
  if (d.size() != ranking.size()) throw std::invalid_argument("binned_shift: length mismatch");
  if (num_bins < 1) throw std::invalid_argument("binned_shift: need at least one bin");
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ranking[a] < ranking[b]; });
  const std::size_t base = d.size() / num_bins, extra = d.size() % num_bins;
  std::vector<double> out(num_bins, std::numeric_limits<double>::quiet_NaN());
  std::size_t pos = 0;
  for (std::size_t b = 0; b < num_bins; ++b) {
    const std::size_t count = base + (b < extra ? 1 : 0);
    if (count == 0) continue;
    double s = 0.0;
    for (std::size_t i = 0; i < count; ++i) s += d[order[pos + i]];
    out[b] = s / static_cast<double>(count);
    pos += count;
  }
  return out;
}

enum class Ranking { entropy, vs };

inline std::string_view to_string(Ranking r) { return r == Ranking::entropy ? "entropy" : "vs"; }

inline Ranking parse_ranking(std::string_view s) {
  if (s == "entropy") return Ranking::entropy;
  if (s == "vs") return Ranking::vs;
  throw ConfigError("ranking", "unknown ranking '" + std::string(s) + "'");
}

/// One dumped response with its per-token signals.
struct ResponseRecord {
  std::vector<TokenId> token_ids;
  std::vector<double> entropies;
  std::vector<double> vs;
  bool correct = false;
  std::uint64_t task_seed = 0;
};

struct FrequencyRow {
  TokenId id = 0;
  double mean = 0.0;
  std::size_t count = 0;
};

inline std::vector<FrequencyRow> frequency_partition(std::span<const ResponseRecord> corpus, Ranking ranking,
                                                     std::size_t min_count, std::size_t top_n) {
  if (corpus.empty()) throw std::invalid_argument("frequency_partition: empty corpus");
  std::map<TokenId, std::pair<double, std::size_t>> acc;
  for (const auto& r : corpus) {
    const auto& signal = ranking == Ranking::entropy ? r.entropies : r.vs;
    if (signal.size() != r.token_ids.size()) throw std::invalid_argument("frequency_partition: signal length mismatch");
    for (std::size_t t = 0; t < r.token_ids.size(); ++t) {
      auto& [sum, n] = acc[r.token_ids[t]];
      sum += signal[t];
      ++n;
    }
  }
  std::vector<FrequencyRow> rows;
  for (const auto& [id, sn] : acc) {
    if (sn.second < min_count) continue;
    rows.push_back({id, sn.first / static_cast<double>(sn.second), sn.second});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const FrequencyRow& a, const FrequencyRow& b) {
    return a.mean > b.mean;  // map order already sorts ties by id
  });
  if (rows.size() > top_n) rows.resize(top_n);
  return rows;
}

struct CorrectnessSplit {
  std::vector<ResponseAggregates> correct;
  std::vector<ResponseAggregates> incorrect;
};

/// Aggregates every response (K from default_k unless given) and partitions
/// by the accuracy bit.
inline CorrectnessSplit correctness_split(std::span<const ResponseRecord> responses,
                                          std::optional<std::size_t> k = std::nullopt) {
  CorrectnessSplit out;
  for (const auto& r : responses) {
    if (r.vs.empty()) continue;
    const std::size_t kk = k ? std::min(*k, r.vs.size()) : default_k(r.vs.size());
    ResponseAggregates a = aggregate_vs(r.vs, kk);
    a.correct = r.correct;
    (r.correct ? out.correct : out.incorrect).push_back(a);
  }
  return out;
}

inline constexpr std::size_t kHistogramBins = 64;

/// Histogram CSV over 64 uniform bins spanning the pooled range of all
/// aggregates. The edges are recorded in a leading comment line.
inline std::string histogram_csv(const CorrectnessSplit& split) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* part : {&split.correct, &split.incorrect}) {
    for (const auto& a : *part) {
      for (double v : {a.m_glob, a.m_high, a.m_low}) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  } else if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(kHistogramBins);
  auto bin_of = [&](double v) {
    const auto b = static_cast<std::size_t>((v - lo) / width);
    return std::min(b, kHistogramBins - 1);
  };
  std::vector<std::array<std::size_t, 6>> counts(kHistogramBins, std::array<std::size_t, 6>{});
  for (const auto& a : split.correct) {
    ++counts[bin_of(a.m_glob)][0];
    ++counts[bin_of(a.m_high)][1];
    ++counts[bin_of(a.m_low)][2];
  }
  for (const auto& a : split.incorrect) {
    ++counts[bin_of(a.m_glob)][3];
    ++counts[bin_of(a.m_high)][4];
    ++counts[bin_of(a.m_low)][5];
  }
  std::ostringstream os;
  os.precision(17);
  os << "# bins=" << kHistogramBins << " lo=" << lo << " hi=" << hi << " correct=" << split.correct.size()
     << " incorrect=" << split.incorrect.size() << "\n";
  os << "bin,lo,hi,correct_glob,correct_high,correct_low,incorrect_glob,incorrect_high,incorrect_low\n";
  for (std::size_t b = 0; b < kHistogramBins; ++b) {
    os << b << ',' << lo + width * static_cast<double>(b) << ',' << lo + width * static_cast<double>(b + 1);
    for (std::size_t c : counts[b]) os << ',' << c;
    os << '\n';
  }
  return os.str();
}

}  // namespace pepo::analysis
