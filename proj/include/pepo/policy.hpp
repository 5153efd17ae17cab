#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pepo/autodiff.hpp"
#include "pepo/errors.hpp"
#include "pepo/rng.hpp"
#include "pepo/tensor.hpp"

// Toy decoder-only multimodal policy. Vision feature rows are projected into
// the model width and prepended to the token sequence; every layer is a
// residual attention block followed by a residual GELU feed-forward block,
// with no normalization.
namespace pepo {

using TokenId = std::int32_t;

struct PolicyConfig {
  std::size_t vocab_size = 16;
  std::size_t model_dim = 32;
  std::size_t num_layers = 4;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 64;
  std::size_t max_positions = 16;
  std::size_t vision_dim = 16;
  std::uint64_t seed = 0;
  bool freeze_vision = true;

  std::size_t head_dim() const { return model_dim / num_heads; }

  void validate() const {
    if (vocab_size < 4) throw ConfigError("policy.vocab_size", "must be at least 4");
    if (model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0) {
      throw ConfigError("policy.model_dim", "must be a positive multiple of num_heads");
    }
    if (num_layers < 1) throw ConfigError("policy.num_layers", "must be at least 1");
    if (ffn_dim == 0) throw ConfigError("policy.ffn_dim", "must be positive");
    if (max_positions == 0) throw ConfigError("policy.max_positions", "must be positive");
    if (vision_dim == 0) throw ConfigError("policy.vision_dim", "must be positive");
  }

  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

struct ParameterSpec {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t fan_in;  // 0 marks a bias (zero init)
  bool vision;         // part of the vision projection
};

/// Parameter names and shapes in canonical order.
inline std::vector<ParameterSpec> parameter_layout(const PolicyConfig& c) {
  const std::size_t d = c.model_dim;
  std::vector<ParameterSpec> out;
  out.push_back({"embed.token", {c.vocab_size, d}, 1, false});
  out.push_back({"embed.position", {c.max_positions, d}, 1, false});
  out.push_back({"vision.proj.weight", {c.vision_dim, d}, c.vision_dim, true});
  out.push_back({"vision.proj.bias", {1, d}, 0, true});
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn.wq", {d, d}, d, false});
    out.push_back({p + "attn.wk", {d, d}, d, false});
    out.push_back({p + "attn.wv", {d, d}, d, false});
    out.push_back({p + "attn.wo", {d, d}, d, false});
    out.push_back({p + "ffn.w1", {d, c.ffn_dim}, d, false});
    out.push_back({p + "ffn.b1", {1, c.ffn_dim}, 0, false});
    out.push_back({p + "ffn.w2", {c.ffn_dim, d}, c.ffn_dim, false});
    out.push_back({p + "ffn.b2", {1, d}, 0, false});
  }
  out.push_back({"head.weight", {d, c.vocab_size}, d, false});
  out.push_back({"head.bias", {1, c.vocab_size}, 0, false});
  return out;
}

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Parameter table keyed by name, in canonical layout order.
using ParamTable = std::vector<NamedTensor>;

class PolicyState {
 public:
  PolicyState() = default;
  PolicyState(PolicyConfig config, ParamTable params) : config_(std::move(config)), params_(std::move(params)) {
    check_layout();
  }

  const PolicyConfig& config() const noexcept { return config_; }
  const ParamTable& params() const noexcept { return params_; }
  ParamTable& params() noexcept { return params_; }

  const Tensor& param(std::string_view name) const { return params_[index_of(name)].value; }
  Tensor& param(std::string_view name) { return params_[index_of(name)].value; }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    throw std::out_of_range("PolicyState: no parameter named " + std::string(name));
  }

  bool is_frozen(std::string_view name) const {
    return config_.freeze_vision && name.starts_with("vision.");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  friend bool operator==(const PolicyState&, const PolicyState&) = default;

 private:
  void check_layout() const {
    const auto layout = parameter_layout(config_);
    if (layout.size() != params_.size()) throw std::invalid_argument("PolicyState: parameter count mismatch");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layout[i].name != params_[i].name || layout[i].shape != params_[i].value.shape()) {
        throw std::invalid_argument("PolicyState: parameter " + layout[i].name + " has unexpected name or shape");
      }
    }
  }

  PolicyConfig config_;
  ParamTable params_;
};

/// Weights ~ U(-s, s) with s = fan_in^(-1/2); biases start at zero.
inline PolicyState init_policy(const PolicyConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, {0x706f6c6963ULL}));
  ParamTable params;
  for (const auto& spec : parameter_layout(config)) {
    Tensor t(spec.shape, 0.0);
    if (spec.fan_in > 0) {
      const double s = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (double& v : t.data()) v = rng.uniform(-s, s);
    }
    params.push_back({spec.name, std::move(t)});
  }
  return PolicyState(config, std::move(params));
}

/// Zeroes the vision projection so visual features cannot influence the model.
inline void zero_vision_pathway(PolicyState& state) {
  state.param("vision.proj.weight").fill(0.0);
  state.param("vision.proj.bias").fill(0.0);
}

struct ForwardTrace {
  Tensor logits;  // [positions x vocab]
  Tensor hidden;  // [layers x positions x model_dim], post-block residual stream
  std::pair<std::size_t, std::size_t> vision_span;    // [begin, end)
  std::pair<std::size_t, std::size_t> response_span;  // [begin, end)
};

namespace detail {

inline void check_inputs(const PolicyState& state, const Tensor& vision_feats, std::span<const TokenId> tokens,
                         std::size_t position_offset) {
  const auto& c = state.config();
  const std::size_t n = vision_feats.empty() ? 0 : vision_feats.rows();
  if (n > 0 && vision_feats.cols() != c.vision_dim) {
    throw std::invalid_argument("forward: vision feature width " + std::to_string(vision_feats.cols()) +
                                " != " + std::to_string(c.vision_dim));
  }
  if (position_offset + n + tokens.size() > c.max_positions) {
    throw std::invalid_argument("forward: sequence of " + std::to_string(position_offset + n + tokens.size()) +
                                " positions exceeds max_positions " + std::to_string(c.max_positions));
  }
  if (n + tokens.size() == 0) throw std::invalid_argument("forward: empty sequence");
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
      throw std::out_of_range("forward: unknown token id " + std::to_string(t));
    }
  }
}

}  // namespace detail

/// Puts every parameter on the tape. Trainable ones become variables unless
/// `trainable` is false; frozen ones are always constants.
inline std::vector<ad::Var> bind_parameters(ad::Tape& tape, const PolicyState& state, bool trainable = true) {
  std::vector<ad::Var> vars;
  vars.reserve(state.params().size());
  for (const auto& p : state.params()) {
    vars.push_back(trainable && !state.is_frozen(p.name) ? tape.variable(p.value) : tape.constant(p.value));
  }
  return vars;
}

struct TapedForward {
  ad::Var logits;
  std::vector<ad::Var> hidden;  // one [positions x model_dim] node per layer
};

/// Forward pass recorded on `tape`. `params` must come from bind_parameters.
/// Positions start at `position_offset`; vision rows occupy the prefix.
inline TapedForward forward_on_tape(ad::Tape& tape, const PolicyState& state, const std::vector<ad::Var>& params,
                                    const Tensor& vision_feats, std::span<const TokenId> tokens,
                                    std::size_t position_offset = 0) {
  detail::check_inputs(state, vision_feats, tokens, position_offset);
  const auto& c = state.config();
  const std::size_t n_vis = vision_feats.empty() ? 0 : vision_feats.rows();
  const std::size_t seq = n_vis + tokens.size();
  std::size_t k = 0;
  auto next = [&]() { return params[k++]; };

  const ad::Var tok_embed = next();
  const ad::Var pos_embed = next();
  const ad::Var vis_w = next();
  const ad::Var vis_b = next();

  std::vector<std::size_t> pos_ids(seq);
  for (std::size_t i = 0; i < seq; ++i) pos_ids[i] = position_offset + i;
  const ad::Var positions = ad::gather_rows(pos_embed, pos_ids);

  ad::Var x;
  if (!tokens.empty()) {
    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    x = ad::gather_rows(tok_embed, std::move(ids));
  }
  if (n_vis > 0) {
    const ad::Var vis = ad::add_row(ad::matmul(tape.constant(vision_feats), vis_w), vis_b);
    x = tokens.empty() ? vis : ad::concat_rows(vis, x);
  }
  x = ad::add(x, positions);

  const std::size_t hd = c.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  TapedForward out;
  out.hidden.reserve(c.num_layers);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const ad::Var wq = next(), wk = next(), wv = next(), wo = next();
    const ad::Var w1 = next(), b1 = next(), w2 = next(), b2 = next();
    const ad::Var q = ad::matmul(x, wq);
    const ad::Var kk = ad::matmul(x, wk);
    const ad::Var v = ad::matmul(x, wv);
    std::vector<ad::Var> heads;
    heads.reserve(c.num_heads);
    for (std::size_t h = 0; h < c.num_heads; ++h) {
      const ad::Var qh = c.num_heads == 1 ? q : ad::slice_cols(q, h * hd, hd);
      const ad::Var kh = c.num_heads == 1 ? kk : ad::slice_cols(kk, h * hd, hd);
      const ad::Var vh = c.num_heads == 1 ? v : ad::slice_cols(v, h * hd, hd);
      const ad::Var attn = ad::causal_softmax(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
      heads.push_back(ad::matmul(attn, vh));
    }
    const ad::Var mixed = c.num_heads == 1 ? heads.front() : ad::concat_cols(heads);
    x = ad::add(x, ad::matmul(mixed, wo));
    const ad::Var ff = ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(x, w1), b1)), w2), b2);
    x = ad::add(x, ff);
    out.hidden.push_back(x);
  }
  const ad::Var head_w = next();
  const ad::Var head_b = next();
  out.logits = ad::add_row(ad::matmul(x, head_w), head_b);
  return out;
}

/// Gradient-free forward pass. `response_start` indexes into `tokens` and
/// only sets the reported response span.
inline ForwardTrace forward(const PolicyState& state, const Tensor& vision_feats, std::span<const TokenId> tokens,
                            std::size_t response_start, std::size_t position_offset = 0) {
  ad::Tape tape(false);
  const auto params = bind_parameters(tape, state, false);
  const TapedForward f = forward_on_tape(tape, state, params, vision_feats, tokens, position_offset);
  const auto& c = state.config();
  const std::size_t n_vis = vision_feats.empty() ? 0 : vision_feats.rows();
  const std::size_t seq = n_vis + tokens.size();

  ForwardTrace trace;
  trace.logits = f.logits.value();
  trace.hidden = Tensor({c.num_layers, seq, c.model_dim}, 0.0);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto src = f.hidden[l].value().data();
    std::copy(src.begin(), src.end(), trace.hidden.data().begin() + static_cast<std::ptrdiff_t>(l * seq * c.model_dim));
  }
  trace.vision_span = {0, n_vis};
  const std::size_t rs = std::min(response_start, tokens.size());
  trace.response_span = {n_vis + rs, seq};
  return trace;
}

inline ForwardTrace forward(const PolicyState& state, const Tensor& vision_feats, std::span<const TokenId> tokens) {
  return forward(state, vision_feats, tokens, tokens.size());
}

/// Gradients keyed by parameter name, canonical order, trainable parameters only.
using GradTable = std::vector<NamedTensor>;

inline GradTable collect_grads(const ad::Tape& tape, const PolicyState& state, const std::vector<ad::Var>& params) {
  GradTable out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!tape.requires_grad(params[i])) continue;
    out.push_back({state.params()[i].name, tape.grad(params[i])});
  }
  return out;
}

/// Adds b into a entry by entry; tables must share names and order.
inline void accumulate(GradTable& a, const GradTable& b) {
  if (a.empty()) {
    a = b;
    return;
  }
  if (a.size() != b.size()) throw std::invalid_argument("accumulate: gradient tables differ");
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto& x = a[i].value.storage();
    const auto& y = b[i].value.storage();
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += y[j];
  }
}

}  // namespace pepo
