#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "pepo/autodiff.hpp"
#include "pepo/errors.hpp"
#include "pepo/numerics.hpp"
#include "pepo/policy.hpp"
#include "pepo/rollout.hpp"
#include "pepo/shaping.hpp"

namespace pepo::optim {

enum class LossAveraging { sequence_mean, token_level };

inline std::string_view to_string(LossAveraging a) {
  return a == LossAveraging::sequence_mean ? "sequence_mean" : "token_level";
}

struct UpdateConfig {
  double clip_low = 0.2;
  double clip_high = 0.2;
  double kl_beta = 0.001;
  LossAveraging loss_averaging = LossAveraging::sequence_mean;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  // Threads used for per-rollout gradients. Reduction order is fixed.
  std::size_t workers = 1;

  void validate() const {
    if (!(clip_low > 0.0 && clip_low < 1.0)) throw ConfigError("update.clip_low", "must lie in (0, 1)");
    if (!(clip_high > 0.0 && clip_high < 1.0)) throw ConfigError("update.clip_high", "must lie in (0, 1)");
    if (!(kl_beta >= 0.0)) throw ConfigError("update.kl_beta", "must be nonnegative");
    if (!(learning_rate > 0.0)) throw ConfigError("update.learning_rate", "must be positive");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw ConfigError("update.adam_beta1", "must lie in (0, 1)");
    if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw ConfigError("update.adam_beta2", "must lie in (0, 1)");
    if (!(adam_epsilon > 0.0)) throw ConfigError("update.adam_epsilon", "must be positive");
    if (workers < 1) throw ConfigError("update.workers", "must be at least 1");
  }

  friend bool operator==(const UpdateConfig&, const UpdateConfig&) = default;
};

/// min(r A, clip(r, 1 - clip_low, 1 + clip_high) A) per token.
inline std::vector<double> clipped_objective(std::span<const double> ratios, std::span<const double> token_adv,
                                             const UpdateConfig& cfg) {
  if (ratios.size() != token_adv.size()) throw std::invalid_argument("clipped_objective: length mismatch");
  std::vector<double> out(ratios.size());
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] > 0.0)) throw std::invalid_argument("clipped_objective: ratio must be positive");
    const double clipped = std::clamp(ratios[i], 1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
    out[i] = std::min(ratios[i] * token_adv[i], clipped * token_adv[i]);
  }
  return out;
}

/// k3 estimator exp(d) - d - 1 with d = logp_ref - logp_cur.
inline std::vector<double> kl_regularizer(std::span<const double> logp_current, std::span<const double> logp_reference) {
  if (logp_current.size() != logp_reference.size()) throw std::invalid_argument("kl_regularizer: length mismatch");
  std::vector<double> out(logp_current.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = logp_reference[i] - logp_current[i];
    out[i] = std::max(0.0, std::expm1(d) - d);
  }
  return out;
}

struct OptimizerState {
  std::vector<NamedTensor> first_moment;
  std::vector<NamedTensor> second_moment;
  std::size_t step_count = 0;

  static OptimizerState for_policy(const PolicyState& state) {
    OptimizerState s;
    for (const auto& p : state.params()) {
      if (state.is_frozen(p.name)) continue;
      s.first_moment.push_back({p.name, Tensor(p.value.shape(), 0.0)});
      s.second_moment.push_back({p.name, Tensor(p.value.shape(), 0.0)});
    }
    return s;
  }

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// Bias-corrected adaptive-moment descent step on the loss, no weight decay.
/// Frozen parameters are never touched.
inline void apply_update(PolicyState& state, const GradTable& grads, OptimizerState& opt, const UpdateConfig& cfg) {
  for (const auto& g : grads) {
    for (double v : g.value.data()) {
      if (!std::isfinite(v)) throw NumericalError("apply_update: non-finite gradient in " + g.name);
    }
  }
  if (opt.first_moment.empty()) opt = OptimizerState::for_policy(state);
  ++opt.step_count;
  const double t = static_cast<double>(opt.step_count);
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
  for (std::size_t i = 0; i < opt.first_moment.size(); ++i) {
    const std::string& name = opt.first_moment[i].name;
    if (state.is_frozen(name)) continue;
    const NamedTensor* grad = nullptr;
    for (const auto& g : grads) {
      if (g.name == name) {
        grad = &g;
        break;
      }
    }
    auto& m = opt.first_moment[i].value.storage();
    auto& v = opt.second_moment[i].value.storage();
    auto& p = state.param(name).storage();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = grad ? grad->value[j] : 0.0;
      m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * gj;
      v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
    }
  }
}

/// One group with per-rollout token signals aligned to batch->rollouts.
struct ShapedGroup {
  const GroupBatch* batch = nullptr;
  std::vector<shaping::TokenSignals> signals;
};

struct LossOptions {
  shaping::WeightingMode mode = shaping::WeightingMode::pepo;
  double temperature = 1.0;
  // KL anchor; required when kl_beta > 0.
  const PolicyState* reference = nullptr;
};

struct LossResult {
  double loss = 0.0;
  double objective = 0.0;  // averaged clipped surrogate
  double kl = 0.0;         // averaged k3 estimate
  double max_ratio_deviation = 0.0;
  std::size_t tokens = 0;
  GradTable grads;
};

namespace detail {

/// Log-probabilities of `tokens` under the temperature-scaled policy at their
/// predicting positions.
inline std::vector<double> token_logprobs(const PolicyState& state, const env::Task& task, const Rollout& r,
                                          std::span<const std::size_t> active, double temperature) {
  std::vector<TokenId> seq = task.prompt_tokens;
  seq.insert(seq.end(), r.token_ids.begin(), r.token_ids.end());
  const ForwardTrace trace = forward(state, task.vision_feats, seq);
  const std::size_t base = task.vision_feats.rows() + task.prompt_tokens.size();
  const double inv_t = 1.0 / temperature;
  std::vector<double> out;
  out.reserve(active.size());
  for (std::size_t t : active) {
    const auto row = trace.logits.row(base + t - 1);
    std::vector<double> z(row.begin(), row.end());
    for (double& v : z) v *= inv_t;
    out.push_back(numerics::log_softmax(z)[static_cast<std::size_t>(r.token_ids[t])]);
  }
  return out;
}

struct RolloutTerm {
  double loss = 0.0;
  double objective = 0.0;
  double kl = 0.0;
  double max_ratio_deviation = 0.0;
  GradTable grads;
};

inline RolloutTerm rollout_term(const PolicyState& state, const env::Task& task, const Rollout& r,
                                const shaping::TokenSignals& sig, std::span<const std::size_t> active, double coef,
                                const UpdateConfig& cfg, const LossOptions& opts, bool want_grads) {
  ad::Tape tape(want_grads);
  const auto params = bind_parameters(tape, state, want_grads);
  std::vector<TokenId> seq = task.prompt_tokens;
  seq.insert(seq.end(), r.token_ids.begin(), r.token_ids.end());
  const TapedForward f = forward_on_tape(tape, state, params, task.vision_feats, seq);

  const std::size_t base = task.vision_feats.rows() + task.prompt_tokens.size();
  std::vector<std::size_t> rows, cols;
  std::vector<double> old_logp, adv;
  for (std::size_t t : active) {
    rows.push_back(base + t - 1);
    cols.push_back(static_cast<std::size_t>(r.token_ids[t]));
    old_logp.push_back(r.policy_logprobs[t]);
    adv.push_back(sig.token_adv[t]);
  }
  const std::vector<double> coefs(active.size(), coef);

  ad::Var logits = ad::gather_rows(f.logits, rows);
  if (opts.temperature != 1.0) logits = ad::scale(logits, 1.0 / opts.temperature);
  const ad::Var logp = ad::pick(ad::log_softmax_rows(logits), cols);
  const ad::Var ratio = ad::exp(ad::sub(logp, tape.constant(Tensor::column(old_logp))));
  const ad::Var surrogate = ad::clipped_surrogate(ratio, adv, cfg.clip_low, cfg.clip_high);
  const ad::Var objective = ad::weighted_sum(surrogate, coefs);
  ad::Var loss = ad::scale(objective, -1.0);

  RolloutTerm out;
  out.objective = objective.value()[0];
  for (double v : ratio.value().data()) out.max_ratio_deviation = std::max(out.max_ratio_deviation, std::abs(v - 1.0));

  if (cfg.kl_beta > 0.0) {
    if (opts.reference == nullptr) throw std::invalid_argument("loss_and_grads: kl_beta > 0 needs a reference policy");
    const auto ref = token_logprobs(*opts.reference, task, r, active, opts.temperature);
    const ad::Var delta = ad::sub(tape.constant(Tensor::column(ref)), logp);
    const ad::Var k3 = ad::add_scalar(ad::sub(ad::exp(delta), delta), -1.0);
    const ad::Var kl = ad::weighted_sum(k3, coefs);
    out.kl = kl.value()[0];
    loss = ad::add(loss, ad::scale(kl, cfg.kl_beta));
  }
  out.loss = loss.value()[0];
  if (want_grads) {
    tape.backward(loss);
    out.grads = collect_grads(tape, state, params);
  }
  return out;
}

}  // namespace detail

/// Negated averaged clipped surrogate plus kl_beta times the averaged k3 KL.
/// sequence_mean averages within each rollout, then across rollouts;
/// token_level pools every active token. Token advantages are constants.
inline LossResult loss_and_grads(std::span<const ShapedGroup> groups, const PolicyState& state,
                                 const UpdateConfig& cfg, const LossOptions& opts, bool want_grads = true) {
  struct Item {
    const env::Task* task;
    const Rollout* rollout;
    const shaping::TokenSignals* signals;
    std::vector<std::size_t> active;
    double coef = 0.0;
  };
  std::vector<Item> items;
  std::size_t total_tokens = 0;
  for (const auto& g : groups) {
    if (g.batch == nullptr || g.signals.size() != g.batch->rollouts.size()) {
      throw std::invalid_argument("loss_and_grads: signals do not match the batch");
    }
    for (std::size_t i = 0; i < g.signals.size(); ++i) {
      Item it{&g.batch->task, &g.batch->rollouts[i], &g.signals[i], g.signals[i].active_tokens(opts.mode)};
      total_tokens += it.active.size();
      items.push_back(std::move(it));
    }
  }
  if (items.empty() || total_tokens == 0) throw std::invalid_argument("loss_and_grads: empty batch");
  for (auto& it : items) {
    it.coef = cfg.loss_averaging == LossAveraging::token_level
                  ? 1.0 / static_cast<double>(total_tokens)
                  : 1.0 / (static_cast<double>(items.size()) * static_cast<double>(it.active.size()));
  }

  std::vector<detail::RolloutTerm> terms(items.size());
  auto work = [&](std::size_t w, std::size_t stride) {
    for (std::size_t i = w; i < items.size(); i += stride) {
      const Item& it = items[i];
      terms[i] = detail::rollout_term(state, *it.task, *it.rollout, *it.signals, it.active, it.coef, cfg, opts,
                                      want_grads);
    }
  };
  const std::size_t workers = std::min(cfg.workers, items.size());
  if (workers <= 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
  }

  LossResult out;
  out.tokens = total_tokens;
  for (auto& term : terms) {
    out.loss += term.loss;
    out.objective += term.objective;
    out.kl += term.kl;
    out.max_ratio_deviation = std::max(out.max_ratio_deviation, term.max_ratio_deviation);
    if (want_grads) accumulate(out.grads, term.grads);
  }
  return out;
}

}  // namespace pepo::optim
