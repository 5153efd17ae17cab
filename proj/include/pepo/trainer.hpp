#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pepo/environment.hpp"
#include "pepo/errors.hpp"
#include "pepo/optimizer.hpp"
#include "pepo/policy.hpp"
#include "pepo/rollout.hpp"
#include "pepo/shaping.hpp"

// Outer training loop: sample tasks, generate groups, reward, group-relative
// advantages, token shaping, one policy update per step.
namespace pepo::train {

enum class TrainMode {
  grpo,
  pepo,
  dapo,
  pepo_dapo,
  high_entropy,
  perception_only,
  exploration_only,
  additive_fusion,
};

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::grpo: return "grpo";
    case TrainMode::pepo: return "pepo";
    case TrainMode::dapo: return "dapo";
    case TrainMode::pepo_dapo: return "pepo_dapo";
    case TrainMode::high_entropy: return "high_entropy";
    case TrainMode::perception_only: return "perception_only";
    case TrainMode::exploration_only: return "exploration_only";
    case TrainMode::additive_fusion: return "additive_fusion";
  }
  return "?";
}

inline TrainMode parse_mode(std::string_view s) {
  for (TrainMode m : {TrainMode::grpo, TrainMode::pepo, TrainMode::dapo, TrainMode::pepo_dapo, TrainMode::high_entropy,
                      TrainMode::perception_only, TrainMode::exploration_only, TrainMode::additive_fusion}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("mode", "unknown mode '" + std::string(s) + "'");
}

/// DAPO-family modes resample zero-variance groups.
inline bool is_dapo_family(TrainMode m) { return m == TrainMode::dapo || m == TrainMode::pepo_dapo; }

inline shaping::WeightingMode weighting_for(TrainMode m) {
  switch (m) {
    case TrainMode::grpo:
    case TrainMode::dapo: return shaping::WeightingMode::grpo_uniform;
    case TrainMode::pepo:
    case TrainMode::pepo_dapo: return shaping::WeightingMode::pepo;
    case TrainMode::high_entropy: return shaping::WeightingMode::high_entropy;
    case TrainMode::perception_only: return shaping::WeightingMode::perception_only;
    case TrainMode::exploration_only: return shaping::WeightingMode::exploration_only;
    case TrainMode::additive_fusion: return shaping::WeightingMode::additive_fusion;
  }
  return shaping::WeightingMode::grpo_uniform;
}

enum class LrSchedule { constant, cosine };

inline std::string_view to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

/// Supervised format warm-up run before RL: teaches the
/// think* marker answer EOS layout with uniformly random answers, so the
/// policy starts at chance accuracy with well-formed responses.
struct WarmupConfig {
  std::size_t steps = 150;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  std::size_t max_think = 2;

  friend bool operator==(const WarmupConfig&, const WarmupConfig&) = default;
};

struct TrainConfig {
  std::string experiment = "pepo";
  TrainMode mode = TrainMode::pepo;
  std::size_t k_max = 300;
  std::size_t groups_per_step = 48;
  std::size_t max_resample_times = 3;
  std::size_t eval_every = 100;
  std::size_t eval_tasks = 256;
  std::uint64_t master_seed = 1;
  LrSchedule lr_schedule = LrSchedule::cosine;
  SamplingConfig rollout;
  shaping::ShapingConfig shaping;
  optim::UpdateConfig update;
  PolicyConfig policy;
  env::GeneratorConfig env;
  env::RewardWeights reward;
  WarmupConfig warmup;

  /// Copies settings that must agree across modules (vocabulary, vision
  /// width, weighting mode, seeds).
  void resolve() {
    policy.vocab_size = env.vocabulary().size();
    policy.vision_dim = env.vision_dim;
    shaping.mode = weighting_for(mode);
  }

  void validate() const {
    if (k_max < 1) throw ConfigError("train.k_max", "must be at least 1");
    if (groups_per_step < 1) throw ConfigError("train.groups_per_step", "must be at least 1");
    if (eval_every < 1) throw ConfigError("train.eval_every", "must be at least 1");
    rollout.validate();
    shaping.validate();
    update.validate();
    policy.validate();
    env.validate();
    const std::size_t needed = env.num_vision_tokens + 2 + rollout.max_len;
    if (needed > policy.max_positions) {
      throw ConfigError("policy.max_positions", "needs at least " + std::to_string(needed) +
                                                    " for vision + prompt + max_len");
    }
    if (policy.vocab_size != env.vocabulary().size() || policy.vision_dim != env.vision_dim) {
      throw ConfigError("policy.vocab_size", "policy and environment disagree; call resolve()");
    }
    if (shaping.mode != weighting_for(mode)) throw ConfigError("mode", "shaping mode out of sync; call resolve()");
  }
};

struct StepMetrics {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double mean_accuracy = 0.0;
  double mean_response_length = 0.0;
  double mean_vs = 0.0;
  double mean_entropy = 0.0;
  double lambda = 0.0;
  std::size_t resampled_groups = 0;
  std::size_t skipped_groups = 0;
  double loss = 0.0;

  friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

struct EvalRecord {
  std::size_t step = 0;
  double accuracy = 0.0;
  double format_rate = 0.0;
};

/// Everything the trainer produced for one step, for dumps.
struct StepRecord {
  const StepMetrics& metrics;
  const std::vector<GroupBatch>& groups;  // retained groups
  const std::vector<std::vector<shaping::TokenSignals>>& signals;
};

/// Hooks for persisting progress. All callbacks run on the training thread.
struct TrainObserver {
  virtual ~TrainObserver() = default;
  virtual void on_step(const StepRecord&) {}
  virtual void on_eval(const EvalRecord&, const PolicyState&) {}
};

/// Raised when the loss or a gradient goes non-finite. Carries a JSON dump of
/// the offending step's groups.
class TrainingAbort : public NumericalError {
 public:
  TrainingAbort(const std::string& what, nlohmann::json dump) : NumericalError(what), dump_(std::move(dump)) {}
  const nlohmann::json& dump() const noexcept { return dump_; }

 private:
  nlohmann::json dump_;
};

// Seed streams.
inline constexpr std::uint64_t kTaskStream = 0x7461736bULL;
inline constexpr std::uint64_t kGroupStream = 0x67727570ULL;
inline constexpr std::uint64_t kEvalStream = 0x6576616cULL;
inline constexpr std::uint64_t kWarmupStream = 0x7761726dULL;
inline constexpr std::uint64_t kPolicyStream = 0x706f6c69ULL;

inline std::uint64_t task_seed(std::uint64_t master, std::size_t step, std::size_t group) {
  return derive_seed(master, {kTaskStream, step, group});
}
inline std::uint64_t group_seed(std::uint64_t master, std::size_t step, std::size_t group, std::size_t attempt) {
  return derive_seed(master, {kGroupStream, step, group, attempt});
}
inline std::uint64_t eval_task_seed(std::uint64_t master, std::size_t index) {
  return derive_seed(master, {kEvalStream, index});
}

inline bool is_degenerate(const GroupBatch& batch) {
  const auto r = rewards_of(batch);
  for (double v : r) {
    if (v != r.front()) return false;
  }
  return true;
}

struct ResampleOutcome {
  std::optional<GroupBatch> batch;  // empty when skipped
  std::size_t resamples = 0;
  bool skipped = false;
};

/// Regenerates a zero-variance group up to max_times with fresh seeds. A group
/// still degenerate afterwards is skipped.
inline ResampleOutcome resample_degenerate(GroupBatch batch, std::size_t max_times,
                                           const std::function<GroupBatch(std::size_t attempt)>& regenerate) {
  ResampleOutcome out;
  while (is_degenerate(batch)) {
    if (out.resamples == max_times) {
      out.skipped = true;
      return out;
    }
    ++out.resamples;
    batch = regenerate(out.resamples);
  }
  out.batch = std::move(batch);
  return out;
}

inline double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  if (cfg.lr_schedule == LrSchedule::constant) return cfg.update.learning_rate;
  const double progress = static_cast<double>(step) / static_cast<double>(cfg.k_max);
  return cfg.update.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

/// Lambda used at step k: the override if set, the schedule for the
/// softmax-weighted modes, and 0 (no modulation) otherwise.
inline double lambda_at(const TrainConfig& cfg, std::size_t step) {
  using shaping::WeightingMode;
  const WeightingMode w = weighting_for(cfg.mode);
  if (w == WeightingMode::grpo_uniform || w == WeightingMode::high_entropy) return 0.0;
  if (cfg.shaping.lambda_override) return *cfg.shaping.lambda_override;
  return shaping::lambda_schedule(step, cfg.k_max, cfg.shaping.use_schedule);
}

/// Teacher-forced format warm-up. Deterministic in (config, master seed).
inline void run_warmup(PolicyState& state, const TrainConfig& cfg) {
  const WarmupConfig& w = cfg.warmup;
  if (w.steps == 0) return;
  const env::Vocabulary vocab = cfg.env.vocabulary();
  optim::OptimizerState opt = optim::OptimizerState::for_policy(state);
  optim::UpdateConfig ucfg = cfg.update;
  ucfg.learning_rate = w.learning_rate;
  // Keep warm-up responses within the sampling length budget.
  const std::size_t max_think = cfg.rollout.max_len > 3 ? std::min(w.max_think, cfg.rollout.max_len - 3) : 0;
  for (std::size_t s = 0; s < w.steps; ++s) {
    GradTable grads;
    for (std::size_t b = 0; b < w.batch_size; ++b) {
      Rng rng(derive_seed(cfg.master_seed, {kWarmupStream, s, b}));
      const env::Task task = env::sample_task(rng.next_u64(), cfg.env);
      std::vector<TokenId> response;
      const std::size_t think = static_cast<std::size_t>(rng.below(max_think + 1));
      for (std::size_t i = 0; i < think; ++i) {
        response.push_back(vocab.first_think() + static_cast<TokenId>(rng.below(vocab.num_think)));
      }
      response.push_back(env::Vocabulary::kMarker);
      response.push_back(vocab.answer_token(static_cast<std::size_t>(rng.below(vocab.num_concepts))));
      response.push_back(env::Vocabulary::kEos);

      ad::Tape tape;
      const auto params = bind_parameters(tape, state);
      std::vector<TokenId> seq = task.prompt_tokens;
      seq.insert(seq.end(), response.begin(), response.end());
      const TapedForward f = forward_on_tape(tape, state, params, task.vision_feats, seq);
      const std::size_t base = task.vision_feats.rows() + task.prompt_tokens.size();
      std::vector<std::size_t> rows, cols;
      for (std::size_t t = 0; t < response.size(); ++t) {
        rows.push_back(base + t - 1);
        cols.push_back(static_cast<std::size_t>(response[t]));
      }
      const ad::Var logp = ad::pick(ad::log_softmax_rows(ad::gather_rows(f.logits, rows)), cols);
      const double coef = -1.0 / static_cast<double>(w.batch_size * response.size());
      const ad::Var loss = ad::weighted_sum(logp, std::vector<double>(response.size(), coef));
      tape.backward(loss);
      accumulate(grads, collect_grads(tape, state, params));
    }
    optim::apply_update(state, grads, opt, ucfg);
  }
}

inline EvalRecord evaluate(const PolicyState& state, const TrainConfig& cfg, std::size_t step) {
  EvalRecord rec;
  rec.step = step;
  if (cfg.eval_tasks == 0) return rec;
  double acc = 0.0, fmt = 0.0;
  for (std::size_t i = 0; i < cfg.eval_tasks; ++i) {
    const env::Task task = env::sample_task(eval_task_seed(cfg.master_seed, i), cfg.env);
    const Rollout r = greedy_decode(state, task, cfg.rollout.max_len, cfg.reward);
    acc += r.reward.accuracy;
    fmt += r.reward.format;
  }
  rec.accuracy = acc / static_cast<double>(cfg.eval_tasks);
  rec.format_rate = fmt / static_cast<double>(cfg.eval_tasks);
  return rec;
}

inline nlohmann::json group_dump(const GroupBatch& g) {
  nlohmann::json rollouts = nlohmann::json::array();
  for (const auto& r : g.rollouts) {
    rollouts.push_back({{"token_ids", r.token_ids},
                        {"logprobs", r.logprobs},
                        {"entropies", r.entropies},
                        {"reward", r.reward.total},
                        {"truncated", r.truncated}});
  }
  return {{"task", env::task_to_json(g.task)}, {"group_seed", g.group_seed}, {"rollouts", rollouts}};
}

struct TrainResult {
  std::vector<StepMetrics> metrics;
  std::vector<EvalRecord> evals;
  PolicyState final_state;
  PolicyState reference;
  optim::OptimizerState optimizer;
};

/// Initial policy for a run: seeded init followed by the format warm-up.
inline PolicyState initial_policy(const TrainConfig& cfg) {
  PolicyConfig pc = cfg.policy;
  pc.seed = derive_seed(cfg.master_seed, {kPolicyStream, cfg.policy.seed});
  PolicyState state = init_policy(pc);
  run_warmup(state, cfg);
  return state;
}

/// One RL step on `state`. Exposed separately so tests can drive single steps.
inline StepMetrics train_step(PolicyState& state, optim::OptimizerState& opt, const PolicyState& reference,
                              const TrainConfig& cfg, std::size_t step, TrainObserver* observer = nullptr) {
  StepMetrics m;
  m.step = step;
  m.lambda = lambda_at(cfg, step);
  const bool dapo = is_dapo_family(cfg.mode);

  std::vector<GroupBatch> groups;
  for (std::size_t g = 0; g < cfg.groups_per_step; ++g) {
    const env::Task task = env::sample_task(task_seed(cfg.master_seed, step, g), cfg.env);
    auto make = [&](std::size_t attempt) {
      return generate_group(state, task, cfg.rollout, group_seed(cfg.master_seed, step, g, attempt), cfg.reward);
    };
    GroupBatch batch = make(0);
    if (!dapo) {
      groups.push_back(std::move(batch));
      continue;
    }
    ResampleOutcome res = resample_degenerate(std::move(batch), cfg.max_resample_times, make);
    if (res.resamples > 0) ++m.resampled_groups;
    if (res.skipped) {
      ++m.skipped_groups;
    } else {
      groups.push_back(std::move(*res.batch));
    }
  }

  std::vector<std::vector<shaping::TokenSignals>> signals;
  std::vector<optim::ShapedGroup> shaped;
  std::size_t n_rollouts = 0;
  double sum_reward = 0.0, sum_acc = 0.0, sum_len = 0.0, sum_vs = 0.0, sum_h = 0.0;
  for (const auto& batch : groups) {
    const auto adv = shaping::grpo_advantages(rewards_of(batch), cfg.shaping.adv_epsilon);
    std::vector<shaping::TokenSignals> sig;
    for (std::size_t i = 0; i < batch.rollouts.size(); ++i) {
      const Rollout& r = batch.rollouts[i];
      sig.push_back(shaping::shape_rollout(r, adv[i], cfg.shaping, m.lambda));
      if (cfg.shaping.mode == shaping::WeightingMode::pepo) {
        const double mw = numerics::mean(sig.back().weights);
        if (std::abs(mw - 1.0) > 1e-6) {
          throw NumericalError("train: token weights lost unit mean (" + std::to_string(mw) + ") at step " +
                               std::to_string(step));
        }
      }
      ++n_rollouts;
      sum_reward += r.reward.total;
      sum_acc += r.reward.accuracy;
      sum_len += static_cast<double>(r.length());
      sum_vs += numerics::mean(sig.back().vs);
      sum_h += numerics::mean(r.entropies);
    }
    signals.push_back(std::move(sig));
  }
  for (std::size_t i = 0; i < groups.size(); ++i) shaped.push_back({&groups[i], signals[i]});

  if (n_rollouts > 0) {
    const double n = static_cast<double>(n_rollouts);
    m.mean_reward = sum_reward / n;
    m.mean_accuracy = sum_acc / n;
    m.mean_response_length = sum_len / n;
    m.mean_vs = sum_vs / n;
    m.mean_entropy = sum_h / n;

    optim::LossOptions lo;
    lo.mode = cfg.shaping.mode;
    lo.temperature = cfg.rollout.temperature;
    lo.reference = &reference;
    const optim::LossResult res = optim::loss_and_grads(shaped, state, cfg.update, lo);
    m.loss = res.loss;
    bool finite = std::isfinite(res.loss);
    for (const auto& g : res.grads) finite = finite && g.value.all_finite();
    if (!finite) {
      nlohmann::json dump = {{"step", step}, {"loss", std::isfinite(res.loss) ? nlohmann::json(res.loss) : nlohmann::json("non-finite")}};
      dump["groups"] = nlohmann::json::array();
      for (const auto& g : groups) dump["groups"].push_back(group_dump(g));
      throw TrainingAbort("train: non-finite loss or gradient at step " + std::to_string(step), std::move(dump));
    }
    optim::UpdateConfig ucfg = cfg.update;
    ucfg.learning_rate = learning_rate_at(cfg, step);
    optim::apply_update(state, res.grads, opt, ucfg);
  } else {
    // Every group skipped: no gradient and no parameter movement.
    ++opt.step_count;
  }

  if (observer) observer->on_step(StepRecord{m, groups, signals});
  return m;
}

/// Runs warm-up followed by k_max RL steps (k = 1..k_max). Evaluations run
/// after warm-up, every eval_every steps, and at the final step.
inline TrainResult train(TrainConfig cfg, TrainObserver* observer = nullptr) {
  cfg.resolve();
  cfg.validate();
  TrainResult out;
  PolicyState state = initial_policy(cfg);
  out.reference = state;
  optim::OptimizerState opt = optim::OptimizerState::for_policy(state);

  auto run_eval = [&](std::size_t step) {
    EvalRecord rec = evaluate(state, cfg, step);
    out.evals.push_back(rec);
    if (observer) observer->on_eval(rec, state);
  };
  run_eval(0);
  for (std::size_t k = 1; k <= cfg.k_max; ++k) {
    out.metrics.push_back(train_step(state, opt, out.reference, cfg, k, observer));
    if (k % cfg.eval_every == 0 || k == cfg.k_max) run_eval(k);
  }
  out.final_state = std::move(state);
  out.optimizer = std::move(opt);
  return out;
}

}  // namespace pepo::train
