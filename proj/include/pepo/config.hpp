#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pepo/errors.hpp"
#include "pepo/trainer.hpp"

// Flat "key = value" run configuration. Every key maps onto one field of the
// training config; unknown keys are rejected.
namespace pepo::config {

struct OutputConfig {
  std::size_t dump_every = 10;  // rollout dumps every n steps (0 disables)
  bool signals = false;         // per-token shaping signals CSV
  bool checkpoints = true;

  friend bool operator==(const OutputConfig&, const OutputConfig&) = default;
};

struct RunConfig {
  std::string output_dir;  // empty: <output root>/<experiment>
  train::TrainConfig train;
  OutputConfig output;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError(std::string(key), "cannot parse '" + std::string(v) + "' as a number");
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(std::string(key), "expected true or false, got '" + std::string(v) + "'");
}

inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

struct KeyBinding {
  std::string name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

/// Every recognised key, in manifest order.
inline const std::vector<KeyBinding>& key_table() {
  using detail::format_double;
  using detail::parse_bool;
  using detail::parse_number;
  static const std::vector<KeyBinding> table = [] {
    std::vector<KeyBinding> t;
    auto size_key = [&](std::string name, auto member) {
      t.push_back({name,
                   [name, member](RunConfig& c, std::string_view v) { member(c) = parse_number<std::size_t>(name, v); },
                   [member](const RunConfig& c) { return std::to_string(member(c)); }});
    };
    auto u64_key = [&](std::string name, auto member) {
      t.push_back({name,
                   [name, member](RunConfig& c, std::string_view v) { member(c) = parse_number<std::uint64_t>(name, v); },
                   [member](const RunConfig& c) { return std::to_string(member(c)); }});
    };
    auto real_key = [&](std::string name, auto member) {
      t.push_back({name, [name, member](RunConfig& c, std::string_view v) { member(c) = parse_number<double>(name, v); },
                   [member](const RunConfig& c) { return format_double(member(c)); }});
    };
    auto bool_key = [&](std::string name, auto member) {
      t.push_back({name, [name, member](RunConfig& c, std::string_view v) { member(c) = parse_bool(name, v); },
                   [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); }});
    };

    t.push_back({"experiment", [](RunConfig& c, std::string_view v) { c.train.experiment = std::string(v); },
                 [](const RunConfig& c) { return c.train.experiment; }});
    t.push_back({"output_dir", [](RunConfig& c, std::string_view v) { c.output_dir = std::string(v); },
                 [](const RunConfig& c) { return c.output_dir; }});
    t.push_back({"mode", [](RunConfig& c, std::string_view v) { c.train.mode = train::parse_mode(v); },
                 [](const RunConfig& c) { return std::string(train::to_string(c.train.mode)); }});

    size_key("train.k_max", [](auto& c) -> auto& { return c.train.k_max; });
    size_key("train.groups_per_step", [](auto& c) -> auto& { return c.train.groups_per_step; });
    size_key("train.max_resample_times", [](auto& c) -> auto& { return c.train.max_resample_times; });
    size_key("train.eval_every", [](auto& c) -> auto& { return c.train.eval_every; });
    size_key("train.eval_tasks", [](auto& c) -> auto& { return c.train.eval_tasks; });
    u64_key("train.master_seed", [](auto& c) -> auto& { return c.train.master_seed; });
    t.push_back({"train.lr_schedule",
                 [](RunConfig& c, std::string_view v) {
                   if (v == "constant") c.train.lr_schedule = train::LrSchedule::constant;
                   else if (v == "cosine") c.train.lr_schedule = train::LrSchedule::cosine;
                   else throw ConfigError("train.lr_schedule", "expected constant or cosine");
                 },
                 [](const RunConfig& c) { return std::string(train::to_string(c.train.lr_schedule)); }});
    size_key("train.warmup_steps", [](auto& c) -> auto& { return c.train.warmup.steps; });
    size_key("train.warmup_batch_size", [](auto& c) -> auto& { return c.train.warmup.batch_size; });
    real_key("train.warmup_learning_rate", [](auto& c) -> auto& { return c.train.warmup.learning_rate; });
    size_key("train.warmup_max_think", [](auto& c) -> auto& { return c.train.warmup.max_think; });

    size_key("rollout.group_size", [](auto& c) -> auto& { return c.train.rollout.group_size; });
    real_key("rollout.temperature", [](auto& c) -> auto& { return c.train.rollout.temperature; });
    real_key("rollout.top_p", [](auto& c) -> auto& { return c.train.rollout.top_p; });
    size_key("rollout.max_len", [](auto& c) -> auto& { return c.train.rollout.max_len; });
    size_key("rollout.workers", [](auto& c) -> auto& { return c.train.rollout.workers; });

    real_key("shaping.alpha", [](auto& c) -> auto& { return c.train.shaping.alpha; });
    t.push_back({"shaping.similarity_metric",
                 [](RunConfig& c, std::string_view v) {
                   try {
                     c.train.shaping.similarity_metric = shaping::parse_metric(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError("shaping.similarity_metric", e.what());
                   }
                 },
                 [](const RunConfig& c) { return std::string(shaping::to_string(c.train.shaping.similarity_metric)); }});
    t.push_back({"shaping.layer_range",
                 [](RunConfig& c, std::string_view v) { c.train.shaping.layer_range = shaping::LayerRange::parse(v); },
                 [](const RunConfig& c) { return c.train.shaping.layer_range.str(); }});
    bool_key("shaping.use_minmax", [](auto& c) -> auto& { return c.train.shaping.use_minmax; });
    bool_key("shaping.use_schedule", [](auto& c) -> auto& { return c.train.shaping.use_schedule; });
    real_key("shaping.entropy_quantile", [](auto& c) -> auto& { return c.train.shaping.entropy_quantile; });
    real_key("shaping.adv_epsilon", [](auto& c) -> auto& { return c.train.shaping.adv_epsilon; });
    t.push_back({"shaping.lambda_override",
                 [](RunConfig& c, std::string_view v) {
                   if (v == "none") c.train.shaping.lambda_override.reset();
                   else c.train.shaping.lambda_override = parse_number<double>("shaping.lambda_override", v);
                 },
                 [](const RunConfig& c) {
                   const auto& o = c.train.shaping.lambda_override;
                   return o ? format_double(*o) : std::string("none");
                 }});

    real_key("update.clip_low", [](auto& c) -> auto& { return c.train.update.clip_low; });
    real_key("update.clip_high", [](auto& c) -> auto& { return c.train.update.clip_high; });
    real_key("update.kl_beta", [](auto& c) -> auto& { return c.train.update.kl_beta; });
    t.push_back({"update.loss_averaging",
                 [](RunConfig& c, std::string_view v) {
                   if (v == "sequence_mean") c.train.update.loss_averaging = optim::LossAveraging::sequence_mean;
                   else if (v == "token_level") c.train.update.loss_averaging = optim::LossAveraging::token_level;
                   else throw ConfigError("update.loss_averaging", "expected sequence_mean or token_level");
                 },
                 [](const RunConfig& c) { return std::string(optim::to_string(c.train.update.loss_averaging)); }});
    real_key("update.learning_rate", [](auto& c) -> auto& { return c.train.update.learning_rate; });
    real_key("update.adam_beta1", [](auto& c) -> auto& { return c.train.update.adam_beta1; });
    real_key("update.adam_beta2", [](auto& c) -> auto& { return c.train.update.adam_beta2; });
    real_key("update.adam_epsilon", [](auto& c) -> auto& { return c.train.update.adam_epsilon; });
    size_key("update.workers", [](auto& c) -> auto& { return c.train.update.workers; });

    size_key("policy.model_dim", [](auto& c) -> auto& { return c.train.policy.model_dim; });
    size_key("policy.num_layers", [](auto& c) -> auto& { return c.train.policy.num_layers; });
    size_key("policy.num_heads", [](auto& c) -> auto& { return c.train.policy.num_heads; });
    size_key("policy.ffn_dim", [](auto& c) -> auto& { return c.train.policy.ffn_dim; });
    size_key("policy.max_positions", [](auto& c) -> auto& { return c.train.policy.max_positions; });
    u64_key("policy.seed", [](auto& c) -> auto& { return c.train.policy.seed; });
    bool_key("policy.freeze_vision", [](auto& c) -> auto& { return c.train.policy.freeze_vision; });

    size_key("env.num_concepts", [](auto& c) -> auto& { return c.train.env.num_concepts; });
    size_key("env.num_vision_tokens", [](auto& c) -> auto& { return c.train.env.num_vision_tokens; });
    size_key("env.vision_dim", [](auto& c) -> auto& { return c.train.env.vision_dim; });
    real_key("env.noise_scale", [](auto& c) -> auto& { return c.train.env.noise_scale; });
    size_key("env.num_background", [](auto& c) -> auto& { return c.train.env.num_background; });
    u64_key("env.codebook_seed", [](auto& c) -> auto& { return c.train.env.codebook_seed; });
    size_key("env.num_think_tokens", [](auto& c) -> auto& { return c.train.env.num_think_tokens; });

    real_key("reward.format_weight", [](auto& c) -> auto& { return c.train.reward.format; });
    real_key("reward.accuracy_weight", [](auto& c) -> auto& { return c.train.reward.accuracy; });

    size_key("output.dump_every", [](auto& c) -> auto& { return c.output.dump_every; });
    bool_key("output.signals", [](auto& c) -> auto& { return c.output.signals; });
    bool_key("output.checkpoints", [](auto& c) -> auto& { return c.output.checkpoints; });
    return t;
  }();
  return table;
}

inline const KeyBinding& binding(std::string_view key) {
  for (const auto& b : key_table()) {
    if (b.name == key) return b;
  }
  throw ConfigError(std::string(key), "unknown key");
}

/// Mode-dependent defaults, applied before file values and overrides.
inline void apply_mode_defaults(RunConfig& c) {
  if (train::is_dapo_family(c.train.mode)) {
    c.train.update.clip_high = 0.28;
    c.train.update.loss_averaging = optim::LossAveraging::token_level;
  }
}

using Assignments = std::vector<std::pair<std::string, std::string>>;

/// Parses "key = value" lines; '#' starts a comment. Keys are checked here.
inline Assignments parse_text(std::string_view text) {
  Assignments out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string s = detail::trim(line);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(s, "line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = detail::trim(std::string_view(s).substr(0, eq));
    std::string value = detail::trim(std::string_view(s).substr(eq + 1));
    binding(key);
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline Assignments parse_overrides(const std::vector<std::string>& sets) {
  Assignments out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(s, "override must look like key=value");
    std::string key = detail::trim(std::string_view(s).substr(0, eq));
    binding(key);
    out.emplace_back(std::move(key), detail::trim(std::string_view(s).substr(eq + 1)));
  }
  return out;
}

inline std::string find_value(const Assignments& a, std::string_view key) {
  std::string v;
  for (const auto& [k, val] : a) {
    if (k == key) v = val;
  }
  return v;
}

/// Resolves defaults, mode defaults, file values, then overrides, in that
/// order. The mode itself is taken from the last assignment that names it.
inline RunConfig resolve(const Assignments& file, const Assignments& overrides) {
  RunConfig c;
  const std::string mode_o = find_value(overrides, "mode");
  const std::string mode_f = find_value(file, "mode");
  if (!mode_o.empty() || !mode_f.empty()) c.train.mode = train::parse_mode(mode_o.empty() ? mode_f : mode_o);
  apply_mode_defaults(c);
  for (const auto* list : {&file, &overrides}) {
    for (const auto& [k, v] : *list) binding(k).set(c, v);
  }
  c.train.resolve();
  c.train.validate();
  return c;
}

inline Assignments read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, "cannot read config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

/// Every key with its resolved value, in table order.
inline std::vector<std::pair<std::string, std::string>> flatten(const RunConfig& c) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& b : key_table()) out.emplace_back(b.name, b.get(c));
  return out;
}

/// Renders the resolved config in file form; reading it back reproduces `c`.
inline std::string to_text(const RunConfig& c) {
  std::string s;
  for (const auto& [k, v] : flatten(c)) s += k + " = " + v + "\n";
  return s;
}

}  // namespace pepo::config
