#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepo/analysis.hpp"
#include "pepo/checkpoint.hpp"
#include "pepo/config.hpp"
#include "pepo/errors.hpp"
#include "pepo/trainer.hpp"

// Run directories: metrics/eval CSVs, rollout dumps, checkpoints and the
// manifest that reproduces the run.
namespace pepo::run {

namespace fs = std::filesystem;

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kMetricsHeader =
    "step,mean_reward,mean_accuracy,mean_response_length,mean_vs,mean_entropy,lambda,resampled_groups,skipped_groups,"
    "loss";

inline std::string metrics_row(const train::StepMetrics& m) {
  return std::to_string(m.step) + ',' + fmt17(m.mean_reward) + ',' + fmt17(m.mean_accuracy) + ',' +
         fmt17(m.mean_response_length) + ',' + fmt17(m.mean_vs) + ',' + fmt17(m.mean_entropy) + ',' +
         fmt17(m.lambda) + ',' + std::to_string(m.resampled_groups) + ',' + std::to_string(m.skipped_groups) + ',' +
         fmt17(m.loss);
}

inline std::string metrics_csv(const std::vector<train::StepMetrics>& rows) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (const auto& m : rows) s += metrics_row(m) + "\n";
  return s;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingInputError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Default root for run directories.
inline fs::path output_root() {
  if (const char* env = std::getenv("PEPO_OUTPUT_ROOT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

inline fs::path output_dir_for(const config::RunConfig& c) {
  return c.output_dir.empty() ? output_root() / c.train.experiment : fs::path(c.output_dir);
}

inline nlohmann::json manifest(const config::RunConfig& c, const config::Assignments& overrides,
                               const std::string& binary_hash) {
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& [k, v] : config::flatten(c)) cfg[k] = v;
  nlohmann::json ov = nlohmann::json::object();
  for (const auto& [k, v] : overrides) ov[k] = v;
  return {{"experiment", c.train.experiment},
          {"master_seed", c.train.master_seed},
          {"binary_sha1", binary_hash},
          {"overrides", ov},
          {"config", cfg}};
}

/// Config assignments stored in a manifest, in key-table order.
inline config::Assignments manifest_assignments(const nlohmann::json& m) {
  if (!m.contains("config") || !m["config"].is_object()) throw ConfigError("config", "manifest has no config object");
  config::Assignments out;
  for (const auto& b : config::key_table()) {
    if (m["config"].contains(b.name)) out.emplace_back(b.name, m["config"][b.name].get<std::string>());
  }
  for (const auto& [k, v] : m["config"].items()) config::binding(k);
  return out;
}

/// Reads either a flat config file or a run manifest (.json).
inline config::Assignments load_assignments(const std::string& path) {
  if (fs::path(path).extension() == ".json") {
    std::ifstream in(path);
    if (!in) throw ConfigError(path, "cannot read config file");
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path, e.what());
    }
    return manifest_assignments(m);
  }
  return config::read_file(path);
}

/// Streams per-step output into a run directory.
class RunWriter : public train::TrainObserver {
 public:
  RunWriter(fs::path dir, const config::RunConfig& cfg) : dir_(std::move(dir)), cfg_(cfg) {
    fs::create_directories(dir_);
    if (cfg_.output.checkpoints) fs::create_directories(dir_ / "checkpoints");
    metrics_.open(dir_ / "metrics.csv", std::ios::binary | std::ios::trunc);
    metrics_ << kMetricsHeader << '\n';
    eval_.open(dir_ / "eval.csv", std::ios::binary | std::ios::trunc);
    eval_ << "step,accuracy,format_rate\n";
    if (cfg_.output.dump_every > 0) rollouts_.open(dir_ / "rollouts.jsonl", std::ios::binary | std::ios::trunc);
    if (cfg_.output.signals) {
      signals_.open(dir_ / "signals.csv", std::ios::binary | std::ios::trunc);
      signals_ << "step,group,rollout_index,token_index,token,vs,entropy,vs_norm,h_norm,gate,weight,token_advantage\n";
    }
  }

  void on_step(const train::StepRecord& rec) override {
    metrics_ << metrics_row(rec.metrics) << '\n';
    metrics_.flush();
    const std::size_t step = rec.metrics.step;
    const bool dump = cfg_.output.dump_every > 0 &&
                      (step % cfg_.output.dump_every == 0 || step == cfg_.train.k_max);
    for (std::size_t g = 0; g < rec.groups.size(); ++g) {
      const auto& batch = rec.groups[g];
      for (std::size_t i = 0; i < batch.rollouts.size(); ++i) {
        const Rollout& r = batch.rollouts[i];
        const auto& s = rec.signals[g][i];
        if (dump) {
          nlohmann::json j = {{"step", step},
                              {"group", g},
                              {"rollout", i},
                              {"task_seed", batch.task.seed},
                              {"token_ids", r.token_ids},
                              {"logprobs", r.logprobs},
                              {"entropies", r.entropies},
                              {"vs", s.vs},
                              {"reward", r.reward.total},
                              {"accuracy", r.reward.accuracy},
                              {"truncated", r.truncated}};
          rollouts_ << j.dump() << '\n';
        }
        if (signals_.is_open()) {
          for (std::size_t t = 0; t < r.token_ids.size(); ++t) {
            signals_ << step << ',' << g << ',' << i << ',' << t << ',' << r.token_ids[t] << ','
                     << fmt17(s.vs[t]) << ',' << fmt17(r.entropies[t]) << ',' << fmt17(s.vs_norm[t]) << ','
                     << fmt17(s.h_norm[t]) << ',' << fmt17(s.gate[t]) << ',' << fmt17(s.weights[t]) << ','
                     << fmt17(s.token_adv[t]) << '\n';
          }
        }
      }
    }
    if (dump) rollouts_.flush();
  }

  void on_eval(const train::EvalRecord& rec, const PolicyState& state) override {
    eval_ << rec.step << ',' << fmt17(rec.accuracy) << ',' << fmt17(rec.format_rate) << '\n';
    eval_.flush();
    if (cfg_.output.checkpoints) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06zu.ckpt", rec.step);
      checkpoint::save_policy((dir_ / "checkpoints" / name).string(), state);
    }
  }

  void finish(const PolicyState& final_state) {
    if (cfg_.output.checkpoints) checkpoint::save_policy((dir_ / "checkpoints" / "final.ckpt").string(), final_state);
  }

 private:
  fs::path dir_;
  const config::RunConfig& cfg_;
  std::ofstream metrics_, eval_, rollouts_, signals_;
};

struct RunOutcome {
  fs::path dir;
  train::TrainResult result;
};

/// Trains and writes a complete run directory. On a numerical abort the
/// offending groups are written to abort_dump.json before rethrowing.
inline RunOutcome execute(const config::RunConfig& cfg, const config::Assignments& overrides,
                          const std::string& binary_hash, fs::path dir) {
  fs::create_directories(dir);
  {
    std::ofstream m(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    m << manifest(cfg, overrides, binary_hash).dump(2) << '\n';
  }
  RunWriter writer(dir, cfg);
  try {
    RunOutcome out{dir, train::train(cfg.train, &writer)};
    writer.finish(out.result.final_state);
    return out;
  } catch (const train::TrainingAbort& e) {
    std::ofstream d(dir / "abort_dump.json", std::ios::binary | std::ios::trunc);
    d << e.dump().dump(2) << '\n';
    throw;
  }
}

/// Rollout dump records of a run directory.
inline std::vector<nlohmann::json> read_dumps(const fs::path& dir) {
  const fs::path p = dir / "rollouts.jsonl";
  std::ifstream in(p);
  if (!in) throw MissingInputError("no rollout dumps at " + p.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  if (out.empty()) throw MissingInputError("rollout dump " + p.string() + " is empty");
  return out;
}

inline analysis::ResponseRecord to_record(const nlohmann::json& j) {
  analysis::ResponseRecord r;
  r.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
  r.entropies = j.at("entropies").get<std::vector<double>>();
  r.vs = j.at("vs").get<std::vector<double>>();
  r.correct = j.at("accuracy").get<int>() == 1;
  r.task_seed = j.at("task_seed").get<std::uint64_t>();
  return r;
}

}  // namespace pepo::run
