// Command-line entry point: train, ablate, analyze.

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pepo/analysis.hpp"
#include "pepo/checkpoint.hpp"
#include "pepo/config.hpp"
#include "pepo/run.hpp"

namespace fs = std::filesystem;
using namespace pepo;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumerical = 4;

/// Git-style blob hash of the running executable.
std::string binary_hash() {
  std::string content;
  try {
    content = run::read_text("/proc/self/exe");
  } catch (const MissingInputError&) {
    return "unavailable";
  }
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string output;
};

config::RunConfig load(const TrainArgs& a, config::Assignments& overrides) {
  const config::Assignments file = a.config.empty() ? config::Assignments{} : run::load_assignments(a.config);
  overrides = config::parse_overrides(a.sets);
  return config::resolve(file, overrides);
}

int cmd_train(const TrainArgs& a) {
  config::Assignments overrides;
  config::RunConfig cfg = load(a, overrides);
  const fs::path dir = a.output.empty() ? run::output_dir_for(cfg) : fs::path(a.output);
  const auto out = run::execute(cfg, overrides, binary_hash(), dir);
  const auto& ev = out.result.evals.back();
  std::cout << "run " << dir.string() << ": " << out.result.metrics.size() << " steps, final eval accuracy "
            << run::fmt17(ev.accuracy) << "\n";
  return 0;
}

const std::vector<std::string> kSweepable = {"mode",
                                             "shaping.alpha",
                                             "shaping.use_minmax",
                                             "shaping.use_schedule",
                                             "shaping.layer_range",
                                             "shaping.similarity_metric"};

struct Sweep {
  std::string key;
  std::vector<std::string> values;
};

Sweep parse_sweep(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw ConfigError(s, "sweep must look like key=v1,v2,...");
  Sweep sw{s.substr(0, eq), {}};
  if (std::find(kSweepable.begin(), kSweepable.end(), sw.key) == kSweepable.end()) {
    throw ConfigError(sw.key, "not a sweepable key");
  }
  std::string rest = s.substr(eq + 1);
  std::size_t pos = 0;
  while (pos <= rest.size()) {
    const auto comma = rest.find(',', pos);
    const std::string v = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (v.empty()) throw ConfigError(sw.key, "empty sweep value");
    sw.values.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return sw;
}

std::string sanitize(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' && c != '_' && c != '=') c = '_';
  }
  return s;
}

int cmd_ablate(const TrainArgs& a, const std::vector<std::string>& sweep_specs) {
  std::vector<Sweep> sweeps;
  for (const auto& s : sweep_specs) sweeps.push_back(parse_sweep(s));

  // Cartesian product of all sweeps, first sweep varying slowest.
  std::vector<std::vector<std::pair<std::string, std::string>>> grid{{}};
  for (const auto& sw : sweeps) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& point : grid) {
      for (const auto& v : sw.values) {
        auto p = point;
        p.emplace_back(sw.key, v);
        next.push_back(std::move(p));
      }
    }
    grid = std::move(next);
  }

  // Validate every grid point before running any of them.
  std::vector<config::RunConfig> configs;
  std::vector<config::Assignments> all_overrides;
  for (const auto& point : grid) {
    TrainArgs sub = a;
    for (const auto& [k, v] : point) sub.sets.push_back(k + "=" + v);
    config::Assignments ov;
    configs.push_back(load(sub, ov));
    all_overrides.push_back(std::move(ov));
  }
  const fs::path root = a.output.empty() ? run::output_dir_for(configs.front()) : fs::path(a.output);
  fs::create_directories(root);
  std::ofstream summary(root / "summary.csv", std::ios::binary | std::ios::trunc);
  for (const auto& sw : sweeps) summary << sw.key << ',';
  summary << "run_dir,final_eval_accuracy,mean_reward\n";
  const std::string hash = binary_hash();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::string label;
    for (const auto& [k, v] : grid[i]) label += (label.empty() ? "" : ",") + k + "=" + v;
    const fs::path dir = root / (label.empty() ? std::string("base") : sanitize(label));
    const auto out = run::execute(configs[i], all_overrides[i], hash, dir);
    double mean_reward = 0.0;
    for (const auto& m : out.result.metrics) mean_reward += m.mean_reward;
    mean_reward /= static_cast<double>(out.result.metrics.size());
    for (const auto& kv : grid[i]) summary << kv.second << ',';
    summary << dir.filename().string() << ',' << run::fmt17(out.result.evals.back().accuracy) << ','
            << run::fmt17(mean_reward) << '\n';
    summary.flush();
    std::cout << (label.empty() ? "base" : label) << ": eval accuracy " << run::fmt17(out.result.evals.back().accuracy)
              << "\n";
  }
  return 0;
}

struct AnalyzeArgs {
  std::string run_dir;
  std::string kind;
  std::string k = "auto";
  std::size_t min_count = 50;
  std::size_t top = 100;
  std::size_t bins = 10;
  std::string ranking = "vs";
  std::string removal = "delete";
  bool absolute_positions = false;
  std::string checkpoint;
};

config::RunConfig run_config(const fs::path& dir) {
  const fs::path m = dir / "manifest.json";
  if (!fs::exists(m)) throw MissingInputError("no manifest at " + m.string());
  return config::resolve(run::load_assignments(m.string()), {});
}

std::vector<std::vector<double>> shifts_for(const std::vector<analysis::ResponseRecord>& recs,
                                            const config::RunConfig& cfg, const AnalyzeArgs& a,
                                            const fs::path& dir) {
  const fs::path ckpt = a.checkpoint.empty() ? dir / "checkpoints" / "final.ckpt" : fs::path(a.checkpoint);
  const PolicyState state = checkpoint::load_policy(ckpt.string());
  analysis::ShiftOptions opts;
  opts.removal = analysis::parse_removal(a.removal);
  opts.absolute_positions = a.absolute_positions;
  std::vector<std::vector<double>> out;
  out.reserve(recs.size());
  for (const auto& r : recs) {
    const env::Task task = env::sample_task(r.task_seed, cfg.train.env);
    out.push_back(analysis::hidden_state_shift(state, task, r.token_ids, opts));
  }
  return out;
}

int cmd_analyze(const AnalyzeArgs& a) {
  const fs::path dir(a.run_dir);
  if (!fs::is_directory(dir)) throw MissingInputError("run directory " + dir.string() + " does not exist");
  const config::RunConfig cfg = run_config(dir);
  std::vector<analysis::ResponseRecord> recs;
  for (const auto& j : run::read_dumps(dir)) recs.push_back(run::to_record(j));
  const fs::path out_dir = dir / "analysis";
  fs::create_directories(out_dir);
  std::ofstream out;
  auto open = [&](const std::string& name) {
    out.open(out_dir / name, std::ios::binary | std::ios::trunc);
    std::cout << (out_dir / name).string() << "\n";
  };

  if (a.kind == "split") {
    std::optional<std::size_t> k;
    if (a.k != "auto") k = config::detail::parse_number<std::size_t>("--k", a.k);
    if (k && *k == 0) throw ConfigError("--k", "must be at least 1");
    const auto split = analysis::correctness_split(recs, k);
    open("split_aggregates.csv");
    out << "partition,m_glob,m_high,m_low,k\n";
    for (const auto* part : {&split.correct, &split.incorrect}) {
      for (const auto& ag : *part) {
        out << (ag.correct ? "correct" : "incorrect") << ',' << run::fmt17(ag.m_glob) << ',' << run::fmt17(ag.m_high)
            << ',' << run::fmt17(ag.m_low) << ',' << ag.k_used << '\n';
      }
    }
    out.close();
    open("split_histogram.csv");
    out << analysis::histogram_csv(split);
  } else if (a.kind == "shift") {
    const auto d = shifts_for(recs, cfg, a, dir);
    open("shift.csv");
    out << "response,t,token,entropy,vs,d\n";
    for (std::size_t i = 0; i < recs.size(); ++i) {
      for (std::size_t t = 0; t < d[i].size(); ++t) {
        out << i << ',' << t << ',' << recs[i].token_ids[t] << ',' << run::fmt17(recs[i].entropies[t]) << ','
            << run::fmt17(recs[i].vs[t]) << ',' << run::fmt17(d[i][t]) << '\n';
      }
    }
  } else if (a.kind == "binned") {
    const auto ranking = analysis::parse_ranking(a.ranking);
    const auto d = shifts_for(recs, cfg, a, dir);
    std::vector<double> flat_d, flat_rank;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto& sig = ranking == analysis::Ranking::vs ? recs[i].vs : recs[i].entropies;
      flat_d.insert(flat_d.end(), d[i].begin(), d[i].end());
      flat_rank.insert(flat_rank.end(), sig.begin(), sig.end());
    }
    const auto bins = analysis::binned_shift(flat_d, flat_rank, a.bins);
    open("binned_" + a.ranking + ".csv");
    out << "bin,ranking,tokens,mean_d\n";
    const std::size_t base = flat_d.size() / a.bins, extra = flat_d.size() % a.bins;
    for (std::size_t b = 0; b < bins.size(); ++b) {
      out << b << ',' << a.ranking << ',' << base + (b < extra ? 1 : 0) << ',' << run::fmt17(bins[b]) << '\n';
    }
  } else if (a.kind == "freq") {
    const auto ranking = analysis::parse_ranking(a.ranking);
    const auto rows = analysis::frequency_partition(recs, ranking, a.min_count, a.top);
    open("freq_" + a.ranking + ".csv");
    out << "token_id,mean_" << a.ranking << ",count\n";
    for (const auto& r : rows) out << r.id << ',' << run::fmt17(r.mean) << ',' << r.count << '\n';
  } else {
    throw ConfigError("--kind", "expected split, shift, binned or freq");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-level advantage shaping for group-relative policy optimization"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "run one training experiment");
  train->add_option("--config", train_args.config, "config file or run manifest")->required();
  train->add_option("--set", train_args.sets, "override, key=value (repeatable)");
  train->add_option("--output", train_args.output, "run directory");

  TrainArgs ablate_args;
  std::vector<std::string> sweeps;
  auto* ablate = app.add_subcommand("ablate", "grid of runs sharing one master seed");
  ablate->add_option("--config", ablate_args.config, "base config file")->required();
  ablate->add_option("--sweep", sweeps, "key=v1,v2,... (repeatable)");
  ablate->add_option("--set", ablate_args.sets, "override, key=value (repeatable)");
  ablate->add_option("--output", ablate_args.output, "sweep root directory");

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "token-level diagnostics over a run's dumps");
  analyze->add_option("--run", an.run_dir, "run directory")->required();
  analyze->add_option("--kind", an.kind, "split | shift | binned | freq")->required();
  analyze->add_option("--k", an.k, "aggregate size for split, or auto");
  analyze->add_option("--min-count", an.min_count, "minimum occurrences for freq");
  analyze->add_option("--top", an.top, "rows kept by freq");
  analyze->add_option("--bins", an.bins, "percentile bins for binned");
  analyze->add_option("--ranking", an.ranking, "vs | entropy");
  analyze->add_option("--removal", an.removal, "delete | zero-features");
  analyze->add_flag("--absolute-positions", an.absolute_positions, "keep text positions after removing the image");
  analyze->add_option("--checkpoint", an.checkpoint, "policy checkpoint (default: checkpoints/final.ckpt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(train_args);
    if (ablate->parsed()) return cmd_ablate(ablate_args, sweeps);
    return cmd_analyze(an);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return kExitMissing;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
