// Command-line entry points. Exit codes: 0 ok, 1 runtime failure, 2 bad usage
// or configuration, 3 training diverged.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "tavt/tavt.hpp"

namespace fs = std::filesystem;
using namespace tavt;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a, bool required) {
  auto* opt = cmd->add_option("--config", a.path, "Config file (key = value lines)");
  if (required) opt->required();
  cmd->add_option("--set", a.overrides, "Override one config key, key=value; repeatable, applied after the file");
  cmd->add_option("--seed", a.seed, "Seed; overrides the config's seed");
}

TrainConfig resolve(const ConfigArgs& a, TrainConfig cfg) {
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(tavt::detail::trim(kv.substr(0, eq)), tavt::detail::trim(kv.substr(eq + 1)));
  }
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  return cfg;
}

TrainConfig resolve(const ConfigArgs& a) {
  if (!fs::exists(a.path)) throw ConfigError("config file '" + a.path + "' not found");
  TrainConfig cfg;
  std::ifstream in(a.path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str());
  return resolve(a, cfg);
}

std::vector<TaskSpec> tasks_for(const RunState& st, const std::string& split) {
  if (split == "train") return st.train_tasks;
  if (split == "test") return st.test_tasks;
  auto all = st.train_tasks;
  all.insert(all.end(), st.test_tasks.begin(), st.test_tasks.end());
  return all;
}

/// A checkpointed run when --run-dir is given, otherwise fresh parameters from the config.
std::unique_ptr<RunState> open_run(const std::string& run_dir, const ConfigArgs& a) {
  if (!run_dir.empty()) {
    auto st = load_checkpoint((fs::path(run_dir) / "checkpoint").string());
    if (!a.path.empty()) std::cerr << "note: --config ignored, using the checkpoint's config\n";
    if (a.seed) st->cfg.seed = *a.seed;
    return st;
  }
  if (a.path.empty()) throw ConfigError("either --run-dir or --config is required");
  return make_run(resolve(a));
}

std::vector<LatentRecord> latent_records(const std::vector<TaskSpec>& tasks, const TestResult& res) {
  std::vector<LatentRecord> out;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    out.push_back({static_cast<int>(i), tasks[i], "on", to_vector(res.z_on[i])});
  return out;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  ConfigArgs cfg;
  int epochs = 1;
  std::string run_dir;
  bool resume = false;
  int checkpoint_every = 1;
};

int cmd_train(const TrainArgs& a) {
  const fs::path dir = a.run_dir.empty() ? fs::path("runs") : fs::path(a.run_dir);
  const auto ckpt = (dir / "checkpoint").string();
  std::unique_ptr<RunState> st;
  if (a.resume && fs::exists(dir / "checkpoint" / "meta.json")) {
    st = load_checkpoint(ckpt);
    std::cerr << "resuming at epoch " << st->epoch << "\n";
  } else {
    st = make_run(resolve(a.cfg));  // validate before touching the run directory
    fs::create_directories(dir);
    std::ofstream(dir / "config.cfg", std::ios::trunc) << st->cfg.serialize();
  }
  const auto metrics = (dir / "metrics.jsonl").string();
  const auto timing = (dir / "timing.jsonl").string();
  for (int e = 0; e < a.epochs; ++e) {
    EpochResult res;
    try {
      res = meta_train_epoch(*st);
    } catch (const DivergenceError& err) {
      if (!err.record.empty()) append_jsonl(metrics, json::parse(err.record));
      std::cerr << "error: " << err.what() << "\n";
      return kExitDiverged;
    }
    append_jsonl(metrics, res.record.to_json());
    append_jsonl(timing, {{"epoch", res.record.epoch}, {"seconds", res.seconds}});
    const bool last = e + 1 == a.epochs;
    if (last || (a.checkpoint_every > 0 && (e + 1) % a.checkpoint_every == 0)) save_checkpoint(*st, ckpt);
    const auto& s = res.record.scalars;
    std::cout << "epoch " << res.record.epoch << "  return/train " << s.at("return/train") << "  return/ood "
              << s.at("return/ood") << "  (" << std::fixed << std::setprecision(1) << res.seconds << " s)"
              << std::defaultfloat << std::setprecision(6) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  ConfigArgs cfg;
  std::string run_dir;
  std::string split = "test";
  std::string latents;
};

int cmd_eval(const EvalArgs& a) {
  auto st = open_run(a.run_dir, a.cfg);
  json report;
  report["epoch"] = st->epoch;
  report["seed"] = st->cfg.seed;
  report["config_hash"] = st->cfg.hash();
  std::vector<LatentRecord> latents;
  for (const std::string split : {"train", "test"}) {
    if (a.split != "all" && a.split != split) continue;
    const auto tasks = tasks_for(*st, split);
    auto rng = eval_rng(st->cfg, st->epoch);
    auto res = meta_test(*st, tasks, rng);
    st->decoder->eval();
    const auto cd = context_difference(st->decoder, st->encoder, res.evaluation);
    const double bias = q_estimation_bias(st->critic, st->policy, st->env, tasks, res.z_on, st->cfg.bias_episodes,
                                          st->sac(), rng);
    report[split] = {{"mean_return", res.mean_return},
                     {"returns", res.returns},
                     {"ctx_diff_reward", cd.reward},
                     {"ctx_diff_state", cd.state},
                     {"q_bias", bias}};
    auto recs = latent_records(tasks, res);
    if (split == "test")
      for (auto& r : recs) r.task += static_cast<int>(latents.size());
    latents.insert(latents.end(), recs.begin(), recs.end());
  }
  if (!a.latents.empty()) latent_export(a.latents, latents);
  std::cout << report.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- export-latents

struct ExportArgs {
  ConfigArgs cfg;
  std::string run_dir;
  std::string split = "all";
  std::string out;
};

int cmd_export(const ExportArgs& a) {
  auto st = open_run(a.run_dir, a.cfg);
  const auto tasks = tasks_for(*st, a.split);
  auto rng = eval_rng(st->cfg, st->epoch);
  auto res = meta_test(*st, tasks, rng);
  latent_export(a.out, latent_records(tasks, res));
  std::cout << "wrote " << tasks.size() << " latents to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  ConfigArgs cfg;
  int epochs = 1;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> variants;
  std::string out;
};

int cmd_ablate(const AblateArgs& a) {
  const auto base = resolve(a.cfg);
  std::vector<Variant> variants;
  for (const auto& name : a.variants) {
    bool found = false;
    for (auto v : all_variants())
      if (name == to_string(v)) {
        variants.push_back(v);
        found = true;
      }
    if (!found) throw ConfigError("unknown variant '" + name + "'");
  }
  if (variants.empty()) variants = all_variants();
  if (!a.out.empty()) fs::create_directories(a.out);
  std::cout << std::left << std::setw(12) << "variant" << std::setw(6) << "seed" << std::setw(14) << "return/ood"
            << std::setw(14) << "ctx/reward" << std::setw(14) << "ctx/state" << "q_bias\n";
  for (auto v : variants) {
    for (auto seed : a.seeds) {
      auto cfg = with_variant(base, v);
      cfg.seed = seed;
      const std::string tag = std::string(to_string(v)) + "_s" + std::to_string(seed);
      auto summary = train_run(cfg, a.epochs, [&](const RunState&, const EpochResult& r) {
        if (a.out.empty()) return;
        auto j = r.record.to_json();
        j["variant"] = to_string(v);
        append_jsonl((fs::path(a.out) / (tag + ".jsonl")).string(), j);
      });
      std::cout << std::setw(12) << to_string(v) << std::setw(6) << seed << std::setw(14) << summary.final_ood_return
                << std::setw(14) << summary.final_ctx_reward << std::setw(14) << summary.final_ctx_state
                << summary.final_q_bias << "\n";
      if (!a.out.empty())
        append_jsonl((fs::path(a.out) / "summary.jsonl").string(),
                     {{"variant", to_string(v)},
                      {"seed", seed},
                      {"epochs", a.epochs},
                      {"config_hash", cfg.hash()},
                      {"final_ood_return", summary.final_ood_return},
                      {"final_ctx_reward", summary.final_ctx_reward},
                      {"final_ctx_state", summary.final_ctx_state},
                      {"final_q_bias", summary.final_q_bias},
                      {"initial_ood_return", summary.initial_ood_return}});
    }
  }
  return 0;
}

// ---------------------------------------------------------------- metrics-summary

struct SummaryArgs {
  std::string path;
  int window = 3;
};

int cmd_summary(const SummaryArgs& a) {
  std::vector<MetricRecord> records;
  for (const auto& j : read_jsonl(a.path)) records.push_back(MetricRecord::from_json(j));
  if (records.empty()) throw UnavailableError("no records in '" + a.path + "'");
  json out;
  out["records"] = records.size();
  out["last_epoch"] = records.back().epoch;
  out["window"] = a.window;
  json tail = json::object();
  for (const auto& [k, v] : records.back().scalars) {
    const double m = tail_mean(records, k, a.window);
    tail[k] = std::isfinite(m) ? json(m) : json(nullptr);
  }
  out["tail_mean"] = tail;
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-RL with virtual training tasks on point-robot task families"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Meta-train and append one metric line per epoch");
  add_config_args(c_train, train.cfg, true);
  c_train->add_option("--epochs", train.epochs, "Epochs to run")->check(CLI::NonNegativeNumber);
  c_train->add_option("--run-dir", train.run_dir, "Run directory for metrics.jsonl, timing.jsonl, checkpoint/");
  c_train->add_flag("--resume", train.resume, "Continue from the run directory's checkpoint when present");
  c_train->add_option("--checkpoint-every", train.checkpoint_every, "Checkpoint period in epochs; the last epoch always saves");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Meta-test a checkpoint (or fresh parameters) and print a JSON report");
  add_config_args(c_eval, eval.cfg, false);
  c_eval->add_option("--run-dir", eval.run_dir, "Run directory with a checkpoint/");
  c_eval->add_option("--split", eval.split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  c_eval->add_option("--export-latents", eval.latents, "Also write one latent record per evaluated task");

  ExportArgs exp;
  auto* c_exp = app.add_subcommand("export-latents", "Write the on-policy latent of every task as JSON lines");
  add_config_args(c_exp, exp.cfg, false);
  c_exp->add_option("--run-dir", exp.run_dir, "Run directory with a checkpoint/");
  c_exp->add_option("--split", exp.split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  c_exp->add_option("--out", exp.out, "Output file")->required();

  AblateArgs abl;
  auto* c_abl = app.add_subcommand("ablate", "Train every variant under every seed and tabulate final metrics");
  add_config_args(c_abl, abl.cfg, true);
  c_abl->add_option("--epochs", abl.epochs, "Epochs per run")->check(CLI::NonNegativeNumber);
  c_abl->add_option("--seeds", abl.seeds, "Seeds")->delimiter(',');
  c_abl->add_option("--variants", abl.variants, "Subset of tavt,no_vt,no_gen,no_onoff,recon_only")->delimiter(',');
  c_abl->add_option("--out", abl.out, "Directory for per-run metric lines and summary.jsonl");

  SummaryArgs sum;
  auto* c_sum = app.add_subcommand("metrics-summary", "Tail means of every metric in a metrics.jsonl");
  c_sum->add_option("metrics", sum.path, "Path to metrics.jsonl")->required();
  c_sum->add_option("--window", sum.window, "Trailing records averaged")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (c_train->parsed()) return cmd_train(train);
    if (c_eval->parsed()) return cmd_eval(eval);
    if (c_exp->parsed()) return cmd_export(exp);
    if (c_abl->parsed()) return cmd_ablate(abl);
    if (c_sum->parsed()) return cmd_summary(sum);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
