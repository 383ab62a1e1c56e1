#pragma once

// Run configuration: every hyperparameter as a flat key/value table.
//
// File format: one `key = value` per line; `#` starts a comment; blank lines are
// ignored. Lists are comma-separated (`encoder_hidden = 64,64`). Booleans accept
// true/false/1/0. Unknown keys are rejected.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tavt/envs.hpp"
#include "tavt/errors.hpp"
#include "tavt/representation.hpp"

namespace tavt {

struct TrainConfig {
  // environment
  TaskFamily family = TaskFamily::PointGoal;
  int horizon = 64;
  double init_noise = 0.0;
  double accel = 0.2;
  double damping = 0.5;
  double ctrl_cost = 0.8;
  int n_test = 0;  // 0: the family's whole fixed OOD set

  // task batching and data collection
  int n_train = 16;
  int n_meta = 8;
  int n_vt = 5;
  int mix_m = 3;
  int n_exp = 2;
  int n_rl = 3;
  int h_freq = 20;

  // update schedule
  int k_model = 100;
  int k_rl = 200;
  int disc_ratio = 5;  // discriminator updates per generator update

  // sizes
  int latent_dim = 10;
  int context_size = 128;
  int rl_batch = 128;  // per task
  int n_avg = 4;
  std::vector<int> encoder_hidden{64, 64};
  std::vector<int> decoder_hidden{64, 64};
  std::vector<int> disc_hidden{64, 64};
  std::vector<int> rl_hidden{64, 64};
  std::size_t buffer_on = 10'000;
  std::size_t buffer_off = 100'000;

  // loss coefficients
  double lambda_bisim = 100.0;
  double lambda_recon = 200.0;
  double lambda_onoff = 100.0;
  double lambda_wgan = 1.0;
  double lambda_tp = 100.0;
  double lambda_vt = 1.0;
  double lambda_gp = 5.0;
  double lambda_rew = 1.0;
  double lambda_ent = 0.5;
  double lambda_anchor = 1.0;

  double lr = 3e-4;
  double lr_context = 3e-4;
  double beta = 2.0;
  double eta = 0.1;
  double eps_reg = 0.1;
  double gamma = 0.99;
  double tau = 0.005;
  LatentNorm latent_norm = LatentNorm::L1;
  double recon_only_dropout = 0.1;

  // ablation switches
  bool no_vt = false;
  bool no_gen = false;
  bool no_onoff = false;
  bool recon_only = false;

  // bookkeeping
  std::uint64_t seed = 0;
  int eval_every = 1;
  int bias_episodes = 1;
  int stability_tasks = 4;
  int final_window = 5;  // evaluations averaged into a run's final OOD return

  // Effective values after ablation switches.
  bool vt_enabled() const { return !no_vt; }
  bool gen_enabled() const { return vt_enabled() && !no_gen && !recon_only; }
  double eff_lambda_bisim() const { return recon_only ? 0.0 : lambda_bisim; }
  double eff_lambda_onoff() const { return (no_onoff || recon_only) ? 0.0 : lambda_onoff; }
  double eff_lambda_vt() const { return vt_enabled() ? lambda_vt : 0.0; }
  /// Next-state regularization only applies where the dynamics vary with the task.
  double eff_eps_reg() const { return dynamics_vary(family) ? eps_reg : 0.0; }
  double decoder_dropout() const { return recon_only ? recon_only_dropout : 0.0; }

  EnvSettings env_settings() const { return {horizon, init_noise, accel, damping, ctrl_cost}; }
  BisimCoefficients bisim_coefficients() const {
    return {eff_lambda_bisim(), lambda_recon, eff_lambda_onoff(), eta, latent_norm, lambda_anchor};
  }

  void validate() const;
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  /// Canonical `key=value` lines in key order.
  std::string serialize() const;
  /// FNV-1a 64 of serialize(), as 16 hex digits; excludes the seed.
  std::string hash() const;
  static std::vector<std::string> keys();
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "' expects a boolean, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_int(key, trim(item))));
  if (out.empty()) throw ConfigError("'" + key + "' expects a non-empty list");
  return out;
}

inline std::string format_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

inline std::string format_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <class T>
Field int_field(T TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string& v) { c.*m = static_cast<T>(parse_int("value", v)); },
          [m](const TrainConfig& c) { return std::to_string(c.*m); }};
}

inline Field double_field(double TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string& v) { c.*m = parse_double("value", v); },
          [m](const TrainConfig& c) { return format_double(c.*m); }};
}

inline Field bool_field(bool TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string& v) { c.*m = parse_bool("value", v); },
          [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); }};
}

inline Field list_field(std::vector<int> TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string& v) { c.*m = parse_int_list("value", v); },
          [m](const TrainConfig& c) { return format_list(c.*m); }};
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"family",
       {[](TrainConfig& c, const std::string& v) { c.family = parse_family(v); },
        [](const TrainConfig& c) { return std::string(to_string(c.family)); }}},
      {"horizon", int_field(&TrainConfig::horizon)},
      {"init_noise", double_field(&TrainConfig::init_noise)},
      {"accel", double_field(&TrainConfig::accel)},
      {"damping", double_field(&TrainConfig::damping)},
      {"ctrl_cost", double_field(&TrainConfig::ctrl_cost)},
      {"n_test", int_field(&TrainConfig::n_test)},
      {"n_train", int_field(&TrainConfig::n_train)},
      {"n_meta", int_field(&TrainConfig::n_meta)},
      {"n_vt", int_field(&TrainConfig::n_vt)},
      {"mix_m", int_field(&TrainConfig::mix_m)},
      {"n_exp", int_field(&TrainConfig::n_exp)},
      {"n_rl", int_field(&TrainConfig::n_rl)},
      {"h_freq", int_field(&TrainConfig::h_freq)},
      {"k_model", int_field(&TrainConfig::k_model)},
      {"k_rl", int_field(&TrainConfig::k_rl)},
      {"disc_ratio", int_field(&TrainConfig::disc_ratio)},
      {"latent_dim", int_field(&TrainConfig::latent_dim)},
      {"context_size", int_field(&TrainConfig::context_size)},
      {"rl_batch", int_field(&TrainConfig::rl_batch)},
      {"n_avg", int_field(&TrainConfig::n_avg)},
      {"encoder_hidden", list_field(&TrainConfig::encoder_hidden)},
      {"decoder_hidden", list_field(&TrainConfig::decoder_hidden)},
      {"disc_hidden", list_field(&TrainConfig::disc_hidden)},
      {"rl_hidden", list_field(&TrainConfig::rl_hidden)},
      {"buffer_on", int_field(&TrainConfig::buffer_on)},
      {"buffer_off", int_field(&TrainConfig::buffer_off)},
      {"lambda_bisim", double_field(&TrainConfig::lambda_bisim)},
      {"lambda_recon", double_field(&TrainConfig::lambda_recon)},
      {"lambda_onoff", double_field(&TrainConfig::lambda_onoff)},
      {"lambda_wgan", double_field(&TrainConfig::lambda_wgan)},
      {"lambda_tp", double_field(&TrainConfig::lambda_tp)},
      {"lambda_vt", double_field(&TrainConfig::lambda_vt)},
      {"lambda_gp", double_field(&TrainConfig::lambda_gp)},
      {"lambda_rew", double_field(&TrainConfig::lambda_rew)},
      {"lambda_ent", double_field(&TrainConfig::lambda_ent)},
      {"lambda_anchor", double_field(&TrainConfig::lambda_anchor)},
      {"lr", double_field(&TrainConfig::lr)},
      {"lr_context", double_field(&TrainConfig::lr_context)},
      {"beta", double_field(&TrainConfig::beta)},
      {"eta", double_field(&TrainConfig::eta)},
      {"eps_reg", double_field(&TrainConfig::eps_reg)},
      {"gamma", double_field(&TrainConfig::gamma)},
      {"tau", double_field(&TrainConfig::tau)},
      {"latent_norm",
       {[](TrainConfig& c, const std::string& v) {
          if (v == "l1")
            c.latent_norm = LatentNorm::L1;
          else if (v == "l2")
            c.latent_norm = LatentNorm::L2;
          else
            throw ConfigError("latent_norm must be l1 or l2");
        },
        [](const TrainConfig& c) { return std::string(c.latent_norm == LatentNorm::L1 ? "l1" : "l2"); }}},
      {"recon_only_dropout", double_field(&TrainConfig::recon_only_dropout)},
      {"no_vt", bool_field(&TrainConfig::no_vt)},
      {"no_gen", bool_field(&TrainConfig::no_gen)},
      {"no_onoff", bool_field(&TrainConfig::no_onoff)},
      {"recon_only", bool_field(&TrainConfig::recon_only)},
      {"seed", int_field(&TrainConfig::seed)},
      {"eval_every", int_field(&TrainConfig::eval_every)},
      {"bias_episodes", int_field(&TrainConfig::bias_episodes)},
      {"stability_tasks", int_field(&TrainConfig::stability_tasks)},
      {"final_window", int_field(&TrainConfig::final_window)},
  };
  return table;
}

}  // namespace detail

inline void TrainConfig::set(const std::string& key, const std::string& value) {
  const auto& table = detail::fields();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown key '" + key + "'");
  try {
    it->second.set(*this, detail::trim(value));
  } catch (const ConfigError& e) {
    throw ConfigError("'" + key + "': " + e.what());
  }
}

inline std::string TrainConfig::get(const std::string& key) const {
  const auto& table = detail::fields();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second.get(*this);
}

inline std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::fields()) out.push_back(k);
  return out;
}

inline std::string TrainConfig::serialize() const {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + "=" + f.get(*this) + "\n";
  return out;
}

inline std::string TrainConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, f] : detail::fields()) {
    if (k == "seed") continue;
    for (char ch : k + "=" + f.get(*this) + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

inline void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  for (double v : {lambda_bisim, lambda_recon, lambda_onoff, lambda_wgan, lambda_tp, lambda_gp, lambda_rew, lambda_ent,
                   lambda_anchor})
    require(v >= 0.0, "loss coefficients must be non-negative");
  require(lambda_rew > 0.0, "lambda_rew must be positive");
  require(lambda_vt >= 0.0 && lambda_vt <= 1.0, "lambda_vt must lie in [0, 1]");
  require(beta >= 1.0, "beta must be >= 1");
  require(eps_reg >= 0.0 && eps_reg <= 1.0, "eps_reg must lie in [0, 1]");
  require(eta > 0.0, "eta must be positive");
  require(gamma >= 0.0 && gamma < 1.0, "gamma must lie in [0, 1)");
  require(tau >= 0.0 && tau <= 1.0, "tau must lie in [0, 1]");
  require(lr > 0.0 && lr_context > 0.0, "learning rates must be positive");
  require(horizon >= 1, "horizon must be >= 1");
  require(n_train >= 1, "n_train must be >= 1");
  require(n_meta >= 1 && n_meta <= n_train, "n_meta must lie in [1, n_train]");
  require(n_vt >= 0 && mix_m >= 1, "n_vt >= 0 and mix_m >= 1 required");
  require(n_exp >= 1 && n_rl >= 1, "n_exp and n_rl must be >= 1");
  require(h_freq >= 1, "h_freq must be >= 1");
  require(k_model >= 0 && k_rl >= 0, "update counts must be non-negative");
  require(disc_ratio >= 1, "disc_ratio must be >= 1");
  require(latent_dim >= 1 && context_size >= 1 && rl_batch >= 1 && n_avg >= 1, "sizes must be positive");
  require(buffer_on >= 1 && buffer_off >= 1, "buffer capacities must be positive");
  require(eval_every >= 1 && bias_episodes >= 1, "eval_every and bias_episodes must be >= 1");
  require(stability_tasks >= 1 && stability_tasks <= n_train, "stability_tasks must lie in [1, n_train]");
  require(final_window >= 1, "final_window must be >= 1");
  require(n_test >= 0, "n_test must be >= 0");
  require(recon_only_dropout >= 0.0 && recon_only_dropout < 1.0, "recon_only_dropout must lie in [0, 1)");
}

/// Applies `key = value` lines to `cfg`.
inline void apply_config_text(TrainConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    try {
      cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig cfg;
  apply_config_text(cfg, ss.str());
  cfg.validate();
  return cfg;
}

}  // namespace tavt
