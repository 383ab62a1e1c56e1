#pragma once

// Meta-training epoch (collection, model updates, RL updates), meta-testing,
// checkpoints and the ablation suite.

#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tavt/buffers.hpp"
#include "tavt/config.hpp"
#include "tavt/envs.hpp"
#include "tavt/errors.hpp"
#include "tavt/metrics.hpp"
#include "tavt/nn.hpp"
#include "tavt/representation.hpp"
#include "tavt/rl.hpp"
#include "tavt/rng.hpp"
#include "tavt/virtual_tasks.hpp"

namespace tavt {

inline constexpr int kCheckpointVersion = 1;

struct Counters {
  std::int64_t model_steps = 0;
  std::int64_t rl_steps = 0;
  std::int64_t disc_updates = 0;
  std::int64_t gen_updates = 0;
  std::int64_t explore_episodes = 0;
  std::int64_t rl_episodes = 0;
};

struct RunState {
  TrainConfig cfg;
  std::vector<TaskSpec> train_tasks;
  std::vector<TaskSpec> test_tasks;
  PointEnv env;

  Encoder encoder{nullptr};
  TaskDecoder decoder{nullptr};
  TaskDecoder idx_decoder{nullptr};
  Discriminator disc{nullptr};
  Policy policy{nullptr};
  TwinCritic critic{nullptr};
  TwinCritic target{nullptr};

  std::unique_ptr<torch::optim::Adam> opt_model;
  std::unique_ptr<torch::optim::Adam> opt_disc;
  std::unique_ptr<torch::optim::Adam> opt_policy;
  std::unique_ptr<torch::optim::Adam> opt_critic;

  std::vector<TaskBuffers> buffers;
  Rng rng;
  int epoch = 0;

  torch::Tensor z_on_bank;          // [N_train, L], latest on-policy latent per training task
  std::vector<std::uint8_t> has_z;  // whether z_on_bank row is populated
  torch::Tensor stability_prev;     // [stability_tasks, L] from the previous epoch
  std::vector<std::uint8_t> stability_valid;

  Counters counters;
  bool record_trace = false;
  std::vector<std::string> trace;

  explicit RunState(const TrainConfig& c) : cfg(c), env(c.env_settings()), rng(mix_seed(c.seed, 3)) {}

  void note(const char* event) {
    if (record_trace) trace.emplace_back(event);
  }
  SacCoefficients sac() const { return {cfg.lambda_rew, cfg.lambda_ent, cfg.gamma}; }
  /// Number of sources mixed per exploration latent; single task latents without VTs.
  int explore_m() const { return cfg.vt_enabled() ? cfg.mix_m : 1; }
};

inline std::unique_ptr<RunState> make_run(const TrainConfig& cfg) {
  cfg.validate();
  torch::set_num_threads(1);  // fixed reduction order
  auto st = std::make_unique<RunState>(cfg);
  const int S = kStateDim, A = kActionDim, L = cfg.latent_dim;
  const int D = feature_dim(S, A);

  Rng task_rng(mix_seed(cfg.seed, 1));
  st->train_tasks = sample_tasks(cfg.family, Split::Train, static_cast<std::size_t>(cfg.n_train), task_rng);
  const auto n_test = cfg.n_test > 0 ? static_cast<std::size_t>(cfg.n_test) : task_space(cfg.family).test.size();
  st->test_tasks = sample_tasks(cfg.family, Split::Test, n_test, task_rng);

  st->encoder = Encoder(D, cfg.encoder_hidden, L);
  st->decoder = TaskDecoder(S, A, L, cfg.decoder_hidden, cfg.decoder_dropout());
  st->idx_decoder = TaskDecoder(S, A, cfg.n_train, cfg.decoder_hidden);
  st->disc = Discriminator(D, L, cfg.disc_hidden);
  st->policy = Policy(S, L, A, cfg.rl_hidden);
  st->critic = TwinCritic(S, A, L, cfg.rl_hidden);
  st->target = TwinCritic(S, A, L, cfg.rl_hidden);

  Rng init_rng(mix_seed(cfg.seed, 2));
  for (torch::nn::Module* m : {static_cast<torch::nn::Module*>(st->encoder.get()),
                               static_cast<torch::nn::Module*>(st->decoder.get()),
                               static_cast<torch::nn::Module*>(st->idx_decoder.get()),
                               static_cast<torch::nn::Module*>(st->disc.get()),
                               static_cast<torch::nn::Module*>(st->policy.get()),
                               static_cast<torch::nn::Module*>(st->critic.get())})
    init_parameters(*m, init_rng);
  hard_update(*st->target, *st->critic);
  for (auto& p : st->target->parameters()) p.set_requires_grad(false);

  std::vector<torch::Tensor> model_params;
  for (auto* m : {static_cast<torch::nn::Module*>(st->encoder.get()), static_cast<torch::nn::Module*>(st->decoder.get()),
                  static_cast<torch::nn::Module*>(st->idx_decoder.get())})
    for (auto& p : m->parameters()) model_params.push_back(p);
  st->opt_model = std::make_unique<torch::optim::Adam>(model_params, torch::optim::AdamOptions(cfg.lr_context));
  st->opt_disc = std::make_unique<torch::optim::Adam>(st->disc->parameters(), torch::optim::AdamOptions(cfg.lr));
  st->opt_policy = std::make_unique<torch::optim::Adam>(st->policy->parameters(), torch::optim::AdamOptions(cfg.lr));
  st->opt_critic = std::make_unique<torch::optim::Adam>(st->critic->parameters(), torch::optim::AdamOptions(cfg.lr));

  const BufferCapacities caps{cfg.buffer_on, cfg.buffer_off};
  for (int i = 0; i < cfg.n_train; ++i) st->buffers.emplace_back(i, S, A, caps);

  st->z_on_bank = torch::zeros({cfg.n_train, L}, real_options());
  st->has_z.assign(static_cast<std::size_t>(cfg.n_train), 0);
  st->stability_prev = torch::zeros({cfg.stability_tasks, L}, real_options());
  st->stability_valid.assign(static_cast<std::size_t>(cfg.stability_tasks), 0);
  return st;
}

namespace detail {

/// One context of n rows from each fifo, stacked to [B, n, ...].
inline BatchTensors sample_stack(const std::vector<const ReplayFifo*>& fifos, std::size_t n, Rng& rng) {
  std::vector<BatchTensors> parts;
  parts.reserve(fifos.size());
  for (const auto* f : fifos) parts.push_back(to_tensors(f->sample(n, rng)));
  return stack(parts);
}

/// [B, n, ...] -> [B * n, ...]
inline BatchTensors flatten(const BatchTensors& b) {
  return {b.s.flatten(0, 1), b.a.flatten(0, 1), b.r.flatten(0, 1), b.s_next.flatten(0, 1)};
}

inline BatchTensors concat(const std::vector<BatchTensors>& parts) {
  std::vector<torch::Tensor> s, a, r, sn;
  for (const auto& p : parts) {
    s.push_back(p.s);
    a.push_back(p.a);
    r.push_back(p.r);
    sn.push_back(p.s_next);
  }
  return {torch::cat(s), torch::cat(a), torch::cat(r), torch::cat(sn)};
}

inline std::vector<const ReplayFifo*> fifos(const RunState& st, const std::vector<std::int64_t>& tasks, BufferKind k) {
  std::vector<const ReplayFifo*> out;
  for (auto t : tasks) out.push_back(&st.buffers[static_cast<std::size_t>(t)].get(k));
  return out;
}

/// Training tasks with data in both buffers.
inline std::vector<std::int64_t> ready_tasks(const RunState& st) {
  std::vector<std::int64_t> out;
  for (const auto& b : st.buffers)
    if (!b.on.empty() && !b.off.empty()) out.push_back(b.task_index);
  return out;
}

inline std::vector<std::int64_t> pick(const std::vector<std::int64_t>& pool, int n, Rng& rng) {
  const auto k = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(n));
  std::vector<std::int64_t> out;
  for (auto i : rng.choose_distinct(pool.size(), k)) out.push_back(pool[i]);
  return out;
}

/// Populated rows of the z_on bank, or an undefined tensor when none are.
inline torch::Tensor source_latents(const RunState& st) {
  std::vector<std::int64_t> rows;
  for (std::size_t i = 0; i < st.has_z.size(); ++i)
    if (st.has_z[i]) rows.push_back(static_cast<std::int64_t>(i));
  if (rows.empty()) return {};
  return st.z_on_bank.index_select(0, torch::tensor(rows, torch::kLong));
}

inline double item(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

/// Mean of a running sum, zero when nothing was accumulated.
struct Mean {
  double sum = 0.0;
  std::int64_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double value() const { return n > 0 ? sum / static_cast<double>(n) : 0.0; }
};

[[noreturn]] inline void diverge(const RunState& st, const std::string& phase, std::int64_t step, const json& terms) {
  json rec{{"event", "divergence"}, {"epoch", st.epoch}, {"phase", phase}, {"step", step},
           {"seed", st.cfg.seed},   {"config_hash", st.cfg.hash()}};
  json t = json::object();
  for (const auto& [k, v] : terms.items()) t[k] = v.is_number() && std::isfinite(v.get<double>()) ? v : json(nullptr);
  rec["terms"] = t;
  throw DivergenceError(phase + " step " + std::to_string(step), rec.dump());
}

inline bool finite(double v) { return std::isfinite(v); }

}  // namespace detail

/// Virtual contexts for a batch of VTs; each VT's donors come from its source tasks' off-policy buffers.
inline BatchTensors virtual_contexts(RunState& st, const std::vector<VirtualTask>& vts,
                                     const std::vector<std::int64_t>& batch_tasks, std::size_t n) {
  std::vector<BatchTensors> parts;
  for (const auto& vt : vts) {
    std::vector<const ReplayFifo*> sources;
    for (auto pos : vt.mix.source_tasks) sources.push_back(&st.buffers[static_cast<std::size_t>(batch_tasks[pos])].off);
    auto donor = to_tensors(sample_donors(vt.mix, sources, n, st.rng));
    parts.push_back(generate_virtual_context(st.decoder, vt.z_off, donor, st.cfg.eff_eps_reg()));
  }
  return stack(parts);
}

struct EpochStats {
  std::map<std::string, detail::Mean> means;
  void add(const std::string& k, double v) { means[k].add(v); }
};

/// Data collection for the sampled tasks: N_exp exploration episodes into D_on
/// (cleared first), then N_RL episodes of the RL policy conditioned on the
/// resulting z_on into D_off.
inline void collect(RunState& st, const std::vector<std::int64_t>& tasks, EpochStats& stats) {
  const auto& cfg = st.cfg;
  std::vector<TaskSpec> specs;
  for (auto t : tasks) {
    specs.push_back(st.train_tasks[static_cast<std::size_t>(t)]);
    st.buffers[static_cast<std::size_t>(t)].on.clear();
  }
  st.policy->eval();
  auto sources = detail::source_latents(st);
  for (int e = 0; e < cfg.n_exp; ++e) {
    auto schedule = exploration_schedule(sources, cfg.latent_dim, cfg.h_freq, cfg.beta, st.explore_m(), st.rng);
    auto trajs = rollout(st.policy, st.env, specs, schedule, ActMode::Sample, st.rng);
    for (std::size_t i = 0; i < tasks.size(); ++i)
      st.buffers[static_cast<std::size_t>(tasks[i])].on.store(trajs[i].transitions);
    st.counters.explore_episodes += static_cast<std::int64_t>(tasks.size());
    st.note("explore");
  }

  torch::Tensor z_on;
  {
    torch::NoGradGuard guard;
    auto on = detail::sample_stack(detail::fifos(st, tasks, BufferKind::On), static_cast<std::size_t>(cfg.context_size),
                                   st.rng);
    z_on = st.encoder->forward(on.features());
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    st.z_on_bank[tasks[i]].copy_(z_on[static_cast<std::int64_t>(i)]);
    st.has_z[static_cast<std::size_t>(tasks[i])] = 1;
  }

  std::vector<torch::Tensor> rows;
  for (std::size_t i = 0; i < tasks.size(); ++i) rows.push_back(z_on[static_cast<std::int64_t>(i)]);
  for (int e = 0; e < cfg.n_rl; ++e) {
    auto trajs = rollout(st.policy, st.env, specs, fixed_latents(rows), ActMode::Sample, st.rng);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      st.buffers[static_cast<std::size_t>(tasks[i])].off.store(trajs[i].transitions);
      stats.add("return/train", trajs[i].undiscounted_return);
    }
    st.counters.rl_episodes += static_cast<std::int64_t>(tasks.size());
    st.note("rl_rollout");
  }
  st.policy->train();
}

/// One encoder/decoder update, preceded by a critic update when generation is on;
/// the generator loss joins the total every disc_ratio-th step.
inline void model_step(RunState& st, std::int64_t step, EpochStats& stats) {
  const auto& cfg = st.cfg;
  const auto n_c = static_cast<std::size_t>(cfg.context_size);
  const auto ready = detail::ready_tasks(st);
  if (ready.empty()) return;
  auto tasks = detail::pick(ready, cfg.n_meta, st.rng);
  const auto B = static_cast<std::int64_t>(tasks.size());
  st.decoder->train();

  BisimInputs in;
  in.off = detail::sample_stack(detail::fifos(st, tasks, BufferKind::Off), n_c, st.rng);
  in.on = detail::sample_stack(detail::fifos(st, tasks, BufferKind::On), n_c, st.rng);
  {
    torch::NoGradGuard guard;
    std::vector<BatchTensors> avg;
    for (auto t : tasks)
      for (int k = 0; k < cfg.n_avg; ++k) avg.push_back(to_tensors(st.buffers[static_cast<std::size_t>(t)].off.sample(n_c, st.rng)));
    auto z = st.encoder->forward(stack(avg).features());  // [B * n_avg, L]
    in.z_off_target = z.view({B, cfg.n_avg, cfg.latent_dim}).mean(1);
  }
  in.task_index = tasks;
  for (auto i : st.rng.choose_distinct(static_cast<std::size_t>(B), static_cast<std::size_t>(B))) in.partner.push_back(static_cast<std::int64_t>(i));
  {
    std::vector<std::int64_t> rows;
    for (std::size_t k = 0; k < n_c; ++k) rows.push_back(static_cast<std::int64_t>(st.rng.index(static_cast<std::size_t>(B) * n_c)));
    auto sel = torch::tensor(rows, torch::kLong);
    in.pair_s = in.off.s.flatten(0, 1).index_select(0, sel);
    in.pair_a = in.off.a.flatten(0, 1).index_select(0, sel);
  }

  auto terms = loss_bisim(st.encoder, st.decoder, st.idx_decoder, in, cfg.bisim_coefficients());
  auto total = terms.total;
  json diag{{"bisim_total", detail::item(terms.total)}};

  if (cfg.gen_enabled()) {
    const bool gen_step = (step + 1) % cfg.disc_ratio == 0;
    auto vts = make_virtual_tasks(cfg.n_vt, cfg.mix_m, cfg.beta, in.z_off_target, {}, st.rng);
    CriticPairs fake;
    {
      std::optional<torch::NoGradGuard> guard;
      if (!gen_step) guard.emplace();
      fake.features = virtual_contexts(st, vts, tasks, n_c).features();
    }
    std::vector<torch::Tensor> zs;
    for (const auto& vt : vts) zs.push_back(vt.z_off);
    fake.z = torch::stack(zs);
    CriticPairs real{in.off.features(), in.z_off_target};

    auto d = loss_disc(st.disc, real, {fake.features.detach(), fake.z}, cfg.lambda_wgan, cfg.lambda_gp, st.rng);
    const double d_total = detail::item(d.total);
    diag["disc"] = d_total;
    if (!detail::finite(d_total)) detail::diverge(st, "disc", step, diag);
    st.opt_disc->zero_grad();
    d.total.backward();
    st.opt_disc->step();
    ++st.counters.disc_updates;
    stats.add("loss/disc", d_total);
    stats.add("loss/disc_wgan", cfg.lambda_wgan * detail::item(d.wgan));
    stats.add("loss/disc_gp", cfg.lambda_gp * detail::item(d.gp));
    st.note("disc");

    if (gen_step) {
      auto g = loss_gen(st.encoder, st.disc, fake, cfg.lambda_wgan, cfg.lambda_tp);
      total = total + g.total;
      ++st.counters.gen_updates;
      stats.add("loss/gen_wgan", cfg.lambda_wgan * detail::item(g.wgan));
      stats.add("loss/gen_tp", cfg.lambda_tp * detail::item(g.tp));
      diag["gen"] = detail::item(g.total);
      st.note("gen");
    }
  }

  const double t = detail::item(total);
  diag["total"] = t;
  diag["bisim"] = detail::item(terms.bisim);
  diag["recon"] = detail::item(terms.recon);
  diag["recon_idx"] = detail::item(terms.recon_idx);
  diag["onoff"] = detail::item(terms.onoff);
  if (!detail::finite(t)) detail::diverge(st, "model", step, diag);
  st.opt_model->zero_grad();
  total.backward();
  st.opt_model->step();
  ++st.counters.model_steps;
  const auto c = cfg.bisim_coefficients();
  stats.add("loss/bisim_total", detail::item(terms.total));
  stats.add("loss/bisim", c.bisim * detail::item(terms.bisim));
  stats.add("loss/recon_idx", c.recon * detail::item(terms.recon_idx));
  stats.add("loss/recon", c.recon * detail::item(terms.recon));
  stats.add("loss/onoff", c.onoff * detail::item(terms.onoff));
  stats.add("loss/anchor", c.anchor * detail::item(terms.anchor));
  st.note("model");
}

/// One SAC update on real transitions of the sampled tasks plus, when VTs are on,
/// lambda_vt-weighted virtual transitions.
inline void rl_step(RunState& st, std::int64_t step, EpochStats& stats) {
  const auto& cfg = st.cfg;
  const auto ready = detail::ready_tasks(st);
  if (ready.empty()) return;
  auto tasks = detail::pick(ready, cfg.n_meta, st.rng);
  const auto n = static_cast<std::size_t>(cfg.rl_batch);
  const auto n_c = static_cast<std::size_t>(cfg.context_size);
  st.decoder->eval();

  RlBatch real;
  torch::Tensor z_on;
  std::optional<RlBatch> virt;
  {
    torch::NoGradGuard guard;
    auto data = detail::sample_stack(detail::fifos(st, tasks, BufferKind::Off), n, st.rng);
    auto on = detail::sample_stack(detail::fifos(st, tasks, BufferKind::On), n_c, st.rng);
    z_on = st.encoder->forward(on.features());
    real.data = detail::flatten(data);
    real.z = z_on.repeat_interleave(static_cast<std::int64_t>(n), 0);

    if (cfg.vt_enabled() && cfg.eff_lambda_vt() > 0.0) {
      auto off = detail::sample_stack(detail::fifos(st, tasks, BufferKind::Off), n_c, st.rng);
      auto z_off = st.encoder->forward(off.features());
      auto vts = make_virtual_tasks(cfg.n_vt, cfg.mix_m, cfg.beta, z_off, z_on, st.rng);
      RlBatch v;
      v.data = detail::flatten(virtual_contexts(st, vts, tasks, n));
      std::vector<torch::Tensor> zs;
      for (const auto& vt : vts) zs.push_back(vt.z_on.unsqueeze(0).expand({static_cast<std::int64_t>(n), cfg.latent_dim}));
      v.z = torch::cat(zs);
      virt = v;
    }
  }
  const auto rows = real.data.size();
  real.next_noise = st.rng.normal_tensor({rows, kActionDim});
  real.actor_noise = st.rng.normal_tensor({rows, kActionDim});
  if (virt) {
    const auto vrows = virt->data.size();
    virt->next_noise = st.rng.normal_tensor({vrows, kActionDim});
    virt->actor_noise = st.rng.normal_tensor({vrows, kActionDim});
  }

  auto losses = loss_rl_total(st.critic, st.target, st.policy, real, virt ? &*virt : nullptr, cfg.eff_lambda_vt(),
                              st.sac());
  const double lc = detail::item(losses.critic);
  const double la = detail::item(losses.actor);
  if (!detail::finite(lc) || !detail::finite(la))
    detail::diverge(st, "rl", step, {{"critic", lc}, {"actor", la}, {"critic_virtual", detail::item(losses.critic_virtual)}});
  st.opt_critic->zero_grad();
  st.opt_policy->zero_grad();
  (losses.critic + losses.actor).backward();
  st.opt_critic->step();
  st.opt_policy->step();
  soft_update(*st.target, *st.critic, cfg.tau);
  ++st.counters.rl_steps;
  stats.add("loss/critic", lc);
  stats.add("loss/actor", la);
  stats.add("loss/critic_virtual", cfg.eff_lambda_vt() * detail::item(losses.critic_virtual));
  st.note("rl");
}

struct TestResult {
  std::vector<double> returns;          // per task, evaluation episode
  double mean_return = 0.0;
  std::vector<torch::Tensor> z_on;      // per task, inferred from exploration
  std::vector<BatchTensors> explore;    // per task, exploration transitions
  std::vector<BatchTensors> evaluation; // per task, evaluation-episode transitions
};

inline BatchTensors to_tensors(const std::vector<Transition>& ts) {
  TransitionBatch b(kStateDim, kActionDim);
  for (const auto& t : ts) b.push_back(t);
  return to_tensors(b);
}

/// N_exp exploration episodes per task, inference of z_on from everything they
/// collected, then one mean-action evaluation episode conditioned on z_on.
inline TestResult meta_test(RunState& st, const std::vector<TaskSpec>& tasks, Rng& rng) {
  if (tasks.empty()) throw ConfigError("empty test task set");
  const auto& cfg = st.cfg;
  torch::NoGradGuard guard;
  st.policy->eval();
  TestResult out;
  const auto n = tasks.size();
  std::vector<std::vector<Transition>> explored(n);
  auto sources = detail::source_latents(st);
  for (int e = 0; e < cfg.n_exp; ++e) {
    auto schedule = exploration_schedule(sources, cfg.latent_dim, cfg.h_freq, cfg.beta, st.explore_m(), rng);
    auto trajs = rollout(st.policy, st.env, tasks, schedule, ActMode::Sample, rng);
    for (std::size_t i = 0; i < n; ++i)
      explored[i].insert(explored[i].end(), trajs[i].transitions.begin(), trajs[i].transitions.end());
    st.note("test_explore");
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.explore.push_back(to_tensors(explored[i]));
    out.z_on.push_back(st.encoder->forward(out.explore.back().features()));
  }
  auto trajs = rollout(st.policy, st.env, tasks, fixed_latents(out.z_on), ActMode::Mean, rng);
  st.note("test_eval");
  for (std::size_t i = 0; i < n; ++i) {
    out.returns.push_back(trajs[i].undiscounted_return);
    out.evaluation.push_back(to_tensors(trajs[i].transitions));
  }
  out.mean_return = std::accumulate(out.returns.begin(), out.returns.end(), 0.0) / static_cast<double>(n);
  st.policy->train();
  return out;
}

/// Evaluation stream for an epoch, independent of the training stream.
inline Rng eval_rng(const TrainConfig& cfg, int epoch) { return Rng(mix_seed(mix_seed(cfg.seed, 1'000'003), epoch)); }

/// Mean ||encode(c_hat) - z_alpha||_2 over freshly generated virtual contexts.
inline double task_preserving_gap(RunState& st, Rng& rng) {
  const auto& cfg = st.cfg;
  const auto ready = detail::ready_tasks(st);
  if (ready.empty()) return std::nan("");
  torch::NoGradGuard guard;
  st.decoder->eval();
  auto tasks = detail::pick(ready, cfg.n_meta, rng);
  const auto n_c = static_cast<std::size_t>(cfg.context_size);
  auto off = detail::sample_stack(detail::fifos(st, tasks, BufferKind::Off), n_c, rng);
  auto z_off = st.encoder->forward(off.features());
  auto vts = make_virtual_tasks(cfg.n_vt > 0 ? cfg.n_vt : 1, cfg.mix_m, cfg.beta, z_off, {}, rng);
  std::vector<BatchTensors> parts;
  std::vector<torch::Tensor> zs;
  for (const auto& vt : vts) {
    std::vector<const ReplayFifo*> sources;
    for (auto pos : vt.mix.source_tasks) sources.push_back(&st.buffers[static_cast<std::size_t>(tasks[pos])].off);
    auto donor = to_tensors(sample_donors(vt.mix, sources, n_c, rng));
    parts.push_back(generate_virtual_context(st.decoder, vt.z_off, donor, cfg.eff_eps_reg()));
    zs.push_back(vt.z_off);
  }
  auto z_hat = st.encoder->forward(stack(parts).features());
  st.decoder->train();
  return (z_hat - torch::stack(zs)).pow(2).sum(-1).sqrt().mean().item<double>();
}

/// Mean epoch-to-epoch ||z_on|| displacement over the fixed stability tasks; NaN
/// until two consecutive measurements exist for at least one of them.
inline double z_on_displacement(RunState& st) {
  const auto& cfg = st.cfg;
  torch::NoGradGuard guard;
  Rng rng(mix_seed(cfg.seed, 0x5ab1e));
  double total = 0.0;
  int count = 0;
  for (int k = 0; k < cfg.stability_tasks; ++k) {
    const auto& buf = st.buffers[static_cast<std::size_t>(k)].on;
    if (buf.empty()) continue;
    auto c = to_tensors(buf.sample(static_cast<std::size_t>(cfg.context_size), rng));
    auto z = st.encoder->forward(c.features());
    if (st.stability_valid[static_cast<std::size_t>(k)]) {
      total += (z - st.stability_prev[k]).pow(2).sum().sqrt().item<double>();
      ++count;
    }
    st.stability_prev[k].copy_(z);
    st.stability_valid[static_cast<std::size_t>(k)] = 1;
  }
  return count > 0 ? total / count : std::nan("");
}

/// Re-encodes the on-policy latent of every training task that has on-policy data
/// with the current encoder; exploration and evaluation mix these.
inline void refresh_latents(RunState& st) {
  torch::NoGradGuard guard;
  std::vector<std::int64_t> tasks;
  for (const auto& b : st.buffers)
    if (!b.on.empty()) tasks.push_back(b.task_index);
  if (tasks.empty()) return;
  auto on = detail::sample_stack(detail::fifos(st, tasks, BufferKind::On), static_cast<std::size_t>(st.cfg.context_size),
                                 st.rng);
  auto z = st.encoder->forward(on.features());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    st.z_on_bank[tasks[i]].copy_(z[static_cast<std::int64_t>(i)]);
    st.has_z[static_cast<std::size_t>(tasks[i])] = 1;
  }
}

struct EpochResult {
  MetricRecord record;
  double seconds = 0.0;
  TestResult test;
};

/// Loss keys of a metric record. Each is the mean over the epoch's steps of the
/// coefficient-weighted contribution to its objective; zero when never evaluated.
inline const std::vector<std::string>& metric_keys() {
  static const std::vector<std::string> keys = {
      "loss/bisim_total", "loss/bisim", "loss/recon_idx", "loss/recon", "loss/onoff", "loss/anchor",
      "loss/disc", "loss/disc_wgan", "loss/disc_gp", "loss/gen_wgan", "loss/gen_tp",
      "loss/critic", "loss/critic_virtual", "loss/actor", "return/train"};
  return keys;
}

/// Evaluation block of a metric record: OOD return, context difference, Q bias.
inline void evaluate_into(RunState& st, MetricRecord& rec, TestResult& test) {
  auto rng = eval_rng(st.cfg, st.epoch);
  test = meta_test(st, st.test_tasks, rng);
  st.decoder->eval();
  auto cd = context_difference(st.decoder, st.encoder, test.evaluation);
  st.decoder->train();
  const bool trivial = st.cfg.eff_eps_reg() == 0.0;
  rec.scalars["return/ood"] = test.mean_return;
  rec.scalars["ctx_diff/reward"] = cd.reward;
  rec.scalars["ctx_diff/state"] = cd.state;
  rec.scalars["ctx_diff/state_trivial"] = trivial ? 1.0 : 0.0;
  rec.scalars["q_bias/ood"] = q_estimation_bias(st.critic, st.policy, st.env, st.test_tasks, test.z_on,
                                                st.cfg.bias_episodes, st.sac(), rng);
  rec.scalars["tp_gap"] = task_preserving_gap(st, rng);
}

/// One epoch in order: collection, K_model model steps, K_RL RL steps, diagnostics.
inline EpochResult meta_train_epoch(RunState& st) {
  const auto start = std::chrono::steady_clock::now();
  const auto& cfg = st.cfg;
  torch::manual_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(st.epoch) + 17));
  EpochStats stats;

  std::vector<std::int64_t> all(static_cast<std::size_t>(cfg.n_train));
  std::iota(all.begin(), all.end(), 0);
  auto tasks = detail::pick(all, cfg.n_meta, st.rng);
  std::sort(tasks.begin(), tasks.end());
  collect(st, tasks, stats);

  const auto disc_before = st.counters.disc_updates;
  const auto gen_before = st.counters.gen_updates;
  for (int k = 0; k < cfg.k_model; ++k) model_step(st, k, stats);
  for (int k = 0; k < cfg.k_rl; ++k) rl_step(st, k, stats);
  refresh_latents(st);

  EpochResult out;
  auto& rec = out.record;
  rec.epoch = st.epoch;
  rec.seed = cfg.seed;
  rec.config_hash = cfg.hash();
  for (const auto& k : metric_keys()) rec.scalars[k] = stats.means[k].value();
  rec.scalars["count/disc_updates"] = static_cast<double>(st.counters.disc_updates - disc_before);
  rec.scalars["count/gen_updates"] = static_cast<double>(st.counters.gen_updates - gen_before);
  std::size_t n_on = 0, n_off = 0;
  for (const auto& b : st.buffers) {
    n_on += b.on.size();
    n_off += b.off.size();
  }
  rec.scalars["count/transitions_on"] = static_cast<double>(n_on);
  rec.scalars["count/transitions_off"] = static_cast<double>(n_off);
  rec.scalars["z_on_displacement"] = z_on_displacement(st);
  {
    auto bank = detail::source_latents(st);
    rec.scalars["z_on_norm"] = bank.defined() ? bank.norm(2, {1}).mean().item<double>() : std::nan("");
  }

  if ((st.epoch + 1) % cfg.eval_every == 0) {
    evaluate_into(st, rec, out.test);
  } else {
    for (const char* k : {"return/ood", "ctx_diff/reward", "ctx_diff/state", "ctx_diff/state_trivial", "q_bias/ood", "tp_gap"})
      rec.scalars[k] = std::nan("");
  }
  ++st.epoch;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---------------------------------------------------------------- checkpoints
//
// <dir>/meta.json           version, config text, config hash, epoch, rng state,
//                           z_on bank, stability latents, counters
// <dir>/<module>.pt         torch archives of every network
// <dir>/<optimizer>.pt      torch archives of every optimizer state
// <dir>/buffer_<i>_<on|off>.bin   replay buffers (see buffers.hpp for the layout)

namespace detail {

inline json tensor_json(const torch::Tensor& t) { return to_vector(t); }

inline void tensor_from_json(torch::Tensor& dst, const json& j) {
  auto v = j.get<std::vector<double>>();
  if (static_cast<std::int64_t>(v.size()) != dst.numel()) throw InputError("checkpoint tensor size mismatch");
  dst.copy_(torch::from_blob(v.data(), dst.sizes(), real_options()));
}

template <class M>
void save_module(const M& m, const std::filesystem::path& p) {
  torch::save(m, p.string());
}

template <class M>
void load_module(M& m, const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw UnavailableError("missing checkpoint file " + p.string());
  torch::load(m, p.string());
}

}  // namespace detail

inline void save_checkpoint(const RunState& st, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path d(dir);
  detail::save_module(st.encoder, d / "encoder.pt");
  detail::save_module(st.decoder, d / "decoder.pt");
  detail::save_module(st.idx_decoder, d / "idx_decoder.pt");
  detail::save_module(st.disc, d / "disc.pt");
  detail::save_module(st.policy, d / "policy.pt");
  detail::save_module(st.critic, d / "critic.pt");
  detail::save_module(st.target, d / "target.pt");
  torch::save(*st.opt_model, (d / "opt_model.pt").string());
  torch::save(*st.opt_disc, (d / "opt_disc.pt").string());
  torch::save(*st.opt_policy, (d / "opt_policy.pt").string());
  torch::save(*st.opt_critic, (d / "opt_critic.pt").string());
  for (const auto& b : st.buffers) {
    save_buffer((d / ("buffer_" + std::to_string(b.task_index) + "_on.bin")).string(), b.on);
    save_buffer((d / ("buffer_" + std::to_string(b.task_index) + "_off.bin")).string(), b.off);
  }
  json meta{{"version", kCheckpointVersion},
            {"config", st.cfg.serialize()},
            {"config_hash", st.cfg.hash()},
            {"seed", st.cfg.seed},
            {"epoch", st.epoch},
            {"rng", st.rng.serialize()},
            {"z_on_bank", detail::tensor_json(st.z_on_bank)},
            {"has_z", st.has_z},
            {"stability_prev", detail::tensor_json(st.stability_prev)},
            {"stability_valid", st.stability_valid},
            {"counters",
             {{"model_steps", st.counters.model_steps},
              {"rl_steps", st.counters.rl_steps},
              {"disc_updates", st.counters.disc_updates},
              {"gen_updates", st.counters.gen_updates},
              {"explore_episodes", st.counters.explore_episodes},
              {"rl_episodes", st.counters.rl_episodes}}}};
  std::ofstream out(d / "meta.json", std::ios::trunc);
  if (!out) throw UnavailableError("cannot write checkpoint metadata in " + dir);
  out << meta.dump(2) << '\n';
}

inline std::unique_ptr<RunState> load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path d(dir);
  std::ifstream in(d / "meta.json");
  if (!in) throw UnavailableError("no checkpoint in " + dir);
  const auto meta = json::parse(in);
  if (meta.at("version").get<int>() != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
  TrainConfig cfg;
  apply_config_text(cfg, meta.at("config").get<std::string>());
  if (cfg.hash() != meta.at("config_hash").get<std::string>()) throw ConfigError("checkpoint config hash mismatch");
  auto st = make_run(cfg);
  detail::load_module(st->encoder, d / "encoder.pt");
  detail::load_module(st->decoder, d / "decoder.pt");
  detail::load_module(st->idx_decoder, d / "idx_decoder.pt");
  detail::load_module(st->disc, d / "disc.pt");
  detail::load_module(st->policy, d / "policy.pt");
  detail::load_module(st->critic, d / "critic.pt");
  detail::load_module(st->target, d / "target.pt");
  torch::load(*st->opt_model, (d / "opt_model.pt").string());
  torch::load(*st->opt_disc, (d / "opt_disc.pt").string());
  torch::load(*st->opt_policy, (d / "opt_policy.pt").string());
  torch::load(*st->opt_critic, (d / "opt_critic.pt").string());
  for (auto& b : st->buffers) {
    load_buffer((d / ("buffer_" + std::to_string(b.task_index) + "_on.bin")).string(), b.on);
    load_buffer((d / ("buffer_" + std::to_string(b.task_index) + "_off.bin")).string(), b.off);
  }
  st->epoch = meta.at("epoch").get<int>();
  st->rng.deserialize(meta.at("rng").get<std::string>());
  torch::NoGradGuard guard;
  detail::tensor_from_json(st->z_on_bank, meta.at("z_on_bank"));
  st->has_z = meta.at("has_z").get<std::vector<std::uint8_t>>();
  detail::tensor_from_json(st->stability_prev, meta.at("stability_prev"));
  st->stability_valid = meta.at("stability_valid").get<std::vector<std::uint8_t>>();
  const auto& c = meta.at("counters");
  auto count = [&](const char* k) { return c.at(k).get<std::int64_t>(); };
  st->counters = {count("model_steps"), count("rl_steps"), count("disc_updates"),
                  count("gen_updates"), count("explore_episodes"), count("rl_episodes")};
  for (auto& p : st->target->parameters()) p.set_requires_grad(false);
  return st;
}

// ---------------------------------------------------------------- runs

struct RunSummary {
  std::vector<MetricRecord> records;
  double final_ood_return = std::nan("");
  double final_ctx_reward = std::nan("");
  double final_ctx_state = std::nan("");
  double final_q_bias = std::nan("");
  double initial_ood_return = std::nan("");
};

/// Mean of `key` over the last `window` records where it is finite.
inline double tail_mean(const std::vector<MetricRecord>& records, const std::string& key, int window) {
  double total = 0.0;
  int n = 0;
  for (auto it = records.rbegin(); it != records.rend() && n < window; ++it) {
    auto f = it->scalars.find(key);
    if (f == it->scalars.end() || !std::isfinite(f->second)) continue;
    total += f->second;
    ++n;
  }
  return n > 0 ? total / n : std::nan("");
}

using EpochCallback = std::function<void(const RunState&, const EpochResult&)>;

/// Trains for `epochs` epochs from a fresh state. The initial policy is
/// evaluated first so that a zero-epoch run still reports a return.
inline RunSummary train_run(const TrainConfig& cfg, int epochs, const EpochCallback& on_epoch = {}) {
  auto st = make_run(cfg);
  RunSummary out;
  {
    auto rng = eval_rng(cfg, -1);
    out.initial_ood_return = meta_test(*st, st->test_tasks, rng).mean_return;
  }
  for (int e = 0; e < epochs; ++e) {
    auto res = meta_train_epoch(*st);
    if (on_epoch) on_epoch(*st, res);
    out.records.push_back(res.record);
  }
  const int w = cfg.final_window;
  out.final_ood_return = epochs > 0 ? tail_mean(out.records, "return/ood", w) : out.initial_ood_return;
  out.final_ctx_reward = tail_mean(out.records, "ctx_diff/reward", w);
  out.final_ctx_state = tail_mean(out.records, "ctx_diff/state", w);
  out.final_q_bias = tail_mean(out.records, "q_bias/ood", w);
  return out;
}

enum class Variant { Full, NoVt, NoGen, NoOnOff, ReconOnly };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "tavt";
    case Variant::NoVt: return "no_vt";
    case Variant::NoGen: return "no_gen";
    case Variant::NoOnOff: return "no_onoff";
    case Variant::ReconOnly: return "recon_only";
  }
  return "?";
}

inline TrainConfig with_variant(TrainConfig cfg, Variant v) {
  cfg.no_vt = v == Variant::NoVt;
  cfg.no_gen = v == Variant::NoGen;
  cfg.no_onoff = v == Variant::NoOnOff;
  cfg.recon_only = v == Variant::ReconOnly;
  return cfg;
}

struct AblationRow {
  Variant variant;
  std::uint64_t seed;
  RunSummary summary;
};

inline std::vector<Variant> all_variants() {
  return {Variant::Full, Variant::NoVt, Variant::NoGen, Variant::NoOnOff, Variant::ReconOnly};
}

/// Trains every variant under every seed with otherwise identical configs.
inline std::vector<AblationRow> run_ablation_suite(const TrainConfig& base, int epochs,
                                                   const std::vector<std::uint64_t>& seeds,
                                                   const std::vector<Variant>& variants = all_variants()) {
  std::vector<AblationRow> rows;
  for (auto v : variants) {
    for (auto seed : seeds) {
      auto cfg = with_variant(base, v);
      cfg.seed = seed;
      rows.push_back({v, seed, train_run(cfg, epochs)});
    }
  }
  return rows;
}

}  // namespace tavt
