#pragma once

// Latent-conditioned soft actor-critic: squashed-Gaussian policy, twin critics,
// the real + virtual weighted losses, rollouts and the exploration policy that
// resamples a virtual-task latent every H_freq steps.

#include <torch/torch.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "tavt/buffers.hpp"
#include "tavt/envs.hpp"
#include "tavt/nn.hpp"
#include "tavt/rng.hpp"
#include "tavt/virtual_tasks.hpp"

namespace tavt {

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

inline torch::Tensor broadcast_latent(const torch::Tensor& z, const torch::Tensor& like) {
  if (z.dim() == like.dim()) return z;
  std::vector<std::int64_t> shape(like.sizes().begin(), like.sizes().end() - 1);
  shape.push_back(z.size(-1));
  return z.expand(shape);
}

struct PolicySample {
  torch::Tensor action;    // [N, A], in (-1, 1)
  torch::Tensor log_prob;  // [N]
};

/// Log-density correction for a = tanh(u): log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)).
inline torch::Tensor tanh_log_det(const torch::Tensor& u) {
  return 2.0 * (std::numbers::ln2 - u - torch::nn::functional::softplus(-2.0 * u));
}

inline torch::Tensor gaussian_log_prob(const torch::Tensor& u, const torch::Tensor& mean,
                                       const torch::Tensor& log_std) {
  auto zscore = (u - mean) / log_std.exp();
  return -0.5 * zscore.pow(2) - log_std - 0.5 * std::log(2.0 * std::numbers::pi);
}

struct PolicyImpl : torch::nn::Module {
  PolicyImpl(int state_dim, int latent_dim, int action_dim, const std::vector<int>& hidden)
      : action_dim(action_dim) {
    net = register_module("net", Mlp(state_dim + latent_dim, hidden, 2 * action_dim));
  }

  /// Returns (mean, log_std) of the pre-squash Gaussian.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& s, const torch::Tensor& z) {
    auto out = net->forward(torch::cat({s, broadcast_latent(z, s)}, -1));
    auto mean = out.narrow(-1, 0, action_dim);
    auto log_std = out.narrow(-1, action_dim, action_dim).clamp(kLogStdMin, kLogStdMax);
    return {mean, log_std};
  }

  /// Reparameterized sample a = tanh(mean + std * noise).
  PolicySample sample(const torch::Tensor& s, const torch::Tensor& z, const torch::Tensor& noise) {
    auto [mean, log_std] = forward(s, z);
    auto u = mean + log_std.exp() * noise;
    auto logp = (gaussian_log_prob(u, mean, log_std) - tanh_log_det(u)).sum(-1);
    return {torch::tanh(u), logp};
  }

  torch::Tensor mean_action(const torch::Tensor& s, const torch::Tensor& z) { return torch::tanh(forward(s, z).first); }

  /// log pi(a | s, z) of a given squashed action.
  torch::Tensor log_prob(const torch::Tensor& s, const torch::Tensor& z, const torch::Tensor& action) {
    auto [mean, log_std] = forward(s, z);
    auto u = torch::atanh(action);
    return (gaussian_log_prob(u, mean, log_std) - tanh_log_det(u)).sum(-1);
  }

  int action_dim;
  Mlp net{nullptr};
};
TORCH_MODULE(Policy);

struct TwinCriticImpl : torch::nn::Module {
  TwinCriticImpl(int state_dim, int action_dim, int latent_dim, const std::vector<int>& hidden) {
    q1 = register_module("q1", Mlp(state_dim + action_dim + latent_dim, hidden, 1));
    q2 = register_module("q2", Mlp(state_dim + action_dim + latent_dim, hidden, 1));
  }

  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& s, const torch::Tensor& a,
                                                  const torch::Tensor& z) {
    auto x = torch::cat({s, a, broadcast_latent(z, s)}, -1);
    return {q1->forward(x).squeeze(-1), q2->forward(x).squeeze(-1)};
  }

  torch::Tensor min_q(const torch::Tensor& s, const torch::Tensor& a, const torch::Tensor& z) {
    auto [a1, a2] = forward(s, a, z);
    return torch::min(a1, a2);
  }

  Mlp q1{nullptr};
  Mlp q2{nullptr};
};
TORCH_MODULE(TwinCritic);

enum class ActMode { Sample, Mean };

inline std::vector<double> act(Policy& policy, std::span<const double> s, const torch::Tensor& z, ActMode mode,
                               Rng& rng) {
  torch::NoGradGuard guard;
  auto st = torch::tensor(std::vector<double>(s.begin(), s.end()), real_options()).unsqueeze(0);
  auto zt = z.detach().reshape({1, -1});
  torch::Tensor a = mode == ActMode::Mean ? policy->mean_action(st, zt)
                                          : policy->sample(st, zt, rng.normal_tensor({1, policy->action_dim})).action;
  a = a.squeeze(0).contiguous();
  return {a.data_ptr<double>(), a.data_ptr<double>() + a.numel()};
}

struct SacCoefficients {
  double lambda_rew = 1.0;
  double lambda_ent = 0.5;
  double gamma = 0.99;
};

/// Transitions with their (detached) task latents and the policy noise used for
/// the next-state and current-state action samples.
struct RlBatch {
  BatchTensors data;
  torch::Tensor z;           // [N, L] or [L]
  torch::Tensor next_noise;  // [N, A]
  torch::Tensor actor_noise; // [N, A]
};

/// Twin-critic TD loss, averaged over the two heads, against
/// lambda_rew * r + gamma * (min target Q(s', a') - lambda_ent * log pi(a'|s')).
/// Episodes end only at the time limit, so the target always bootstraps.
inline torch::Tensor loss_critic(TwinCritic& critic, TwinCritic& target, Policy& policy, const RlBatch& b,
                                 const SacCoefficients& c) {
  auto z = b.z.detach();
  torch::Tensor y;
  {
    torch::NoGradGuard guard;
    y = c.lambda_rew * b.data.r;
    if (c.gamma != 0.0) {
      auto next = policy->sample(b.data.s_next, z, b.next_noise);
      auto q_next = target->min_q(b.data.s_next, next.action, z);
      y = y + c.gamma * (q_next - c.lambda_ent * next.log_prob);
    }
  }
  auto [q1, q2] = critic->forward(b.data.s, b.data.a, z);
  return 0.5 * ((q1 - y).pow(2).mean() + (q2 - y).pow(2).mean());
}

/// Reparameterized actor loss mean(lambda_ent * log pi(a~|s) - min Q(s, a~)). Critic
/// parameters are frozen during evaluation, so gradient reaches the policy only.
inline torch::Tensor loss_actor(Policy& policy, TwinCritic& critic, const RlBatch& b, double lambda_ent) {
  auto z = b.z.detach();
  auto smp = policy->sample(b.data.s, z, b.actor_noise);
  FreezeGuard frozen(*critic);
  auto q = critic->min_q(b.data.s, smp.action, z);
  return (lambda_ent * smp.log_prob - q).mean();
}

struct RlLosses {
  torch::Tensor critic;
  torch::Tensor actor;
  torch::Tensor critic_virtual;  // undefined when the virtual batch is unused
};

/// Real-task losses plus lambda_vt times the same losses on virtual transitions.
inline RlLosses loss_rl_total(TwinCritic& critic, TwinCritic& target, Policy& policy, const RlBatch& real,
                              const RlBatch* virt, double lambda_vt, const SacCoefficients& c) {
  if (lambda_vt < 0.0 || lambda_vt > 1.0) throw ConfigError("lambda_vt must lie in [0, 1]");
  RlLosses out;
  out.critic = loss_critic(critic, target, policy, real, c);
  out.actor = loss_actor(policy, critic, real, c.lambda_ent);
  if (virt != nullptr && lambda_vt > 0.0) {
    out.critic_virtual = loss_critic(critic, target, policy, *virt, c);
    out.critic = out.critic + lambda_vt * out.critic_virtual;
    out.actor = out.actor + lambda_vt * loss_actor(policy, critic, *virt, c.lambda_ent);
  }
  return out;
}

struct Trajectory {
  std::vector<Transition> transitions;
  std::vector<int> latent_steps;           // steps at which the conditioning latent changed
  std::vector<torch::Tensor> latents;      // the latent chosen at each of those steps
  double undiscounted_return = 0.0;
};

/// Called every step for every rollout row; returns a new latent when the row's
/// conditioning latent changes at step t (always at t = 0) and an undefined
/// tensor otherwise.
using LatentSchedule = std::function<torch::Tensor(std::size_t row, int t)>;

/// Rolls one episode per task in lockstep, batching the policy forward pass.
inline std::vector<Trajectory> rollout(Policy& policy, const PointEnv& env, const std::vector<TaskSpec>& tasks,
                                       const LatentSchedule& schedule, ActMode mode, Rng& rng) {
  torch::NoGradGuard guard;
  const auto n = tasks.size();
  std::vector<Trajectory> out(n);
  std::vector<EnvState> states;
  for (const auto& t : tasks) states.push_back(env.reset(t, rng));
  std::vector<torch::Tensor> z(n);
  const int horizon = env.settings().horizon;
  for (int t = 0; t < horizon; ++t) {
    std::vector<double> obs_rows(n * kStateDim);
    for (std::size_t i = 0; i < n; ++i) {
      auto next_z = schedule(i, t);
      if (next_z.defined()) {
        z[i] = next_z.detach().reshape({-1});
        out[i].latent_steps.push_back(t);
        out[i].latents.push_back(z[i]);
      }
      TORCH_CHECK(z[i].defined(), "latent schedule must provide a latent at t = 0");
      const auto obs = states[i].observation();
      std::copy(obs.begin(), obs.end(), obs_rows.begin() + i * kStateDim);
    }
    auto s = torch::from_blob(obs_rows.data(), {static_cast<std::int64_t>(n), kStateDim}, real_options());
    auto zt = torch::stack(z);
    auto a = mode == ActMode::Mean
                 ? policy->mean_action(s, zt)
                 : policy->sample(s, zt, rng.normal_tensor({static_cast<std::int64_t>(n), kActionDim})).action;
    a = a.contiguous();
    const double* ap = a.data_ptr<double>();
    for (std::size_t i = 0; i < n; ++i) {
      std::span<const double> action(ap + i * kActionDim, kActionDim);
      auto res = env.step(tasks[i], states[i], action);
      const auto obs = states[i].observation();
      const auto next_obs = res.next.observation();
      Transition tr;
      tr.s.assign(obs.begin(), obs.end());
      tr.a.assign(action.begin(), action.end());
      tr.r = res.reward;
      tr.s_next.assign(next_obs.begin(), next_obs.end());
      tr.done = res.done;
      out[i].transitions.push_back(std::move(tr));
      out[i].undiscounted_return += res.reward;
      states[i] = res.next;
    }
  }
  return out;
}

/// A fixed latent per row for the whole episode.
inline LatentSchedule fixed_latents(std::vector<torch::Tensor> z) {
  return [z = std::move(z)](std::size_t row, int t) { return t == 0 ? z[row] : torch::Tensor(); };
}

/// Exploration schedule: every h_freq steps draw M distinct source latents and a
/// fresh alpha, and condition on their mix. Without any source latents the
/// latent is drawn from N(0, I).
inline LatentSchedule exploration_schedule(torch::Tensor source_latents, int latent_dim, int h_freq, double beta,
                                           int m, Rng& rng) {
  if (h_freq < 1) throw ConfigError("H_freq must be >= 1");
  return [source_latents = std::move(source_latents), latent_dim, h_freq, beta, m, &rng](std::size_t, int t) {
    if (t % h_freq != 0) return torch::Tensor();
    if (!source_latents.defined() || source_latents.size(0) == 0) return rng.normal_tensor({latent_dim});
    const auto rows = static_cast<std::size_t>(source_latents.size(0));
    const auto k = std::min<std::size_t>(rows, static_cast<std::size_t>(m));
    auto src = rng.choose_distinct(rows, k);
    auto mix = sample_alpha(static_cast<int>(k), beta, rng);
    std::vector<std::int64_t> idx(src.begin(), src.end());
    return mix_latents(source_latents.index_select(0, torch::tensor(idx, torch::kLong)), alpha_tensor(mix));
  };
}

/// One exploration episode on `task`, conditioning on a virtual-task latent that
/// is regenerated every h_freq steps.
inline Trajectory explore_rollout(Policy& policy, const PointEnv& env, const TaskSpec& task,
                                  const torch::Tensor& source_latents, int latent_dim, int h_freq, double beta, int m,
                                  Rng& rng) {
  auto schedule = exploration_schedule(source_latents, latent_dim, h_freq, beta, m, rng);
  return rollout(policy, env, {task}, schedule, ActMode::Sample, rng).front();
}

/// Mean over episodes of Q(s0, a0, z) / lambda_rew minus the realized discounted
/// return of the episode that follows; positive means overestimation.
/// `q(s, a, z)` and `pi(s, z)` operate on single states; pi must be deterministic.
template <class QFn, class PolicyFn>
double q_estimation_bias(QFn&& q, PolicyFn&& pi, const PointEnv& env, const std::vector<TaskSpec>& tasks,
                         const std::vector<torch::Tensor>& latents, int n_episodes, double gamma, double lambda_rew,
                         Rng& rng) {
  double total = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    for (int e = 0; e < n_episodes; ++e) {
      auto state = env.reset(tasks[i], rng);
      const auto s0 = state.observation();
      std::vector<double> a = pi(std::span<const double>(s0), latents[i]);
      const double q0 = q(std::span<const double>(s0), std::span<const double>(a), latents[i]) / lambda_rew;
      double discounted = 0.0;
      double weight = 1.0;
      for (int t = 0; t < env.settings().horizon; ++t) {
        if (t > 0) {
          const auto obs = state.observation();
          a = pi(std::span<const double>(obs), latents[i]);
        }
        auto res = env.step(tasks[i], state, a);
        discounted += weight * res.reward;
        weight *= gamma;
        state = res.next;
      }
      total += q0 - discounted;
      ++count;
    }
  }
  return count > 0 ? total / count : 0.0;
}

/// Bias of the learned twin critic (min head) under the mean-action policy.
inline double q_estimation_bias(TwinCritic& critic, Policy& policy, const PointEnv& env,
                                const std::vector<TaskSpec>& tasks, const std::vector<torch::Tensor>& latents,
                                int n_episodes, const SacCoefficients& c, Rng& rng) {
  torch::NoGradGuard guard;
  auto vec = [](std::span<const double> v) {
    return torch::tensor(std::vector<double>(v.begin(), v.end()), real_options()).unsqueeze(0);
  };
  auto q = [&](std::span<const double> s, std::span<const double> a, const torch::Tensor& z) {
    return critic->min_q(vec(s), vec(a), z.reshape({1, -1})).item<double>();
  };
  auto pi = [&](std::span<const double> s, const torch::Tensor& z) {
    auto a = policy->mean_action(vec(s), z.reshape({1, -1})).squeeze(0).contiguous();
    return std::vector<double>(a.data_ptr<double>(), a.data_ptr<double>() + a.numel());
  };
  return q_estimation_bias(q, pi, env, tasks, latents, n_episodes, c.gamma, c.lambda_rew, rng);
}

}  // namespace tavt
