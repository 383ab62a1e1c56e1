#include <gtest/gtest.h>

#include <cmath>

#include "support/finite_diff.hpp"
#include "support/fixtures.hpp"
#include "tavt/rl.hpp"

using namespace tavt;
using tavt::testing::check_gradients;
using tavt::testing::graph_sensitivity;
using tavt::testing::random_batch;

namespace {

template <class M>
M seeded(M m, std::uint64_t seed) {
  Rng rng(seed);
  init_parameters(*m, rng);
  return m;
}

Policy small_policy(int latent = 2, std::uint64_t seed = 1) {
  return seeded(Policy(kStateDim, latent, kActionDim, std::vector<int>{6}), seed);
}

TwinCritic small_critic(int latent = 2, std::uint64_t seed = 2) {
  return seeded(TwinCritic(kStateDim, kActionDim, latent, std::vector<int>{6}), seed);
}

RlBatch random_rl_batch(Rng& rng, std::int64_t n, std::int64_t latent = 2) {
  return {random_batch(rng, {n}), rng.normal_tensor({n, latent}), rng.normal_tensor({n, kActionDim}),
          rng.normal_tensor({n, kActionDim})};
}

void zero(torch::nn::Module& m) {
  torch::NoGradGuard g;
  for (auto& p : m.parameters()) p.zero_();
}

}  // namespace

TEST(Rl, MeanActionIsDeterministicAndSamplesAreBounded) {
  auto pi = small_policy();
  Rng rng(3);
  const std::vector<double> s{0.3, -1.0, 2.0, 0.1};
  auto z = rng.normal_tensor({2});
  EXPECT_EQ(act(pi, s, z, ActMode::Mean, rng), act(pi, s, z, ActMode::Mean, rng));
  for (int k = 0; k < 200; ++k)
    for (double a : act(pi, s, z, ActMode::Sample, rng)) {
      EXPECT_GT(a, -1.0);
      EXPECT_LT(a, 1.0);
    }
  Rng r1(4), r2(4);
  EXPECT_EQ(act(pi, s, z, ActMode::Sample, r1), act(pi, s, z, ActMode::Sample, r2));
}

TEST(Rl, SquashedDensityIntegratesToOne) {
  auto pi = seeded(Policy(3, 1, 1, std::vector<int>{5}), 5);
  Rng rng(5);
  torch::NoGradGuard g;
  for (int trial = 0; trial < 3; ++trial) {
    auto s = rng.normal_tensor({1, 3});
    auto z = rng.normal_tensor({1, 1});
    // integrate over u = atanh(a) to avoid the endpoint singularities: da = (1 - tanh^2 u) du
    const int n = 40001;
    auto u = torch::linspace(-12.0, 12.0, n, real_options()).unsqueeze(-1);
    auto a = torch::tanh(u);
    auto density = pi->log_prob(s.expand({n, 3}), z.expand({n, 1}), a).exp() * (1.0 - a.pow(2)).squeeze(-1);
    const double integral = torch::trapezoid(density, u.squeeze(-1)).item<double>();
    EXPECT_NEAR(integral, 1.0, 1e-3);
  }
}

TEST(Rl, SampledLogProbMatchesDensityOfTheSample) {
  auto pi = small_policy();
  Rng rng(6);
  torch::NoGradGuard g;
  auto s = rng.normal_tensor({16, kStateDim});
  auto z = rng.normal_tensor({16, 2});
  auto smp = pi->sample(s, z, 0.5 * rng.normal_tensor({16, kActionDim}));
  EXPECT_TRUE(torch::allclose(smp.log_prob, pi->log_prob(s, z, smp.action), 1e-8, 1e-8));
}

TEST(Rl, MyopicCriticLossIsTheRegressionOnScaledReward) {
  auto critic = small_critic();
  auto target = small_critic(2, 9);
  auto pi = small_policy();
  Rng rng(7);
  auto b = random_rl_batch(rng, 12);
  SacCoefficients c{3.0, 0.5, 0.0};
  auto [q1, q2] = critic->forward(b.data.s, b.data.a, b.z);
  const double expected =
      0.5 * ((q1 - 3.0 * b.data.r).pow(2).mean() + (q2 - 3.0 * b.data.r).pow(2).mean()).item<double>();
  EXPECT_NEAR(loss_critic(critic, target, pi, b, c).item<double>(), expected, 1e-12);
}

TEST(Rl, CriticTargetBootstrapsFromTheTargetNetwork) {
  auto critic = small_critic();
  auto target = small_critic(2, 9);
  auto pi = small_policy();
  Rng rng(8);
  auto b = random_rl_batch(rng, 10);
  SacCoefficients c{2.0, 0.3, 0.9};
  torch::NoGradGuard g;
  auto next = pi->sample(b.data.s_next, b.z, b.next_noise);
  auto y = 2.0 * b.data.r + 0.9 * (target->min_q(b.data.s_next, next.action, b.z) - 0.3 * next.log_prob);
  auto [q1, q2] = critic->forward(b.data.s, b.data.a, b.z);
  const double expected = 0.5 * ((q1 - y).pow(2).mean() + (q2 - y).pow(2).mean()).item<double>();
  EXPECT_NEAR(loss_critic(critic, target, pi, b, c).item<double>(), expected, 1e-12);
}

TEST(Rl, ZeroCriticOnZeroRewardHasZeroLoss) {
  auto critic = small_critic();
  auto target = small_critic();
  zero(*critic);
  zero(*target);
  auto pi = small_policy();
  Rng rng(9);
  auto b = random_rl_batch(rng, 8);
  b.data.r.zero_();
  EXPECT_EQ(loss_critic(critic, target, pi, b, {1.0, 0.5, 0.0}).item<double>(), 0.0);
}

TEST(Rl, CriticGradientsMatchFiniteDifferences) {
  auto critic = small_critic(2, 10);
  auto target = small_critic(2, 11);
  auto pi = small_policy(2, 12);
  Rng rng(10);
  auto b = random_rl_batch(rng, 9);
  auto loss = [&] { return loss_critic(critic, target, pi, b, {2.0, 0.5, 0.95}); };
  auto res = check_gradients(loss, critic->parameters());
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
  EXPECT_EQ(graph_sensitivity(loss, target->parameters()), 0.0);
  EXPECT_EQ(graph_sensitivity(loss, pi->parameters()), 0.0);
}

TEST(Rl, ActorGradientsMatchFiniteDifferences) {
  auto critic = small_critic(2, 13);
  auto pi = small_policy(2, 14);
  Rng rng(11);
  auto b = random_rl_batch(rng, 9);
  auto loss = [&] { return loss_actor(pi, critic, b, 0.4); };
  auto res = check_gradients(loss, pi->parameters());
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
  EXPECT_EQ(graph_sensitivity(loss, critic->parameters()), 0.0);
  for (const auto& p : critic->parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(Rl, LargerEntropyWeightKeepsABanditPolicyWider) {
  // one state, linear critic favouring a = +1
  auto train = [](double lambda_ent) {
    auto pi = seeded(Policy(1, 1, 1, std::vector<int>{8}), 15);
    TwinCritic critic(1, 1, 1, std::vector<int>{});
    {
      torch::NoGradGuard g;
      for (auto& p : critic->parameters()) p.zero_();
      critic->q1->output_layer()->weight[0][1] = 1.0;
      critic->q2->output_layer()->weight[0][1] = 1.0;
    }
    torch::optim::Adam opt(pi->parameters(), torch::optim::AdamOptions(1e-2));
    Rng rng(16);
    RlBatch b;
    b.data.s = torch::zeros({256, 1}, real_options());
    b.z = torch::zeros({256, 1}, real_options());
    for (int step = 0; step < 400; ++step) {
      b.actor_noise = rng.normal_tensor({256, 1});
      auto l = loss_actor(pi, critic, b, lambda_ent);
      opt.zero_grad();
      l.backward();
      opt.step();
    }
    torch::NoGradGuard g;
    b.actor_noise = rng.normal_tensor({256, 1});
    return -pi->sample(b.data.s, b.z, b.actor_noise).log_prob.mean().item<double>();  // entropy estimate
  };
  EXPECT_GT(train(1.0), train(0.01) + 0.5);
}

TEST(Rl, VirtualWeightCombinesLossesLinearly) {
  auto critic = small_critic();
  auto target = small_critic(2, 9);
  auto pi = small_policy();
  Rng rng(17);
  auto real = random_rl_batch(rng, 10);
  auto virt = random_rl_batch(rng, 10);
  SacCoefficients c{1.0, 0.5, 0.9};
  auto base = loss_rl_total(critic, target, pi, real, nullptr, 0.7, c);
  auto none = loss_rl_total(critic, target, pi, real, &virt, 0.0, c);
  EXPECT_EQ(base.critic.item<double>(), none.critic.item<double>());
  EXPECT_EQ(base.actor.item<double>(), none.actor.item<double>());
  EXPECT_FALSE(none.critic_virtual.defined());

  auto twice = loss_rl_total(critic, target, pi, real, &real, 1.0, c);
  EXPECT_NEAR(twice.critic.item<double>(), 2.0 * base.critic.item<double>(), 1e-12);
  EXPECT_NEAR(twice.actor.item<double>(), 2.0 * base.actor.item<double>(), 1e-12);

  const double vc = loss_critic(critic, target, pi, virt, c).item<double>();
  const double va = loss_actor(pi, critic, virt, c.lambda_ent).item<double>();
  for (double lv : {0.25, 0.5, 1.0}) {
    auto t = loss_rl_total(critic, target, pi, real, &virt, lv, c);
    EXPECT_NEAR(t.critic.item<double>(), base.critic.item<double>() + lv * vc, 1e-12);
    EXPECT_NEAR(t.actor.item<double>(), base.actor.item<double>() + lv * va, 1e-12);
  }
  EXPECT_THROW(loss_rl_total(critic, target, pi, real, &virt, 1.5, c), ConfigError);
  EXPECT_THROW(loss_rl_total(critic, target, pi, real, &virt, -0.1, c), ConfigError);
}

TEST(Rl, LatentsFromTheEncoderReceiveNoGradient) {
  Encoder enc(feature_dim(kStateDim, kActionDim), std::vector<int>{6}, 2);
  Rng rng(18);
  init_parameters(*enc, rng);
  auto critic = small_critic();
  auto target = small_critic(2, 9);
  auto pi = small_policy();
  auto ctx = random_batch(rng, {8, 5});
  auto b = random_rl_batch(rng, 8);
  auto with_z = [&] {
    auto out = b;
    out.z = enc->forward(ctx.features());
    return out;
  };
  SacCoefficients c{1.0, 0.5, 0.9};
  EXPECT_EQ(graph_sensitivity([&] { return loss_critic(critic, target, pi, with_z(), c); }, enc->parameters()), 0.0);
  EXPECT_EQ(graph_sensitivity([&] { return loss_actor(pi, critic, with_z(), 0.5); }, enc->parameters()), 0.0);
}

TEST(Rl, SoftUpdateIsAnExactExponentialAverage) {
  auto a = small_critic(2, 19);
  auto b = small_critic(2, 20);
  std::vector<torch::Tensor> before;
  for (auto& p : a->parameters()) before.push_back(p.detach().clone());
  soft_update(*a, *b, 0.005);
  auto ap = a->parameters();
  auto bp = b->parameters();
  for (std::size_t i = 0; i < ap.size(); ++i)
    EXPECT_TRUE(torch::allclose(ap[i], before[i] * (1.0 - 0.005) + 0.005 * bp[i], 0.0, 1e-16));
  hard_update(*a, *b);
  for (std::size_t i = 0; i < ap.size(); ++i) EXPECT_TRUE(torch::equal(a->parameters()[i], bp[i]));
}

TEST(Rl, ExplorationLatentChangesEveryHFreqSteps) {
  auto pi = small_policy();
  PointEnv env;
  TaskSpec task{TaskFamily::PointGoal, {0.5, 0.5}, Split::Train};
  Rng rng(21);
  auto sources = rng.normal_tensor({4, 2});
  auto steps = [&](int h) { return explore_rollout(pi, env, task, sources, 2, h, 2.0, 3, rng).latent_steps; };
  EXPECT_EQ(steps(64), std::vector<int>{0});
  EXPECT_EQ(steps(64 * 3), std::vector<int>{0});
  EXPECT_EQ(steps(1).size(), 64u);
  EXPECT_EQ(steps(20), (std::vector<int>{0, 20, 40, 60}));
  EXPECT_THROW(steps(0), ConfigError);
  auto traj = explore_rollout(pi, env, task, sources, 2, 16, 2.0, 3, rng);
  EXPECT_EQ(traj.transitions.size(), 64u);
  ASSERT_EQ(traj.latents.size(), 4u);
  EXPECT_FALSE(torch::equal(traj.latents[0], traj.latents[1]));
}

TEST(Rl, ExplorationWithoutSourcesUsesThePrior) {
  auto pi = small_policy();
  PointEnv env;
  TaskSpec task{TaskFamily::PointGoal, {0.5, 0.5}, Split::Train};
  Rng rng(22);
  auto traj = explore_rollout(pi, env, task, torch::Tensor(), 2, 32, 2.0, 3, rng);
  EXPECT_EQ(traj.latent_steps, (std::vector<int>{0, 32}));
  EXPECT_EQ(traj.latents[0].size(0), 2);
}

TEST(Rl, RolloutReturnIsTheSumOfRewards) {
  auto pi = small_policy();
  PointEnv env;
  auto tasks = sample_tasks(TaskFamily::PointGoal, Split::Train, 3, std::uint64_t{1});
  Rng rng(23);
  auto z = rng.normal_tensor({3, 2});
  auto out = rollout(pi, env, tasks, fixed_latents({z[0], z[1], z[2]}), ActMode::Mean, rng);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& t : out) {
    double sum = 0.0;
    for (const auto& tr : t.transitions) sum += tr.r;
    EXPECT_DOUBLE_EQ(sum, t.undiscounted_return);
    EXPECT_TRUE(t.transitions.back().done);
    EXPECT_EQ(t.latent_steps, std::vector<int>{0});
  }
}

TEST(Rl, ZeroCriticBiasIsMinusTheDiscountedReturn) {
  auto critic = small_critic();
  zero(*critic);
  auto pi = small_policy();
  EnvSettings settings;
  settings.horizon = 5;
  PointEnv env(settings);
  std::vector<TaskSpec> tasks{{TaskFamily::PointGoal, {1.0, -0.5}, Split::Test}};
  std::vector<torch::Tensor> z{torch::zeros({2}, real_options())};
  Rng rng(24);
  const double bias = q_estimation_bias(critic, pi, env, tasks, z, 2, {1.0, 0.5, 0.9}, rng);

  // independent rollout of the mean-action policy
  auto out = rollout(pi, env, tasks, fixed_latents(z), ActMode::Mean, rng).front();
  double disc = 0.0;
  for (std::size_t t = 0; t < out.transitions.size(); ++t) disc += std::pow(0.9, t) * out.transitions[t].r;
  EXPECT_NEAR(bias, -disc, 1e-12);
}

TEST(Rl, ExactCriticHasZeroBiasAndShiftsGiveTheSign) {
  EnvSettings settings;
  settings.horizon = 2;
  PointEnv env(settings);
  TaskSpec task{TaskFamily::PointGoal, {0.4, 0.1}, Split::Test};
  const double gamma = 0.7;
  const double lambda_rew = 4.0;
  auto pi = [](std::span<const double>, const torch::Tensor&) { return std::vector<double>{0.5, -0.5}; };
  // two-step dynamic program for Q(s0, a0) under the fixed policy
  auto exact_q = [&](std::span<const double> s, std::span<const double> a, const torch::Tensor&) {
    EnvState st;
    st.position = {s[0], s[1]};
    st.velocity = {s[2], s[3]};
    auto r1 = env.step(task, st, a);
    const double next[] = {0.5, -0.5};
    auto r2 = env.step(task, r1.next, next);
    return lambda_rew * (r1.reward + gamma * r2.reward);
  };
  Rng rng(25);
  std::vector<torch::Tensor> z{torch::zeros({1}, real_options())};
  EXPECT_NEAR(q_estimation_bias(exact_q, pi, env, {task}, z, 3, gamma, lambda_rew, rng), 0.0, 1e-12);
  auto over = [&](auto s, auto a, const auto& zz) { return exact_q(s, a, zz) + lambda_rew * 0.25; };
  EXPECT_NEAR(q_estimation_bias(over, pi, env, {task}, z, 3, gamma, lambda_rew, rng), 0.25, 1e-12);
  auto under = [&](auto s, auto a, const auto& zz) { return exact_q(s, a, zz) - lambda_rew; };
  EXPECT_NEAR(q_estimation_bias(under, pi, env, {task}, z, 3, gamma, lambda_rew, rng), -1.0, 1e-12);
}
