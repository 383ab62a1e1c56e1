#pragma once

// Virtual tasks: shifted-Dirichlet latent mixing, decoder-generated contexts with
// next-state regularization, and the WGAN-GP critic / generator losses.

#include <torch/torch.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "tavt/buffers.hpp"
#include "tavt/errors.hpp"
#include "tavt/nn.hpp"
#include "tavt/representation.hpp"
#include "tavt/rng.hpp"

namespace tavt {

struct MixCoefficients {
  std::vector<double> alpha;
  double beta = 1.0;
  std::vector<std::int64_t> source_tasks;
};

/// alpha ~ beta * Dirichlet(1, ..., 1) - (beta - 1) / M. Sums to one; beta > 1
/// lets components go negative (extrapolation beyond the source latents).
inline MixCoefficients sample_alpha(int m, double beta, Rng& rng) {
  if (m < 1) throw ConfigError("M must be >= 1");
  if (!(beta >= 1.0)) throw ConfigError("beta must be >= 1");
  MixCoefficients mix;
  mix.beta = beta;
  if (m == 1) {
    mix.alpha = {1.0};
    return mix;
  }
  std::vector<double> d(m);
  double total = 0.0;
  for (auto& v : d) total += (v = rng.exponential(1.0));
  const double shift = (beta - 1.0) / m;
  for (auto& v : d) mix.alpha.push_back(beta * (v / total) - shift);
  return mix;
}

inline MixCoefficients sample_alpha(int m, double beta, std::uint64_t seed) {
  Rng rng(seed);
  return sample_alpha(m, beta, rng);
}

inline torch::Tensor alpha_tensor(const MixCoefficients& mix) {
  return torch::tensor(mix.alpha, real_options());
}

/// Weighted sum of latents. latents: [M, L] -> [L].
inline torch::Tensor mix_latents(const torch::Tensor& latents, const torch::Tensor& alpha) {
  if (latents.dim() != 2 || latents.size(0) != alpha.size(0)) throw InputError("latent/alpha count mismatch");
  return (alpha.unsqueeze(-1) * latents).sum(0);
}

inline LatentCode mix_latents(const std::vector<LatentCode>& latents, const MixCoefficients& mix) {
  if (latents.size() != mix.alpha.size()) throw InputError("latent/alpha count mismatch");
  std::vector<torch::Tensor> zs;
  for (const auto& l : latents) {
    if (l.z.sizes() != latents.front().z.sizes()) throw InputError("latent dimension mismatch");
    zs.push_back(l.z);
  }
  return {mix_latents(torch::stack(zs), alpha_tensor(mix)), LatentKind::Virtual};
}

struct VirtualTask {
  MixCoefficients mix;
  torch::Tensor z_off;  // [L] mix of off-policy latents; conditions generation
  torch::Tensor z_on;   // [L] same mix of on-policy latents; conditions the policy
};

/// Builds n virtual tasks from the latents of a batch of training tasks. The
/// M sources of each VT are distinct rows of the batch; z_off and z_on share alpha.
inline std::vector<VirtualTask> make_virtual_tasks(int n, int m, double beta, const torch::Tensor& z_off,
                                                   const torch::Tensor& z_on, Rng& rng) {
  std::vector<VirtualTask> out;
  const auto rows = static_cast<std::size_t>(z_off.size(0));
  const int k = static_cast<int>(std::min<std::size_t>(rows, static_cast<std::size_t>(m)));
  for (int v = 0; v < n; ++v) {
    VirtualTask vt;
    auto src = rng.choose_distinct(rows, static_cast<std::size_t>(k));
    vt.mix = sample_alpha(k, beta, rng);
    std::vector<std::int64_t> idx(src.begin(), src.end());
    vt.mix.source_tasks = idx;
    auto sel = torch::tensor(idx, torch::kLong);
    auto a = alpha_tensor(vt.mix);
    vt.z_off = mix_latents(z_off.detach().index_select(0, sel), a);
    if (z_on.defined()) vt.z_on = mix_latents(z_on.detach().index_select(0, sel), a);
    out.push_back(std::move(vt));
  }
  return out;
}

/// Donor (s, a, s') rows for a virtual context: each row picks source k with
/// probability |alpha_k| / sum |alpha| and samples from that source's buffer.
inline TransitionBatch sample_donors(const MixCoefficients& mix, const std::vector<const ReplayFifo*>& sources,
                                     std::size_t n, Rng& rng) {
  if (sources.size() != mix.alpha.size()) throw InputError("donor source count mismatch");
  std::vector<double> cum;
  double total = 0.0;
  for (double a : mix.alpha) cum.push_back(total += std::abs(a));
  TransitionBatch out(sources.front()->state_dim(), sources.front()->action_dim());
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform(0.0, total);
    std::size_t k = 0;
    while (k + 1 < cum.size() && u >= cum[k]) ++k;
    const auto one = sources[k]->sample(1, rng);
    out.push_back(one.at(0));
  }
  return out;
}

/// Virtual transitions (s, a, r_hat, s_reg) with s_reg = eps * s_hat + (1 - eps) * s'.
/// Gradients reach the decoder through r_hat and s_hat; the conditioning latent is detached.
inline BatchTensors generate_virtual_context(TaskDecoder& decoder, const torch::Tensor& z_alpha_off,
                                             const BatchTensors& donor, double eps_reg) {
  if (eps_reg < 0.0 || eps_reg > 1.0) throw ConfigError("eps_reg must lie in [0, 1]");
  auto pred = decoder->forward(donor.s, donor.a, z_alpha_off.detach());
  torch::Tensor s_next;
  if (eps_reg == 0.0)
    s_next = donor.s_next;
  else if (eps_reg == 1.0)
    s_next = pred.s_next;
  else
    s_next = eps_reg * pred.s_next + (1.0 - eps_reg) * donor.s_next;
  return {donor.s, donor.a, pred.r, s_next};
}

inline Context generate_virtual_context(TaskDecoder& decoder, const LatentCode& z_alpha_off, const Context& donor,
                                        double eps_reg) {
  torch::NoGradGuard guard;
  auto out = generate_virtual_context(decoder, z_alpha_off.z, to_tensors(donor.transitions), eps_reg);
  Context c;
  c.source = ContextSource::Virtual;
  c.transitions = TransitionBatch(donor.transitions.state_dim, donor.transitions.action_dim);
  auto r = out.r.contiguous();
  auto sn = out.s_next.contiguous();
  for (std::size_t i = 0; i < donor.size(); ++i) {
    auto t = donor.transitions.at(i);
    t.r = r[static_cast<std::int64_t>(i)].item<double>();
    for (int d = 0; d < c.transitions.state_dim; ++d)
      t.s_next[d] = sn[static_cast<std::int64_t>(i)][d].item<double>();
    c.transitions.push_back(t);
  }
  return c;
}

/// WGAN critic over (context, latent) pairs: f(c, z) = mean_l g([x_l, z]).
struct DiscriminatorImpl : torch::nn::Module {
  DiscriminatorImpl(int feature_dim, int latent_dim, const std::vector<int>& hidden) : latent_dim(latent_dim) {
    net = register_module("net", Mlp(feature_dim + latent_dim, hidden, 1));
  }

  /// features: [B, N, D], z: [B, L] -> [B]
  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& z) {
    auto zz = z.unsqueeze(-2).expand({features.size(0), features.size(1), z.size(-1)});
    return net->forward(torch::cat({features, zz}, -1)).squeeze(-1).mean(-1);
  }

  int latent_dim;
  Mlp net{nullptr};
};
TORCH_MODULE(Discriminator);

/// A batch of critic inputs: contexts [B, N, D] with their latents [B, L].
struct CriticPairs {
  torch::Tensor features;
  torch::Tensor z;
};

/// mean_b (||grad f(x_b)||_2 - 1)^2 at x_b = delta_b * real_b + (1 - delta_b) * fake_b,
/// with one delta per (context, latent) pair; the norm runs over the whole pair.
inline torch::Tensor gradient_penalty(Discriminator& disc, const CriticPairs& real, const CriticPairs& fake,
                                      const torch::Tensor& delta) {
  auto d3 = delta.view({-1, 1, 1});
  auto d2 = delta.view({-1, 1});
  auto xf = (d3 * real.features.detach() + (1.0 - d3) * fake.features.detach()).requires_grad_(true);
  auto xz = (d2 * real.z.detach() + (1.0 - d2) * fake.z.detach()).requires_grad_(true);
  auto score = disc->forward(xf, xz);
  auto grads = torch::autograd::grad({score.sum()}, {xf, xz}, {}, /*retain_graph=*/true, /*create_graph=*/true);
  auto flat = torch::cat({grads[0].flatten(1), grads[1].flatten(1)}, 1);
  auto norm = torch::linalg_vector_norm(flat, 2, {1});
  return (norm - 1.0).pow(2).mean();
}

inline torch::Tensor gradient_penalty(Discriminator& disc, const CriticPairs& real, const CriticPairs& fake,
                                      Rng& rng) {
  return gradient_penalty(disc, real, fake, rng.uniform_tensor({real.features.size(0)}));
}

struct DiscLossTerms {
  torch::Tensor total;
  torch::Tensor wgan;  // mean f(fake) - mean f(real)
  torch::Tensor gp;
};

/// lambda_wgan * (mean f(fake) - mean f(real)) + lambda_gp * GP. All inputs are
/// detached: only the critic receives gradient. For the penalty, fake pair b is
/// matched with real pair b mod B_real.
inline DiscLossTerms loss_disc(Discriminator& disc, const CriticPairs& real, const CriticPairs& fake,
                               double lambda_wgan, double lambda_gp, const torch::Tensor& delta) {
  DiscLossTerms out;
  auto f_real = disc->forward(real.features.detach(), real.z.detach());
  auto f_fake = disc->forward(fake.features.detach(), fake.z.detach());
  out.wgan = f_fake.mean() - f_real.mean();
  auto match = torch::arange(fake.features.size(0), torch::kLong).remainder(real.features.size(0));
  CriticPairs real_matched{real.features.index_select(0, match), real.z.index_select(0, match)};
  out.gp = lambda_gp != 0.0 ? gradient_penalty(disc, real_matched, fake, delta) : torch::zeros({}, real_options());
  out.total = lambda_wgan * out.wgan + lambda_gp * out.gp;
  return out;
}

inline DiscLossTerms loss_disc(Discriminator& disc, const CriticPairs& real, const CriticPairs& fake,
                               double lambda_wgan, double lambda_gp, Rng& rng) {
  return loss_disc(disc, real, fake, lambda_wgan, lambda_gp, rng.uniform_tensor({fake.features.size(0)}));
}

struct GenLossTerms {
  torch::Tensor total;
  torch::Tensor wgan;  // -mean f(fake)
  torch::Tensor tp;    // mean ||z_hat - z_alpha||^2
  double gap = 0.0;    // mean ||z_hat - z_alpha||_2, for monitoring
};

/// -lambda_wgan * mean f(c_hat, z_alpha) + lambda_tp * mean ||encode(c_hat) - z_alpha||^2.
/// `fake.features` carries gradient back to the decoder; the target latent is
/// detached and the critic is frozen so no gradient reaches its parameters.
inline GenLossTerms loss_gen(Encoder& encoder, Discriminator& disc, const CriticPairs& fake, double lambda_wgan,
                             double lambda_tp) {
  GenLossTerms out;
  auto target = fake.z.detach();
  {
    FreezeGuard frozen(*disc);
    out.wgan = lambda_wgan != 0.0 ? -disc->forward(fake.features, target).mean() : torch::zeros({}, real_options());
  }
  auto z_hat = encoder->forward(fake.features);
  auto sq = (z_hat - target).pow(2).sum(-1);
  out.tp = sq.mean();
  out.gap = sq.detach().sqrt().mean().item<double>();
  out.total = lambda_wgan * out.wgan + lambda_tp * out.tp;
  return out;
}

}  // namespace tavt
