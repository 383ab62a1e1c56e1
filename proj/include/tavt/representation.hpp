#pragma once

// Task encoder, the two task decoders, the decoder-based bisimulation distance
// and the encoder-decoder loss (bisimulation + reconstruction + on-off terms).

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "tavt/buffers.hpp"
#include "tavt/errors.hpp"
#include "tavt/nn.hpp"
#include "tavt/rng.hpp"

namespace tavt {

enum class LatentKind { On, Off, Virtual };

struct LatentCode {
  torch::Tensor z;  // [latent_dim]
  LatentKind kind = LatentKind::Off;
};

/// Deterministic set encoder: per-transition embedding, mean pooling, linear projection.
struct EncoderImpl : torch::nn::Module {
  EncoderImpl(int feature_dim, const std::vector<int>& hidden, int latent_dim) : latent_dim(latent_dim) {
    TORCH_CHECK(!hidden.empty(), "encoder needs at least one hidden layer");
    std::vector<int> inner(hidden.begin(), hidden.end() - 1);
    embed = register_module("embed", Mlp(feature_dim, inner, hidden.back(), /*activate_output=*/true));
    proj = register_module("proj", torch::nn::Linear(hidden.back(), latent_dim));
    to(kReal);
  }

  /// features: [..., N, D] -> latents [..., latent_dim]. Embeddings are sorted
  /// per channel before pooling, which fixes the summation order: the result is
  /// bit-identical under any permutation of the transitions.
  torch::Tensor forward(const torch::Tensor& features) {
    return proj->forward(std::get<0>(embed->forward(features).sort(-2)).mean(-2));
  }

  int latent_dim;
  Mlp embed{nullptr};
  torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(Encoder);

struct DecoderOutput {
  torch::Tensor r;       // [...]
  torch::Tensor s_next;  // [..., S]
};

/// Point-prediction task decoder p(s, a, cond) -> (r_hat, s_next_hat). The next
/// state is predicted as a residual on s. `cond` is a task latent or a one-hot index.
struct TaskDecoderImpl : torch::nn::Module {
  TaskDecoderImpl(int state_dim, int action_dim, int cond_dim, const std::vector<int>& hidden,
                  double dropout = 0.0)
      : state_dim(state_dim), cond_dim(cond_dim) {
    net = register_module("net", Mlp(state_dim + action_dim + cond_dim, hidden, 1 + state_dim, false, dropout));
  }

  /// s: [..., S], a: [..., A], cond: broadcastable to [..., C] (e.g. [B, C] for [B, N, S] inputs).
  DecoderOutput forward(const torch::Tensor& s, const torch::Tensor& a, torch::Tensor cond) {
    while (cond.dim() < s.dim()) cond = cond.unsqueeze(-2);
    std::vector<std::int64_t> shape(s.sizes().begin(), s.sizes().end());
    shape.back() = cond_dim;
    cond = cond.expand(shape);
    auto out = net->forward(torch::cat({s, a, cond}, -1));
    return {out.select(-1, 0), s + out.narrow(-1, 1, state_dim)};
  }

  int state_dim;
  int cond_dim;
  Mlp net{nullptr};
};
TORCH_MODULE(TaskDecoder);

inline void require_finite(const torch::Tensor& t, const char* what) {
  if (!all_finite(t)) throw InputError(std::string("non-finite ") + what);
}

inline LatentCode encode(Encoder& encoder, const Context& context) {
  const auto bt = to_tensors(context.transitions);
  auto f = bt.features();
  require_finite(f, "context");
  const auto kind = context.source == ContextSource::On    ? LatentKind::On
                    : context.source == ContextSource::Off ? LatentKind::Off
                                                           : LatentKind::Virtual;
  return {encoder->forward(f), kind};
}

/// Mean of n_avg encodings of independently drawn off-policy contexts.
inline LatentCode encode_off_avg(Encoder& encoder, const TaskBuffers& buffers, int n_avg, std::size_t n_c,
                                 Rng& rng) {
  if (n_avg < 1) throw ConfigError("n_avg must be >= 1");
  std::vector<BatchTensors> parts;
  for (int k = 0; k < n_avg; ++k) parts.push_back(to_tensors(sample_context(buffers, BufferKind::Off, n_c, rng).transitions));
  return {encoder->forward(stack(parts).features()).mean(0), LatentKind::Off};
}

inline DecoderOutput decode(TaskDecoder& decoder, const torch::Tensor& s, const torch::Tensor& a,
                            const torch::Tensor& z) {
  return decoder->forward(s, a, z);
}

inline torch::Tensor one_hot(std::int64_t index, std::int64_t n) {
  if (index < 0 || index >= n) throw InputError("task index out of range");
  auto v = torch::zeros({n}, real_options());
  v[index] = 1.0;
  return v;
}

inline torch::Tensor one_hot(const std::vector<std::int64_t>& indices, std::int64_t n) {
  auto v = torch::zeros({static_cast<std::int64_t>(indices.size()), n}, real_options());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= n) throw InputError("task index out of range");
    v[static_cast<std::int64_t>(k)][indices[k]] = 1.0;
  }
  return v;
}

inline DecoderOutput decode_idx(TaskDecoder& idx_decoder, const torch::Tensor& s, const torch::Tensor& a,
                                std::int64_t task_index) {
  return idx_decoder->forward(s, a, one_hot(task_index, idx_decoder->cond_dim));
}

/// Decoder-based bisimulation distances for index pairs on a shared (s, a) batch:
/// mean_l |r_i - r_j| + eta * ||s'_i - s'_j||_2. Point predictions make the
/// 2-Wasserstein term the distance between predicted next states. No gradient.
inline torch::Tensor bisim_distances(TaskDecoder& idx_decoder, const std::vector<std::int64_t>& task_i,
                                     const std::vector<std::int64_t>& task_j, const torch::Tensor& s,
                                     const torch::Tensor& a, double eta) {
  torch::NoGradGuard guard;
  const auto pairs = static_cast<std::int64_t>(task_i.size());
  auto ss = s.unsqueeze(0).expand({pairs, s.size(0), s.size(1)});
  auto aa = a.unsqueeze(0).expand({pairs, a.size(0), a.size(1)});
  auto pi = idx_decoder->forward(ss, aa, one_hot(task_i, idx_decoder->cond_dim));
  auto pj = idx_decoder->forward(ss, aa, one_hot(task_j, idx_decoder->cond_dim));
  auto reward_gap = (pi.r - pj.r).abs();
  auto state_gap = (pi.s_next - pj.s_next).pow(2).sum(-1).sqrt();
  return (reward_gap + eta * state_gap).mean(-1);
}

inline double bisim_distance(TaskDecoder& idx_decoder, std::int64_t i, std::int64_t j, const torch::Tensor& s,
                             const torch::Tensor& a, double eta) {
  if (s.size(0) == 0) throw InputError("empty (s, a) batch");
  return bisim_distances(idx_decoder, {i}, {j}, s, a, eta).item<double>();
}

enum class LatentNorm { L1, L2 };

struct BisimCoefficients {
  double bisim = 100.0;
  double recon = 200.0;
  double onoff = 100.0;
  double eta = 0.1;
  LatentNorm norm = LatentNorm::L1;
  double anchor = 0.0;  // weight of mean ||z_off||^2; pins the latent origin
};

/// One model-update batch over B training tasks.
struct BisimInputs {
  BatchTensors off;                      // [B, N, ...] off-policy contexts
  BatchTensors on;                       // [B, N, ...] on-policy contexts
  torch::Tensor z_off_target;            // [B, L] averaged off latents; treated as constant
  std::vector<std::int64_t> task_index;  // [B] indices into the training set
  std::vector<std::int64_t> partner;     // [B] position in the batch each task is paired with
  torch::Tensor pair_s, pair_a;          // shared (s, a) batch for the distance target
};

struct BisimLossTerms {
  torch::Tensor total;
  torch::Tensor bisim;
  torch::Tensor recon_idx;
  torch::Tensor recon;
  torch::Tensor onoff;
  torch::Tensor anchor;
  torch::Tensor z_off;  // [B, L], with gradient
};

inline torch::Tensor latent_distance(const torch::Tensor& a, const torch::Tensor& b, LatentNorm norm) {
  auto diff = a - b;
  return norm == LatentNorm::L1 ? diff.abs().sum(-1) : diff.pow(2).sum(-1).add(1e-12).sqrt();
}

inline torch::Tensor reconstruction_error(const DecoderOutput& pred, const BatchTensors& real) {
  return ((real.r - pred.r).pow(2) + (real.s_next - pred.s_next).pow(2).sum(-1)).mean();
}

inline BisimLossTerms loss_bisim(Encoder& encoder, TaskDecoder& decoder, TaskDecoder& idx_decoder,
                                 const BisimInputs& in, const BisimCoefficients& c) {
  if (c.bisim < 0 || c.recon < 0 || c.onoff < 0 || c.anchor < 0) throw ConfigError("loss coefficients must be non-negative");
  BisimLossTerms out;
  auto z_off = encoder->forward(in.off.features());
  out.z_off = z_off;

  auto partner = torch::tensor(in.partner, torch::kLong);
  std::vector<std::int64_t> partner_task;
  for (auto p : in.partner) partner_task.push_back(in.task_index.at(p));
  auto target = bisim_distances(idx_decoder, in.task_index, partner_task, in.pair_s, in.pair_a, c.eta);
  out.bisim = (latent_distance(z_off, z_off.index_select(0, partner), c.norm) - target).pow(2).mean();

  auto idx_pred = idx_decoder->forward(in.off.s, in.off.a, one_hot(in.task_index, idx_decoder->cond_dim));
  out.recon_idx = reconstruction_error(idx_pred, in.off);
  out.recon = reconstruction_error(decoder->forward(in.off.s, in.off.a, z_off), in.off);

  auto z_on = encoder->forward(in.on.features());
  out.onoff = (z_on - in.z_off_target.detach()).pow(2).sum(-1).mean();

  out.anchor = z_off.pow(2).sum(-1).mean();

  out.total = c.bisim * out.bisim + c.recon * (out.recon_idx + out.recon) + c.onoff * out.onoff + c.anchor * out.anchor;
  return out;
}

}  // namespace tavt
