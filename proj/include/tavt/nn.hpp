#pragma once

#include <torch/torch.h>

#include <cmath>
#include <string>
#include <vector>

#include "tavt/buffers.hpp"
#include "tavt/rng.hpp"

namespace tavt {

inline constexpr auto kReal = torch::kFloat64;

inline torch::TensorOptions real_options() { return torch::TensorOptions().dtype(kReal); }

/// Feed-forward ReLU network. The output layer is linear unless `activate_output`.
struct MlpImpl : torch::nn::Module {
  MlpImpl(int in, std::vector<int> hidden, int out, bool activate_output = false, double dropout = 0.0)
      : activate_output(activate_output), dropout(dropout) {
    int prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers.push_back(register_module("fc" + std::to_string(i), torch::nn::Linear(prev, hidden[i])));
      prev = hidden[i];
    }
    layers.push_back(register_module("out", torch::nn::Linear(prev, out)));
    to(kReal);
  }

  torch::Tensor forward(torch::Tensor x) {
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
      x = torch::relu(layers[i]->forward(x));
      if (dropout > 0.0) x = torch::dropout(x, dropout, is_training());
    }
    x = layers.back()->forward(x);
    return activate_output ? torch::relu(x) : x;
  }

  torch::nn::Linear& output_layer() { return layers.back(); }

  std::vector<torch::nn::Linear> layers;
  bool activate_output;
  double dropout;
};
TORCH_MODULE(Mlp);

/// Fan-in uniform initialization drawn from `rng` so that parameter init is
/// reproducible independently of torch's global generator.
inline void init_parameters(torch::nn::Module& module, Rng& rng) {
  torch::NoGradGuard guard;
  for (auto& sub : module.modules(/*include_self=*/true)) {
    if (auto* lin = sub->as<torch::nn::Linear>()) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(lin->weight.size(1)));
      lin->weight.copy_(rng.uniform_tensor(lin->weight.sizes(), -bound, bound));
      if (lin->bias.defined()) lin->bias.copy_(rng.uniform_tensor(lin->bias.sizes(), -bound, bound));
    }
  }
}

/// target <- (1 - tau) * target + tau * source, parameter by parameter.
inline void soft_update(torch::nn::Module& target, const torch::nn::Module& source, double tau) {
  torch::NoGradGuard guard;
  auto tp = target.parameters();
  auto sp = source.parameters();
  TORCH_CHECK(tp.size() == sp.size(), "soft_update: parameter count mismatch");
  for (std::size_t i = 0; i < tp.size(); ++i) tp[i].mul_(1.0 - tau).add_(sp[i], tau);
}

inline void hard_update(torch::nn::Module& target, const torch::nn::Module& source) {
  soft_update(target, source, 1.0);
}

/// Turns off requires_grad on a module's parameters for the guard's lifetime.
class FreezeGuard {
 public:
  explicit FreezeGuard(torch::nn::Module& module) : params_(module.parameters()) {
    for (auto& p : params_) {
      flags_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(flags_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<torch::Tensor> params_;
  std::vector<bool> flags_;
};

inline bool all_finite(const torch::Tensor& t) { return torch::isfinite(t).all().item<bool>(); }

inline std::int64_t parameter_count(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

/// Tensor views of a transition batch: s [N,S], a [N,A], r [N], s_next [N,S].
struct BatchTensors {
  torch::Tensor s, a, r, s_next;

  std::int64_t size() const { return r.size(0); }

  /// Per-transition encoder features [s, a, r, s'] of shape [N, 2S+A+1].
  torch::Tensor features() const { return torch::cat({s, a, r.unsqueeze(-1), s_next}, -1); }
};

inline BatchTensors to_tensors(const TransitionBatch& b) {
  const auto n = static_cast<std::int64_t>(b.size());
  auto from = [](const std::vector<double>& v, std::vector<std::int64_t> shape) {
    return torch::from_blob(const_cast<double*>(v.data()), shape, real_options()).clone();
  };
  return {from(b.s, {n, b.state_dim}), from(b.a, {n, b.action_dim}), from(b.r, {n}),
          from(b.s_next, {n, b.state_dim})};
}

/// Stacks equal-sized batches into [B, N, ...] tensors.
inline BatchTensors stack(const std::vector<BatchTensors>& parts) {
  std::vector<torch::Tensor> s, a, r, sn;
  for (const auto& p : parts) {
    s.push_back(p.s);
    a.push_back(p.a);
    r.push_back(p.r);
    sn.push_back(p.s_next);
  }
  return {torch::stack(s), torch::stack(a), torch::stack(r), torch::stack(sn)};
}

inline int feature_dim(int state_dim, int action_dim) { return 2 * state_dim + action_dim + 1; }

}  // namespace tavt
