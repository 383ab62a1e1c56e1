#pragma once

#include <torch/torch.h>

#include <vector>

#include "tavt/buffers.hpp"
#include "tavt/envs.hpp"
#include "tavt/nn.hpp"
#include "tavt/rng.hpp"

namespace tavt::testing {

/// Random transitions with finite entries; shapes [n, ...] or [b, n, ...].
inline BatchTensors random_batch(Rng& rng, std::vector<std::int64_t> lead, int sdim = kStateDim,
                                 int adim = kActionDim) {
  auto with = [&](std::int64_t last) {
    auto shape = lead;
    shape.push_back(last);
    return rng.normal_tensor(shape);
  };
  return {with(sdim), with(adim).tanh(), rng.normal_tensor(lead), with(sdim)};
}

inline Transition random_transition(Rng& rng, int sdim = kStateDim, int adim = kActionDim) {
  Transition t;
  for (int i = 0; i < sdim; ++i) t.s.push_back(rng.normal());
  for (int i = 0; i < adim; ++i) t.a.push_back(rng.uniform(-1, 1));
  t.r = rng.normal();
  for (int i = 0; i < sdim; ++i) t.s_next.push_back(rng.normal());
  return t;
}

/// Real transitions of `task` under uniformly random actions.
inline std::vector<Transition> env_transitions(const PointEnv& env, const TaskSpec& task, int episodes, Rng& rng) {
  std::vector<Transition> out;
  for (int e = 0; e < episodes; ++e) {
    auto s = env.reset(task, rng);
    for (int t = 0; t < env.settings().horizon; ++t) {
      const double a[] = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
      auto res = env.step(task, s, a);
      const auto o = s.observation();
      const auto o2 = res.next.observation();
      out.push_back({{o.begin(), o.end()}, {a, a + 2}, res.reward, {o2.begin(), o2.end()}, res.done});
      s = res.next;
    }
  }
  return out;
}

inline void fill(ReplayFifo& f, const std::vector<Transition>& ts) { f.store(ts); }

}  // namespace tavt::testing
