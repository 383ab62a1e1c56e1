#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace tavt::testing {

struct GradCheck {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;  // |fd - ag| / max(|fd|, |ag|) over entries above the floor
  std::int64_t checked = 0;
  std::string worst;
};

/// Central differences of `loss` with respect to every entry of `params`,
/// compared with autograd. `loss` must be a pure function of the parameters.
inline GradCheck check_gradients(const std::function<torch::Tensor()>& loss, const std::vector<torch::Tensor>& params,
                                 double h = 1e-6, double floor = 1e-7) {
  for (auto p : params)
    if (p.grad().defined()) p.mutable_grad().zero_();
  auto l = loss();
  auto grads = torch::autograd::grad({l}, params, {}, false, false, /*allow_unused=*/true);
  GradCheck out;
  // the loss may itself differentiate (gradient penalties), so only the writes run without grad
  auto set = [](torch::Tensor flat, std::int64_t i, double v) {
    torch::NoGradGuard guard;
    flat[i] = v;
  };
  auto value = [&] { return loss().item<double>(); };
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto g = grads[k].defined() ? grads[k].contiguous() : torch::zeros_like(p);
    auto flat = p.view({-1});
    auto gflat = g.view({-1});
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      const double orig = flat[i].item<double>();
      set(flat, i, orig + h);
      const double up = value();
      set(flat, i, orig - h);
      const double down = value();
      set(flat, i, orig);
      const double fd = (up - down) / (2.0 * h);
      const double ag = gflat[i].item<double>();
      const double abs_err = std::abs(fd - ag);
      const double scale = std::max(std::abs(fd), std::abs(ag));
      out.max_abs_err = std::max(out.max_abs_err, abs_err);
      if (scale > floor) {
        const double rel = abs_err / scale;
        if (rel > out.max_rel_err) {
          out.max_rel_err = rel;
          out.worst = "param " + std::to_string(k) + "[" + std::to_string(i) + "] fd=" + std::to_string(fd) +
                      " ag=" + std::to_string(ag);
        }
      }
      ++out.checked;
    }
  }
  return out;
}

/// Largest |dloss| / |dparam| over single-entry perturbations of `params`,
/// taken along the autograd graph. A detached path contributes exactly 0 even
/// though the loss value still depends on it numerically.
inline double graph_sensitivity(const std::function<torch::Tensor()>& loss, const std::vector<torch::Tensor>& params) {
  auto l = loss();
  if (!l.requires_grad()) return 0.0;
  auto grads = torch::autograd::grad({l}, params, {}, false, false, /*allow_unused=*/true);
  double worst = 0.0;
  for (const auto& g : grads)
    if (g.defined()) worst = std::max(worst, g.abs().max().item<double>());
  return worst;
}

inline std::vector<torch::Tensor> params_of(const torch::nn::Module& m) { return m.parameters(); }

template <class... Ms>
std::vector<torch::Tensor> params_of(const torch::nn::Module& first, const Ms&... rest) {
  auto out = first.parameters();
  (
      [&] {
        auto more = rest.parameters();
        out.insert(out.end(), more.begin(), more.end());
      }(),
      ...);
  return out;
}

}  // namespace tavt::testing
