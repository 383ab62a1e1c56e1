#pragma once

// Point-robot task families. Each family is a damped double integrator in the
// plane; the task parameter changes the reward (goal, target velocity) or the
// dynamics and reward together (mass scale).

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tavt/errors.hpp"
#include "tavt/rng.hpp"

namespace tavt {

inline constexpr int kStateDim = 4;   // position (2), velocity (2)
inline constexpr int kActionDim = 2;

enum class TaskFamily { PointGoal, PointVel, PointMass };
enum class Split { Train, Test };

inline std::string_view to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::PointGoal: return "point-goal";
    case TaskFamily::PointVel: return "point-vel";
    case TaskFamily::PointMass: return "point-mass";
  }
  return "?";
}

inline TaskFamily parse_family(std::string_view name) {
  if (name == "point-goal") return TaskFamily::PointGoal;
  if (name == "point-vel") return TaskFamily::PointVel;
  if (name == "point-mass") return TaskFamily::PointMass;
  throw ConfigError("unknown task family '" + std::string(name) + "'");
}

inline std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

/// True when the task changes the transition function, not only the reward.
inline bool dynamics_vary(TaskFamily f) { return f == TaskFamily::PointMass; }

struct TaskSpec {
  TaskFamily family = TaskFamily::PointGoal;
  /// point-goal: {goal_x, goal_y}; point-vel: {target_velocity}; point-mass: {mass_scale}
  std::vector<double> params;
  Split split = Split::Train;

  bool operator==(const TaskSpec&) const = default;
};

struct Interval {
  double lo;
  double hi;  // half-open
  bool contains(double x) const { return x >= lo && x < hi; }
  double length() const { return hi - lo; }
};

/// Train/test task spaces. The train space is a union of half-open intervals over
/// the family's scalar parameter (goal radius, target velocity, mass scale); the
/// test set is a fixed list of values that lies outside it.
struct TaskSpace {
  std::vector<Interval> train;
  Interval declared;  // the whole space M
  std::vector<TaskSpec> test;
};

namespace detail {
// Velocities are expressed in length/step; the toy robot tops out near 0.4.
inline constexpr double kVelocityScale = 0.1;
inline constexpr double kTestRadius = 1.75;
}  // namespace detail

inline TaskSpace task_space(TaskFamily family) {
  TaskSpace space;
  switch (family) {
    case TaskFamily::PointGoal: {
      space.train = {{0.0, 1.0}, {2.5, 3.0}};
      space.declared = {0.0, 3.0};
      for (int k = 0; k < 4; ++k) {
        const double angle = k * std::numbers::pi / 2.0;
        space.test.push_back({family,
                              {detail::kTestRadius * std::cos(angle), detail::kTestRadius * std::sin(angle)},
                              Split::Test});
      }
      break;
    }
    case TaskFamily::PointVel: {
      const double s = detail::kVelocityScale;
      space.train = {{0.0, 0.5 * s}, {3.0 * s, 3.5 * s}};
      space.declared = {0.0, 3.5 * s};
      for (double v : {0.75, 1.25, 1.75, 2.25, 2.75}) space.test.push_back({family, {v * s}, Split::Test});
      break;
    }
    case TaskFamily::PointMass: {
      space.train = {{0.25, 0.5}, {3.0, 3.5}};
      space.declared = {0.25, 3.5};
      for (double m : {0.75, 1.25, 1.75, 2.25, 2.75}) space.test.push_back({family, {m}, Split::Test});
      break;
    }
  }
  return space;
}

/// The scalar that train/test membership is defined over.
inline double task_scalar(const TaskSpec& task) {
  if (task.family == TaskFamily::PointGoal) return std::hypot(task.params.at(0), task.params.at(1));
  return task.params.at(0);
}

inline bool in_train_space(const TaskSpec& task) {
  const double x = task_scalar(task);
  for (const auto& iv : task_space(task.family).train)
    if (iv.contains(x)) return true;
  return false;
}

inline bool in_declared_space(const TaskSpec& task) {
  const double x = task_scalar(task);
  const auto declared = task_space(task.family).declared;
  return x >= declared.lo && x <= declared.hi;
}

/// Uniform draw from a union of intervals, weighted by length.
inline double sample_union(std::span<const Interval> parts, Rng& rng) {
  double total = 0.0;
  for (const auto& p : parts) total += p.length();
  double u = rng.uniform(0.0, total);
  for (const auto& p : parts) {
    if (u < p.length()) return p.lo + u;
    u -= p.length();
  }
  return parts.back().hi - 1e-12;
}

/// Train split: n tasks uniform over M_train. Test split: the fixed OOD set, cycled
/// when n exceeds its size.
inline std::vector<TaskSpec> sample_tasks(TaskFamily family, Split split, std::size_t n, Rng& rng) {
  const auto space = task_space(family);
  std::vector<TaskSpec> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (split == Split::Test) {
      out.push_back(space.test[i % space.test.size()]);
      continue;
    }
    const double x = sample_union(space.train, rng);
    if (family == TaskFamily::PointGoal) {
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      out.push_back({family, {x * std::cos(angle), x * std::sin(angle)}, Split::Train});
    } else {
      out.push_back({family, {x}, Split::Train});
    }
  }
  return out;
}

inline std::vector<TaskSpec> sample_tasks(TaskFamily family, Split split, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return sample_tasks(family, split, n, rng);
}

struct EnvState {
  std::array<double, 2> position{0.0, 0.0};
  std::array<double, 2> velocity{0.0, 0.0};
  int t = 0;

  std::array<double, kStateDim> observation() const {
    return {position[0], position[1], velocity[0], velocity[1]};
  }
  bool operator==(const EnvState&) const = default;
};

struct EnvSettings {
  int horizon = 64;
  double init_noise = 0.0;  // stddev of the initial position
  double accel = 0.2;       // velocity change per unit action at unit mass
  double damping = 0.5;     // velocity retained per step
  double ctrl_cost = 0.8;   // point-mass quadratic action cost
};

struct StepResult {
  EnvState next;
  double reward = 0.0;
  bool done = false;
};

class PointEnv {
 public:
  explicit PointEnv(EnvSettings settings = {}) : settings_(settings) {
    if (settings_.horizon < 1) throw ConfigError("horizon must be >= 1");
  }

  const EnvSettings& settings() const { return settings_; }

  EnvState reset(const TaskSpec& /*task*/, Rng& rng) const {
    EnvState s;
    if (settings_.init_noise > 0.0) {
      s.position = {rng.normal(0.0, settings_.init_noise), rng.normal(0.0, settings_.init_noise)};
    }
    return s;
  }

  StepResult step(const TaskSpec& task, const EnvState& state, std::span<const double> action) const {
    if (action.size() != kActionDim) throw InputError("action must have 2 components");
    std::array<double, 2> a{};
    for (int i = 0; i < kActionDim; ++i) {
      if (!std::isfinite(action[i])) throw InputError("non-finite action");
      a[i] = std::clamp(action[i], -1.0, 1.0);
    }
    const double mass = task.family == TaskFamily::PointMass ? task.params.at(0) : 1.0;
    StepResult out;
    auto& n = out.next;
    for (int i = 0; i < 2; ++i) {
      n.velocity[i] = settings_.damping * state.velocity[i] + settings_.accel * a[i] / mass;
      n.position[i] = state.position[i] + n.velocity[i];
    }
    n.t = state.t + 1;
    out.done = n.t >= settings_.horizon;
    switch (task.family) {
      case TaskFamily::PointGoal:
        out.reward = -(std::abs(n.position[0] - task.params[0]) + std::abs(n.position[1] - task.params[1]));
        break;
      case TaskFamily::PointVel:
        out.reward = -std::abs(n.velocity[0] - task.params[0]);
        break;
      case TaskFamily::PointMass:
        out.reward = n.velocity[0] - settings_.ctrl_cost * (a[0] * a[0] + a[1] * a[1]);
        break;
    }
    return out;
  }

 private:
  EnvSettings settings_;
};

}  // namespace tavt
