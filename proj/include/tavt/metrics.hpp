#pragma once

// Evaluation metrics and line-delimited JSON records.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "tavt/envs.hpp"
#include "tavt/errors.hpp"
#include "tavt/nn.hpp"
#include "tavt/representation.hpp"

namespace tavt {

using json = nlohmann::json;

/// Average ranks (1-based), ties sharing the mean of their positions.
inline std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InputError("pearson needs two equal-length samples of size >= 2");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(ranks(x), ranks(y));
}

struct ContextDifference {
  double reward = 0.0;  // mean |r - r_hat|
  double state = 0.0;   // mean ||s' - s'_hat||_2
  bool state_trivial = false;  // next states are never replaced for this family
};

/// Encodes each task's real context, regenerates it through the decoder from the
/// same (s, a) and reports the mean reward and next-state discrepancy.
inline ContextDifference context_difference(TaskDecoder& decoder, Encoder& encoder,
                                            const std::vector<BatchTensors>& contexts) {
  if (contexts.empty()) throw InputError("no contexts");
  torch::NoGradGuard guard;
  ContextDifference out;
  for (const auto& c : contexts) {
    auto z = encoder->forward(c.features());
    auto pred = decoder->forward(c.s, c.a, z);
    out.reward += (pred.r - c.r).abs().mean().item<double>();
    out.state += (pred.s_next - c.s_next).pow(2).sum(-1).sqrt().mean().item<double>();
  }
  out.reward /= static_cast<double>(contexts.size());
  out.state /= static_cast<double>(contexts.size());
  return out;
}

/// One metric line. Non-finite scalars are written as null and listed under "nonfinite".
struct MetricRecord {
  int epoch = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::map<std::string, double> scalars;

  json to_json() const {
    json j;
    j["epoch"] = epoch;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    json values = json::object();
    json bad = json::array();
    for (const auto& [k, v] : scalars) {
      if (std::isfinite(v)) {
        values[k] = v;
      } else {
        values[k] = nullptr;
        bad.push_back(k);
      }
    }
    j["metrics"] = values;
    if (!bad.empty()) j["nonfinite"] = bad;
    return j;
  }

  static MetricRecord from_json(const json& j) {
    MetricRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [k, v] : j.at("metrics").items())
      r.scalars[k] = v.is_null() ? std::nan("") : v.get<double>();
    return r;
  }
};

/// Appends one line and flushes, so the file stays parseable mid-run.
inline void append_jsonl(const std::string& path, const json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw UnavailableError("cannot open '" + path + "' for append");
  out << record.dump() << '\n';
  out.flush();
}

inline std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UnavailableError("cannot read '" + path + "'");
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

struct LatentRecord {
  int task = 0;
  TaskSpec spec;
  std::string kind;
  std::vector<double> z;
};

inline std::vector<double> to_vector(const torch::Tensor& t) {
  auto c = t.detach().to(kReal).contiguous().reshape({-1});
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

inline json to_json(const LatentRecord& r) {
  return {{"task", r.task},
          {"family", std::string(to_string(r.spec.family))},
          {"split", std::string(to_string(r.spec.split))},
          {"params", r.spec.params},
          {"kind", r.kind},
          {"z", r.z}};
}

/// Writes one record per task, replacing the file.
inline void latent_export(const std::string& path, const std::vector<LatentRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UnavailableError("cannot write '" + path + "'");
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

/// Encodes one context per task and writes the latents.
inline std::vector<LatentRecord> latent_export(Encoder& encoder, const std::vector<TaskSpec>& tasks,
                                               const std::vector<BatchTensors>& contexts, const std::string& kind,
                                               const std::string& path) {
  if (tasks.size() != contexts.size()) throw InputError("one context per task required");
  torch::NoGradGuard guard;
  std::vector<LatentRecord> records;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    records.push_back({static_cast<int>(i), tasks[i], kind, to_vector(encoder->forward(contexts[i].features()))});
  latent_export(path, records);
  return records;
}

}  // namespace tavt
