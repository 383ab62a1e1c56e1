#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace tavt {

/// Seeded random stream. Every stochastic component of the library draws from
/// one of these so that runs are reproducible and checkpointable; torch's global
/// generator is only used for dropout masks (reseeded per epoch by the trainer).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double exponential(double rate = 1.0) { return std::exponential_distribution<double>(rate)(engine_); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  /// k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> choose_distinct(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + index(n - i)]);
    pool.resize(k);
    return pool;
  }

  torch::Tensor normal_tensor(at::IntArrayRef shape) {
    auto out = torch::empty(shape, torch::kFloat64);
    auto* p = out.data_ptr<double>();
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::int64_t i = 0; i < out.numel(); ++i) p[i] = dist(engine_);
    return out;
  }

  torch::Tensor uniform_tensor(at::IntArrayRef shape, double lo = 0.0, double hi = 1.0) {
    auto out = torch::empty(shape, torch::kFloat64);
    auto* p = out.data_ptr<double>();
    std::uniform_real_distribution<double> dist(lo, hi);
    for (std::int64_t i = 0; i < out.numel(); ++i) p[i] = dist(engine_);
    return out;
  }

  /// Derives an independent child stream; used to give evaluation its own stream.
  Rng fork(std::uint64_t salt) {
    std::seed_seq seq{static_cast<std::uint32_t>(engine_()), static_cast<std::uint32_t>(salt),
                      static_cast<std::uint32_t>(salt >> 32)};
    std::mt19937_64 child(seq);
    return Rng(child);
  }

  std::uint64_t next_u64() { return engine_(); }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  explicit Rng(std::mt19937_64 engine) : engine_(engine) {}
  std::mt19937_64 engine_;
};

/// Stable 64-bit mix of two values (splitmix64 finalizer); used to derive stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace tavt
