#pragma once

// Per-task replay storage. Each training task owns an on-policy FIFO (filled by
// the exploration policy) and an off-policy FIFO (filled by the RL policy).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "tavt/errors.hpp"
#include "tavt/rng.hpp"

namespace tavt {

struct Transition {
  std::vector<double> s;
  std::vector<double> a;
  double r = 0.0;
  std::vector<double> s_next;
  bool done = false;

  bool operator==(const Transition&) const = default;
};

/// Column-wise batch of transitions with fixed dimensions.
struct TransitionBatch {
  int state_dim = 0;
  int action_dim = 0;
  std::vector<double> s, a, r, s_next;
  std::vector<std::uint8_t> done;

  TransitionBatch() = default;
  TransitionBatch(int sdim, int adim) : state_dim(sdim), action_dim(adim) {}

  std::size_t size() const { return r.size(); }
  bool empty() const { return r.empty(); }

  void push_back(const Transition& t) {
    s.insert(s.end(), t.s.begin(), t.s.end());
    a.insert(a.end(), t.a.begin(), t.a.end());
    r.push_back(t.r);
    s_next.insert(s_next.end(), t.s_next.begin(), t.s_next.end());
    done.push_back(t.done ? 1 : 0);
  }

  Transition at(std::size_t i) const {
    Transition t;
    t.s.assign(s.begin() + i * state_dim, s.begin() + (i + 1) * state_dim);
    t.a.assign(a.begin() + i * action_dim, a.begin() + (i + 1) * action_dim);
    t.r = r[i];
    t.s_next.assign(s_next.begin() + i * state_dim, s_next.begin() + (i + 1) * state_dim);
    t.done = done[i] != 0;
    return t;
  }
};

enum class BufferKind { On, Off };
enum class ContextSource { On, Off, Virtual };

/// A fixed-size batch of N_c transitions from one task; the encoder's input.
struct Context {
  TransitionBatch transitions;
  ContextSource source = ContextSource::Off;
  std::size_t size() const { return transitions.size(); }
};

/// Bounded FIFO; the oldest transition is evicted once capacity is reached.
class ReplayFifo {
 public:
  ReplayFifo(int state_dim, int action_dim, std::size_t capacity)
      : state_dim_(state_dim), action_dim_(action_dim), capacity_(capacity) {
    if (capacity == 0) throw ConfigError("buffer capacity must be positive");
    data_.reserve(std::min<std::size_t>(capacity, 4096) * width());
  }

  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  void clear() {
    data_.clear();
    head_ = 0;
    size_ = 0;
  }

  void store(const Transition& t) {
    if (static_cast<int>(t.s.size()) != state_dim_ || static_cast<int>(t.s_next.size()) != state_dim_ ||
        static_cast<int>(t.a.size()) != action_dim_)
      throw InputError("transition dimensions do not match the buffer");
    std::size_t slot;
    if (size_ < capacity_) {
      slot = (head_ + size_) % capacity_;
      if (data_.size() < (slot + 1) * width()) data_.resize((slot + 1) * width());
      ++size_;
    } else {
      slot = head_;
      head_ = (head_ + 1) % capacity_;
    }
    double* row = data_.data() + slot * width();
    std::copy(t.s.begin(), t.s.end(), row);
    std::copy(t.a.begin(), t.a.end(), row + state_dim_);
    row[state_dim_ + action_dim_] = t.r;
    std::copy(t.s_next.begin(), t.s_next.end(), row + state_dim_ + action_dim_ + 1);
    row[width() - 1] = t.done ? 1.0 : 0.0;
  }

  void store(std::span<const Transition> ts) {
    for (const auto& t : ts) store(t);
  }

  /// i-th retained transition, oldest first.
  Transition at(std::size_t i) const {
    if (i >= size_) throw InputError("buffer index out of range");
    const double* row = data_.data() + ((head_ + i) % capacity_) * width();
    Transition t;
    t.s.assign(row, row + state_dim_);
    t.a.assign(row + state_dim_, row + state_dim_ + action_dim_);
    t.r = row[state_dim_ + action_dim_];
    t.s_next.assign(row + state_dim_ + action_dim_ + 1, row + 2 * state_dim_ + action_dim_ + 1);
    t.done = row[width() - 1] != 0.0;
    return t;
  }

  /// n transitions uniformly with replacement. Never mutates the buffer.
  TransitionBatch sample(std::size_t n, Rng& rng) const {
    if (size_ == 0) throw UnavailableError("cannot sample from an empty buffer");
    TransitionBatch out(state_dim_, action_dim_);
    out.s.reserve(n * state_dim_);
    out.a.reserve(n * action_dim_);
    out.r.reserve(n);
    out.s_next.reserve(n * state_dim_);
    out.done.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double* row = data_.data() + ((head_ + rng.index(size_)) % capacity_) * width();
      out.s.insert(out.s.end(), row, row + state_dim_);
      out.a.insert(out.a.end(), row + state_dim_, row + state_dim_ + action_dim_);
      out.r.push_back(row[state_dim_ + action_dim_]);
      out.s_next.insert(out.s_next.end(), row + state_dim_ + action_dim_ + 1,
                        row + 2 * state_dim_ + action_dim_ + 1);
      out.done.push_back(row[width() - 1] != 0.0 ? 1 : 0);
    }
    return out;
  }

  /// Every retained transition, oldest first.
  TransitionBatch all() const {
    TransitionBatch out(state_dim_, action_dim_);
    for (std::size_t i = 0; i < size_; ++i) out.push_back(at(i));
    return out;
  }

 private:
  std::size_t width() const { return static_cast<std::size_t>(2 * state_dim_ + action_dim_ + 2); }

  int state_dim_;
  int action_dim_;
  std::size_t capacity_;
  std::vector<double> data_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
};

struct BufferCapacities {
  std::size_t on = 10'000;
  std::size_t off = 100'000;
};

struct TaskBuffers {
  int task_index;
  ReplayFifo on;
  ReplayFifo off;

  TaskBuffers(int index, int state_dim, int action_dim, BufferCapacities caps = {})
      : task_index(index), on(state_dim, action_dim, caps.on), off(state_dim, action_dim, caps.off) {}

  ReplayFifo& get(BufferKind k) { return k == BufferKind::On ? on : off; }
  const ReplayFifo& get(BufferKind k) const { return k == BufferKind::On ? on : off; }
};

inline void store(TaskBuffers& buffers, BufferKind which, std::span<const Transition> transitions) {
  buffers.get(which).store(transitions);
}

inline Context sample_context(const TaskBuffers& buffers, BufferKind which, std::size_t n_c, Rng& rng) {
  Context c;
  c.transitions = buffers.get(which).sample(n_c, rng);
  c.source = which == BufferKind::On ? ContextSource::On : ContextSource::Off;
  return c;
}

inline TransitionBatch sample_rl_batch(const TaskBuffers& buffers, std::size_t batch_size, Rng& rng) {
  return buffers.off.sample(batch_size, rng);
}

// Buffer checkpoint file, little-endian:
//   bytes 0..7   magic "TAVTBUF1"
//   u32          state_dim
//   u32          action_dim
//   u64          count
//   count records, oldest first, each:
//     f64[state_dim] s, f64[action_dim] a, f64 r, f64[state_dim] s_next, u8 done
namespace detail {
inline constexpr char kBufferMagic[8] = {'T', 'A', 'V', 'T', 'B', 'U', 'F', '1'};

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw InputError("truncated buffer file");
  return v;
}
}  // namespace detail

inline void write_buffer(std::ostream& os, const ReplayFifo& fifo) {
  os.write(detail::kBufferMagic, sizeof(detail::kBufferMagic));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(fifo.state_dim()));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(fifo.action_dim()));
  detail::write_pod<std::uint64_t>(os, fifo.size());
  for (std::size_t i = 0; i < fifo.size(); ++i) {
    const auto t = fifo.at(i);
    for (double v : t.s) detail::write_pod(os, v);
    for (double v : t.a) detail::write_pod(os, v);
    detail::write_pod(os, t.r);
    for (double v : t.s_next) detail::write_pod(os, v);
    detail::write_pod<std::uint8_t>(os, t.done ? 1 : 0);
  }
}

/// Appends the records of a buffer file into `fifo` (capacity rules apply).
inline void read_buffer(std::istream& is, ReplayFifo& fifo) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kBufferMagic, sizeof(magic)) != 0)
    throw InputError("not a buffer file");
  const auto sdim = detail::read_pod<std::uint32_t>(is);
  const auto adim = detail::read_pod<std::uint32_t>(is);
  if (static_cast<int>(sdim) != fifo.state_dim() || static_cast<int>(adim) != fifo.action_dim())
    throw InputError("buffer file dimensions do not match");
  const auto count = detail::read_pod<std::uint64_t>(is);
  for (std::uint64_t k = 0; k < count; ++k) {
    Transition t;
    t.s.resize(sdim);
    t.a.resize(adim);
    t.s_next.resize(sdim);
    for (auto& v : t.s) v = detail::read_pod<double>(is);
    for (auto& v : t.a) v = detail::read_pod<double>(is);
    t.r = detail::read_pod<double>(is);
    for (auto& v : t.s_next) v = detail::read_pod<double>(is);
    t.done = detail::read_pod<std::uint8_t>(is) != 0;
    fifo.store(t);
  }
}

inline void save_buffer(const std::string& path, const ReplayFifo& fifo) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path);
  write_buffer(os, fifo);
}

inline void load_buffer(const std::string& path, ReplayFifo& fifo) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UnavailableError("cannot open " + path);
  read_buffer(is, fifo);
}

}  // namespace tavt
