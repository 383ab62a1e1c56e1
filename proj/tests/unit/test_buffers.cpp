#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "tavt/buffers.hpp"

using namespace tavt;

namespace {

Transition make_transition(double v, int sdim = 4, int adim = 2) {
  Transition t;
  for (int i = 0; i < sdim; ++i) t.s.push_back(v + 0.1 * i);
  for (int i = 0; i < adim; ++i) t.a.push_back(-v + 0.01 * i);
  t.r = v * v;
  for (int i = 0; i < sdim; ++i) t.s_next.push_back(v + 1.0 + 0.1 * i);
  t.done = static_cast<int>(v) % 3 == 0;
  return t;
}

std::vector<Transition> make_transitions(int n, double offset = 0.0) {
  std::vector<Transition> out;
  for (int i = 0; i < n; ++i) out.push_back(make_transition(offset + i));
  return out;
}

bool contains(const ReplayFifo& f, const Transition& t) {
  for (std::size_t i = 0; i < f.size(); ++i)
    if (f.at(i) == t) return true;
  return false;
}

}  // namespace

TEST(Buffers, FifoEvictsOldestAtCapacity) {
  TaskBuffers b(0, 4, 2, {8, 8});
  auto ts = make_transitions(10);
  store(b, BufferKind::On, ts);
  ASSERT_EQ(b.on.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(b.on.at(i), ts[i + 2]);
  EXPECT_TRUE(b.off.empty());
}

TEST(Buffers, StoringNothingIsANoOp) {
  TaskBuffers b(0, 4, 2);
  store(b, BufferKind::Off, make_transitions(3));
  std::vector<Transition> none;
  store(b, BufferKind::Off, none);
  EXPECT_EQ(b.off.size(), 3u);
}

TEST(Buffers, InterleavedStoreAndSampleKeepsEveryRetainedTransitionExact) {
  ReplayFifo f(4, 2, 16);
  Rng rng(3);
  std::vector<Transition> all;
  for (int round = 0; round < 6; ++round) {
    auto ts = make_transitions(5, 100.0 * round + 0.123456789);
    f.store(ts);
    all.insert(all.end(), ts.begin(), ts.end());
    auto sample = f.sample(7, rng);
    for (std::size_t i = 0; i < sample.size(); ++i) EXPECT_TRUE(contains(f, sample.at(i)));
  }
  const std::size_t keep = std::min<std::size_t>(16, all.size());
  ASSERT_EQ(f.size(), keep);
  for (std::size_t i = 0; i < keep; ++i) EXPECT_EQ(f.at(i), all[all.size() - keep + i]);
}

TEST(Buffers, DimensionMismatchIsAnInputError) {
  ReplayFifo f(4, 2, 8);
  EXPECT_THROW(f.store(make_transition(1.0, 3, 2)), InputError);
  EXPECT_THROW(f.store(make_transition(1.0, 4, 1)), InputError);
  EXPECT_TRUE(f.empty());
}

TEST(Buffers, ZeroCapacityIsAConfigError) { EXPECT_THROW(ReplayFifo(4, 2, 0), ConfigError); }

TEST(Buffers, SingleTransitionContextRepeats) {
  TaskBuffers b(0, 4, 2);
  auto t = make_transition(2.5);
  b.off.store(t);
  Rng rng(0);
  auto c = sample_context(b, BufferKind::Off, 4, rng);
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c.source, ContextSource::Off);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(c.transitions.at(i), t);
}

TEST(Buffers, SameSeedSameContext) {
  TaskBuffers b(0, 4, 2);
  store(b, BufferKind::On, make_transitions(50));
  Rng r1(77), r2(77);
  auto c1 = sample_context(b, BufferKind::On, 32, r1);
  auto c2 = sample_context(b, BufferKind::On, 32, r2);
  EXPECT_EQ(c1.source, ContextSource::On);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(c1.transitions.at(i), c2.transitions.at(i));
}

TEST(Buffers, ContextMembersComeFromTheBuffer) {
  TaskBuffers b(0, 4, 2, {10, 1000});
  store(b, BufferKind::Off, make_transitions(1000));
  Rng rng(5);
  auto c = sample_context(b, BufferKind::Off, 128, rng);
  ASSERT_EQ(c.size(), 128u);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_TRUE(contains(b.off, c.transitions.at(i)));
}

TEST(Buffers, SamplingIsUniformWithReplacement) {
  ReplayFifo f(4, 2, 100);
  f.store(make_transitions(4));
  Rng rng(11);
  auto s = f.sample(40000, rng);
  std::map<double, int> counts;
  for (double r : s.r) counts[r]++;
  ASSERT_EQ(counts.size(), 4u);
  for (const auto& [_, n] : counts) EXPECT_NEAR(n / 40000.0, 0.25, 0.01);
}

TEST(Buffers, EmptyBufferIsUnavailable) {
  TaskBuffers b(0, 4, 2);
  Rng rng(0);
  EXPECT_THROW(sample_context(b, BufferKind::On, 4, rng), UnavailableError);
  EXPECT_THROW(sample_rl_batch(b, 4, rng), UnavailableError);
}

TEST(Buffers, RlBatchDrawsFromOffPolicyOnly) {
  TaskBuffers b(0, 4, 2);
  store(b, BufferKind::On, make_transitions(5, 1000.0));
  b.off.store(make_transition(1.0));
  Rng rng(2);
  auto batch = sample_rl_batch(b, 6, rng);
  ASSERT_EQ(batch.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(batch.at(i), make_transition(1.0));
}

TEST(Buffers, RlBatchIsDeterministicAndFromBuffer) {
  TaskBuffers b(0, 4, 2);
  store(b, BufferKind::Off, make_transitions(300));
  Rng r1(8), r2(8);
  auto x = sample_rl_batch(b, 64, r1);
  auto y = sample_rl_batch(b, 64, r2);
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_EQ(x.at(i), y.at(i));
    EXPECT_TRUE(contains(b.off, x.at(i)));
  }
}

TEST(Buffers, SamplingNeverMutates) {
  ReplayFifo f(4, 2, 32);
  f.store(make_transitions(40));
  auto before = f.all();
  Rng rng(1);
  for (int k = 0; k < 20; ++k) f.sample(17, rng);
  auto after = f.all();
  EXPECT_EQ(before.s, after.s);
  EXPECT_EQ(before.r, after.r);
  EXPECT_EQ(before.s_next, after.s_next);
}

TEST(Buffers, ClearEmpties) {
  ReplayFifo f(4, 2, 8);
  f.store(make_transitions(5));
  f.clear();
  EXPECT_TRUE(f.empty());
  f.store(make_transition(9.0));
  EXPECT_EQ(f.at(0), make_transition(9.0));
}

TEST(Buffers, CheckpointRoundTripIsBitExactAndSamplesIdentically) {
  ReplayFifo f(4, 2, 12);
  f.store(make_transitions(20, 0.1));  // wrapped ring
  std::stringstream ss;
  write_buffer(ss, f);
  ReplayFifo g(4, 2, 12);
  read_buffer(ss, g);
  ASSERT_EQ(g.size(), f.size());
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(f.at(i), g.at(i));
  Rng r1(4), r2(4);
  auto a = f.sample(30, r1);
  auto b = g.sample(30, r2);
  EXPECT_EQ(a.s, b.s);
  EXPECT_EQ(a.r, b.r);
}

TEST(Buffers, CheckpointHeaderLayout) {
  ReplayFifo f(4, 2, 8);
  f.store(make_transitions(3));
  std::stringstream ss;
  write_buffer(ss, f);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 8), "TAVTBUF1");
  const std::size_t record = (4 + 2 + 1 + 4) * 8 + 1;
  EXPECT_EQ(bytes.size(), 8 + 4 + 4 + 8 + 3 * record);
}

TEST(Buffers, CorruptCheckpointsAreRejected) {
  ReplayFifo f(4, 2, 8);
  f.store(make_transitions(3));
  std::stringstream ss;
  write_buffer(ss, f);
  const std::string bytes = ss.str();

  std::stringstream bad_magic("NOTABUF1" + bytes.substr(8));
  ReplayFifo g(4, 2, 8);
  EXPECT_THROW(read_buffer(bad_magic, g), InputError);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 5));
  ReplayFifo h(4, 2, 8);
  EXPECT_THROW(read_buffer(truncated, h), InputError);

  std::stringstream wrong_dims(bytes);
  ReplayFifo k(3, 2, 8);
  EXPECT_THROW(read_buffer(wrong_dims, k), InputError);
}

TEST(Buffers, MissingCheckpointFileIsUnavailable) {
  ReplayFifo f(4, 2, 8);
  EXPECT_THROW(load_buffer("/nonexistent/dir/buffer.bin", f), UnavailableError);
}

TEST(Buffers, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "tavt_buffer_roundtrip.bin").string();
  ReplayFifo f(4, 2, 64);
  f.store(make_transitions(10));
  save_buffer(path, f);
  ReplayFifo g(4, 2, 64);
  load_buffer(path, g);
  ASSERT_EQ(g.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(f.at(i), g.at(i));
  std::filesystem::remove(path);
}
