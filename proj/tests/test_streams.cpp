#include <gtest/gtest.h>

#include "musefuse/streams.hpp"
#include "musefuse/synth.hpp"
#include "support.hpp"

using namespace musefuse;

namespace {

EmgStream emg_fixture(std::size_t n, std::vector<std::size_t> trigger_at) {
  EmgStream s;
  s.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.samples[i].timestamp_us = static_cast<std::int64_t>(i) * 2000;
    for (int c = 0; c < kEmgChannels; ++c) s.samples[i].channels[c] = static_cast<float>(0.01 * (i % 17) - 0.1 * c);
  }
  for (auto t : trigger_at) s.samples[t].trigger = true;
  return s;
}

UsStream us_fixture(std::uint64_t n_pulses) {
  UsStream s;
  for (std::uint64_t p = 1; p <= n_pulses; ++p) {
    UsFrame f;
    f.pulse_index = p;
    f.transducer_id = static_cast<std::uint8_t>((p - 1) % kTransducers);
    for (int k = 0; k < kEchoLength; ++k) f.echo[k] = static_cast<float>((k * p) % 13) / 13.0f;
    s.frames.push_back(f);
  }
  return s;
}

GloveStream glove_fixture(std::size_t n, std::vector<std::size_t> events) {
  GloveStream g;
  g.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.samples[i].timestamp_us = static_cast<std::int64_t>(std::llround(static_cast<double>(i) * 1e6 / 120.0));
    g.samples[i].finger_angles_deg[i % kFingerAngles] = static_cast<float>(i % 90);
  }
  for (auto e : events) g.samples[e].sw_trigger = true;
  return g;
}

ProtocolSpec short_protocol() {
  ProtocolSpec p;
  p.reps = 1;
  return p;
}

}  // namespace

TEST(Streams, ParsesThreeEmgRecords) {
  const auto s = emg_fixture(3, {1});
  const auto parsed = parse_emg(serialize_emg(s));
  ASSERT_EQ(parsed.samples.size(), 3u);
  EXPECT_EQ(parsed.samples[2].timestamp_us, 4000);
  EXPECT_TRUE(parsed.samples[1].trigger);
  EXPECT_DOUBLE_EQ(parsed.sample_rate_hz, 500.0);
}

TEST(Streams, DecreasingTimestampsAreRejected) {
  auto s = emg_fixture(3, {});
  s.samples[2].timestamp_us = 1000;
  try {
    parse_emg(serialize_emg(s));
    FAIL() << "expected NonMonotonicTimestamp";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonMonotonicTimestamp);
  }
}

TEST(Streams, BadMagicAndTruncation) {
  auto bytes = serialize_emg(emg_fixture(3, {}));
  auto bad = bytes;
  bad[0] = 'X';
  try {
    parse_emg(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadMagic);
  }
  bytes.resize(bytes.size() - 5);
  try {
    parse_emg(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TruncatedRecord);
  }
  auto us = serialize_us(us_fixture(8));
  us.resize(us.size() - 1);
  try {
    parse_us(us);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TruncatedRecord);
  }
}

TEST(Streams, UsPulsesMustIncrease) {
  auto us = us_fixture(8);
  us.frames[3].pulse_index = 3;
  try {
    parse_us(serialize_us(us));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonMonotonicTimestamp);
  }
  us = us_fixture(8);
  us.frames[2].transducer_id = 4;
  try {
    parse_us(serialize_us(us));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidRecord);
  }
}

TEST(Streams, RoundTripIsByteExact) {
  CounterRng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    auto emg = emg_fixture(50 + trial, {3, 20});
    for (auto& s : emg.samples) {
      for (auto& c : s.channels) c = static_cast<float>(rng.uniform(-1, 1));
    }
    const auto eb = serialize_emg(emg);
    EXPECT_EQ(serialize_emg(parse_emg(eb)), eb);

    const auto ub = serialize_us(us_fixture(12 + 4 * trial));
    EXPECT_EQ(serialize_us(parse_us(ub)), ub);

    auto glove = glove_fixture(30, {4});
    for (auto& g : glove.samples) {
      const Eigen::Vector4d q = Eigen::Vector4d::Random().normalized();
      for (int k = 0; k < 4; ++k) g.quaternion[k] = static_cast<float>(q[k]);
    }
    const auto gb = serialize_glove(glove);
    EXPECT_EQ(serialize_glove(parse_glove(gb)), gb);
  }
  SessionMeta m;
  m.session_id = 2;
  m.set_id = 4;
  m.sw_trigger_us = {5000000, 25000123};
  m.schedule = {{0, 0, 4000000}, {3, 5000000, 9000000}};
  const auto text = serialize_meta(m);
  EXPECT_EQ(parse_meta(text), m);
  EXPECT_EQ(serialize_meta(parse_meta(text)), text);
}

TEST(Streams, GeneratedSetFilesRoundTrip) {
  const auto set = gen_set(short_protocol(), GestureTable::defaults(), MixingModel::random(3), 0, 0, 9);
  const auto eb = serialize_emg(set.raw.emg), ub = serialize_us(set.raw.us), gb = serialize_glove(set.raw.glove);
  EXPECT_EQ(serialize_emg(parse_emg(eb)), eb);
  EXPECT_EQ(serialize_us(parse_us(ub)), ub);
  EXPECT_EQ(serialize_glove(parse_glove(gb)), gb);
}

TEST(Streams, TriggerFixtureInterpolates) {
  const auto map = align_us_to_emg(emg_fixture(2000, {833, 1666}), us_fixture(100));
  EXPECT_EQ(map(50), 1666000);
  EXPECT_EQ(map(100), 3332000);
  EXPECT_EQ(map(75), 2499000);
  ASSERT_EQ(map.anchors().size(), 2u);
  EXPECT_EQ(map.anchors()[0].pulse_index, 50u);
  // Before the first anchor the clock rate extrapolates backward.
  EXPECT_NEAR(map.time_us(1), 1666000.0 - 49 * 33320.0, 1e-6);
}

TEST(Streams, NoTriggers) {
  try {
    align_us_to_emg(emg_fixture(2000, {}), us_fixture(100));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoTriggers);
  }
}

TEST(Streams, TriggerCountOffByMoreThanOne) {
  try {
    align_us_to_emg(emg_fixture(20000, {833}), us_fixture(400));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TriggerCountMismatch);
  }
}

TEST(Streams, RecoversInjected37msOffset) {
  SynthOptions opts;
  opts.us_offset_us = 37000;
  const auto set = gen_set(short_protocol(), GestureTable::defaults(), MixingModel::random(3), 0, 0, 21, opts);
  const auto map = align_us_to_emg(set.raw.emg, set.raw.us);
  EXPECT_NEAR(map.fitted_time_us(1), 37000.0, 2000.0);
  EXPECT_NEAR(map.time_us(1), 37000.0, 2000.0);
}

TEST(Streams, AnchorsAreStrictlyIncreasing) {
  SynthOptions opts;
  opts.us_offset_us = -1234567;
  opts.jitter_us = 1000;
  opts.emg_tail_s = 3.0;
  const auto set = gen_set(short_protocol(), GestureTable::defaults(), MixingModel::random(3), 0, 0, 4, opts);
  const auto map = align_us_to_emg(set.raw.emg, set.raw.us);
  for (std::size_t i = 1; i < map.anchors().size(); ++i) {
    EXPECT_GT(map.anchors()[i].pulse_index, map.anchors()[i - 1].pulse_index);
    EXPECT_GT(map.anchors()[i].emg_time_us, map.anchors()[i - 1].emg_time_us);
  }
  for (std::uint64_t p = 2; p <= set.raw.us.frames.back().pulse_index; ++p) EXPECT_GT(map.time_us(p), map.time_us(p - 1));
}

TEST(Streams, GloveOffsetExamples) {
  const auto glove = glove_fixture(1200, {0});
  std::vector<std::int64_t> at_zero{0};
  EXPECT_EQ(align_glove_to_emg(at_zero, glove).offset_us, 0);

  const auto later = glove_fixture(1200, {600});
  const std::int64_t glove_t = later.samples[600].timestamp_us;
  std::vector<std::int64_t> emg_side{glove_t + 5000};
  EXPECT_EQ(align_glove_to_emg(emg_side, later).offset_us, 5000);

  try {
    align_glove_to_emg(std::vector<std::int64_t>{}, glove);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoSoftwareTrigger);
  }
}

TEST(Streams, GloveJitterWithinEightMs) {
  CounterRng rng(77);
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < 15; ++k) idx.push_back(100 + 200 * k);
  const auto glove = glove_fixture(3200, idx);
  std::vector<std::int64_t> emg_side;
  for (auto i : idx) emg_side.push_back(glove.samples[i].timestamp_us + 3000 + static_cast<std::int64_t>(rng.uniform(0, 8000)));
  const auto a = align_glove_to_emg(emg_side, glove);
  EXPECT_LE(a.max_residual_us, 8000);
  EXPECT_TRUE(a.warnings.empty());
}

TEST(Streams, IdealSessionHasZeroResiduals) {
  const auto set = gen_set(short_protocol(), GestureTable::defaults(), MixingModel::random(3), 1, 2, 8);
  const auto rep = validate_alignment(align_set(set.raw));
  EXPECT_EQ(rep.max_us_anchor_residual_us, 0.0);
  EXPECT_EQ(rep.max_glove_residual_us, 0.0);
  EXPECT_EQ(rep.dropped_us_frames, 0u);
  EXPECT_EQ(rep.dropped_emg_samples, 0u);
  EXPECT_EQ(rep.dropped_glove_samples, 0u);
  EXPECT_FALSE(rep.duration_mismatch);
}

TEST(Streams, DroppedUsFrameIsCounted) {
  auto set = gen_set(short_protocol(), GestureTable::defaults(), MixingModel::random(3), 0, 0, 8);
  set.raw.us.frames.erase(set.raw.us.frames.begin() + 500);
  const auto rep = validate_alignment(align_set(set.raw));
  EXPECT_EQ(rep.dropped_us_frames, 1u);
}

TEST(Streams, DurationMismatchIsFlagged) {
  auto set = gen_set(short_protocol(), GestureTable::defaults(), MixingModel::random(3), 0, 0, 8);
  auto& g = set.raw.glove.samples;
  const std::size_t keep = static_cast<std::size_t>(std::llround(static_cast<double>(g.size()) * 0.985));
  g.resize(keep);
  auto trimmed = set.raw;
  // Drop software triggers that fell in the removed tail.
  while (!trimmed.meta.sw_trigger_us.empty() && trimmed.meta.sw_trigger_us.back() > g.back().timestamp_us) {
    trimmed.meta.sw_trigger_us.pop_back();
  }
  const auto rep = validate_alignment(align_set(trimmed));
  EXPECT_TRUE(rep.duration_mismatch);
  EXPECT_NEAR(rep.glove_duration_s / rep.emg_duration_s, 0.985, 1e-3);
}

TEST(Streams, FullSetCounts) {
  const auto set = gen_set(ProtocolSpec{}, GestureTable::defaults(), MixingModel::random(1), 0, 0, 1);
  EXPECT_EQ(set.raw.emg.samples.size(), 165000u);
  EXPECT_EQ(set.raw.us.frames.size(), 9900u);
  EXPECT_EQ(trigger_edges(set.raw.emg).size(), 198u);
}
