#include <gtest/gtest.h>

#include <set>

#include "musefuse/dataset.hpp"
#include "musefuse/synth.hpp"
#include "support.hpp"

using namespace musefuse;

namespace {

ProtocolSpec short_protocol() {
  ProtocolSpec p;
  p.reps = 1;
  return p;
}

SyntheticSet short_set(std::uint64_t seed, SynthOptions opts = {}) {
  return gen_set(short_protocol(), GestureTable::defaults(), MixingModel::random(seed), 0, 1, seed, opts);
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::IoError;
}

}  // namespace

TEST(Dataset, FullSetGivesExpectedEntryCount) {
  const auto set = gen_set(ProtocolSpec{}, GestureTable::defaults(), MixingModel::random(1), 0, 0, 1);
  const auto res = build_entries(align_set(set.raw));
  // 9900 frames make 2475 scans; the first lacks 100 samples of EMG history.
  EXPECT_EQ(res.entries.size(), 2474u);
  EXPECT_EQ(res.dropped_insufficient_history, 1u);
  EXPECT_NEAR(static_cast<double>(res.entries.size()), 2473.0, 3.0);
}

TEST(Dataset, ScanEndingAt140msIsDropped) {
  SynthOptions opts;
  opts.us_offset_us = 40000;  // pulse 4 fires at 140 ms
  const auto aligned = align_set(short_set(3, opts).raw);
  const auto res = build_entries(aligned);
  EXPECT_EQ(res.dropped_insufficient_history, 1u);
  ASSERT_FALSE(res.entries.empty());
  // The second scan ends with pulse 8. Its label time is the last EMG sample
  // at or before the aligned pulse time, true time 273.3 ms.
  const auto t = aligned.us_time_map(8);
  const auto e = res.entries.front().t_end_us;
  EXPECT_LE(e, t);
  EXPECT_GT(e, t - 2000);
  EXPECT_EQ(e % 2000, 0);
  EXPECT_NEAR(static_cast<double>(e), 273333.0, 2000.0 + 2000.0);
}

TEST(Dataset, EntriesAreWellFormed) {
  const auto res = build_entries(align_set(short_set(5).raw));
  ASSERT_GT(res.entries.size(), 300u);
  for (const auto& e : res.entries) {
    EXPECT_EQ(e.session_id, 0);
    EXPECT_EQ(e.set_id, 1);
    ASSERT_TRUE(e.emg.allFinite() && e.us.allFinite() && e.label.allFinite());
    EXPECT_LE(e.emg.cwiseAbs().maxCoeff(), 1.0f);
    EXPECT_LE(e.us.cwiseAbs().maxCoeff(), 1.0f);
  }
}

TEST(Dataset, IncompleteScanIsAnError) {
  auto raw = short_set(5).raw;
  raw.us.frames[403].transducer_id = 2;  // group {0,1,2,2}
  const auto aligned = align_set(raw);
  EXPECT_EQ(code_of([&] { build_entries(aligned); }), ErrorCode::IncompleteScan);
  BuildOptions skip;
  skip.skip_incomplete_scans = true;
  const auto res = build_entries(aligned, skip);
  EXPECT_EQ(res.skipped_incomplete_scans, 1u);
  EXPECT_EQ(res.entries.size(), build_entries(align_set(short_set(5).raw)).entries.size() - 1);
}

TEST(Dataset, EntryCountDependsOnlyOnDurationAndPrf) {
  const auto a = build_entries(align_set(short_set(1).raw)).entries.size();
  const auto b = build_entries(align_set(short_set(2).raw)).entries.size();
  SynthOptions noisy;
  noisy.jitter_us = 900;
  const auto c = build_entries(align_set(short_set(3, noisy).raw)).entries.size();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  const double frames = short_protocol().set_duration_s() * 30.0;
  EXPECT_EQ(a, static_cast<std::size_t>(frames / 4) - 1);
}

TEST(Dataset, LabelsAreContinuous) {
  const auto res = build_entries(align_set(short_set(6).raw));
  // Fastest motion is a 90 degree ramp over 300 ms. Label times sit on the
  // 2 ms EMG grid, so one stride spans at most 133.3 + 2 ms.
  const float bound = static_cast<float>(90.0 / 300.0 * (4000.0 / 30.0 + 2.0)) + 1e-3f;
  for (std::size_t i = 1; i < res.entries.size(); ++i) {
    EXPECT_LE((res.entries[i].label - res.entries[i - 1].label).cwiseAbs().maxCoeff(), bound) << i;
  }
}

TEST(Dataset, LabelsFollowTheLatentTrajectory) {
  const auto set = short_set(7);
  const auto res = build_entries(align_set(set.raw));
  double worst = 0.0;
  for (std::size_t i = 0; i < res.entries.size(); i += 37) {
    const auto& e = res.entries[i];
    const auto truth = trajectory_at(short_protocol(), GestureTable::defaults(), static_cast<double>(e.t_end_us) * 1e-6);
    worst = std::max(worst, (e.label.cast<double>() - truth).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Dataset, SerializationRoundTrip) {
  auto res = build_entries(align_set(short_set(8).raw));
  res.entries.resize(20);
  const auto bytes = serialize_dataset(res.entries);
  EXPECT_EQ(bytes.size(), 8u + 20u * (2 + 2 + 8 + 4 * (800 + 1600 + 23)));
  const auto back = parse_dataset(bytes);
  ASSERT_EQ(back.size(), 20u);
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].t_end_us, res.entries[i].t_end_us);
    EXPECT_EQ(back[i].emg, res.entries[i].emg);
    EXPECT_EQ(back[i].us, res.entries[i].us);
    EXPECT_EQ(back[i].label, res.entries[i].label);
  }
  EXPECT_EQ(serialize_dataset(back), bytes);
}

TEST(Splits, AggregatedFoldZero) {
  const auto s = split_aggregated(0);
  EXPECT_EQ(s.test, (std::vector<SetRef>{{0, 0}, {1, 0}, {2, 0}}));
  EXPECT_EQ(s.val, (std::vector<SetRef>{{0, 1}, {1, 1}, {2, 1}}));
  EXPECT_EQ(s.train.size(), 9u);
  for (const auto& r : s.train) EXPECT_GE(r.set_id, 2);
  EXPECT_EQ(code_of([] { split_aggregated(5); }), ErrorCode::FoldOutOfRange);
  EXPECT_EQ(code_of([] { split_aggregated(-1); }), ErrorCode::FoldOutOfRange);
}

TEST(Splits, AggregatedFoldsCoverEverySetOnce) {
  std::multiset<SetRef> tested;
  for (int f = 0; f < 5; ++f) {
    const auto s = split_aggregated(f);
    for (const auto& r : s.test) tested.insert(r);
    std::set<SetRef> all;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      for (const auto& r : *part) EXPECT_TRUE(all.insert(r).second) << "set in two partitions";
    }
    EXPECT_EQ(all.size(), 15u);
    for (int sess = 0; sess < 3; ++sess) {
      EXPECT_EQ(std::count_if(s.val.begin(), s.val.end(), [&](auto r) { return r.session_id == sess && r.set_id == (f + 1) % 5; }), 1);
    }
  }
  EXPECT_EQ(tested.size(), 15u);
  for (const auto& r : tested) EXPECT_EQ(tested.count(r), 1u);
}

TEST(Splits, Intersession) {
  const auto s = split_intersession(2);
  EXPECT_EQ(s.train, (std::vector<SetRef>{{0, 0}, {0, 1}, {0, 2}, {0, 3}, {1, 0}, {1, 1}, {1, 2}, {1, 3}}));
  EXPECT_EQ(s.val, (std::vector<SetRef>{{0, 4}, {1, 4}}));
  EXPECT_EQ(s.test, (std::vector<SetRef>{{2, 0}, {2, 1}, {2, 2}, {2, 3}, {2, 4}}));
  std::set<int> tested;
  for (int k = 0; k < 3; ++k) tested.insert(split_intersession(k).test.front().session_id);
  EXPECT_EQ(tested.size(), 3u);
  EXPECT_EQ(code_of([] { split_intersession(3); }), ErrorCode::SessionOutOfRange);
}

TEST(Splits, SelectPartitionsEntries) {
  Entries entries;
  for (int s = 0; s < 3; ++s) {
    for (int k = 0; k < 5; ++k) {
      for (int i = 0; i < 4; ++i) {
        DatasetEntry e;
        e.session_id = static_cast<std::uint16_t>(s);
        e.set_id = static_cast<std::uint16_t>(k);
        entries.push_back(e);
      }
    }
  }
  const auto p = select(entries, split_aggregated(3));
  EXPECT_EQ(p.train.size(), 36u);
  EXPECT_EQ(p.val.size(), 12u);
  EXPECT_EQ(p.test.size(), 12u);
  for (const auto* e : p.test) EXPECT_EQ(e->set_id, 3);
  for (const auto* e : p.val) EXPECT_EQ(e->set_id, 4);
}
