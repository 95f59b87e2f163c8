#include "musefuse/dataset.hpp"

#include <algorithm>
#include <set>

namespace musefuse {

const std::array<std::string_view, kJoints>& joint_names() {
  static const std::array<std::string_view, kJoints> names = {
      "thumb_cmc_spread",  "thumb_cmc_flex",  "thumb_pip_flex",  "thumb_dip_flex",
      "index_cmc_spread",  "index_cmc_flex",  "index_pip_flex",  "index_dip_flex",
      "middle_cmc_spread", "middle_cmc_flex", "middle_pip_flex", "middle_dip_flex",
      "ring_cmc_spread",   "ring_cmc_flex",   "ring_pip_flex",   "ring_dip_flex",
      "pinky_cmc_spread",  "pinky_cmc_flex",  "pinky_pip_flex",  "pinky_dip_flex",
      "wrist_flex_ext",    "wrist_rad_uln",   "wrist_pro_sup",
  };
  return names;
}

Eigen::MatrixXd condition_emg(const EmgStream& emg, const BuildOptions& opts) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(emg.samples.size()), kEmgChannels);
  for (std::size_t i = 0; i < emg.samples.size(); ++i) {
    for (int c = 0; c < kEmgChannels; ++c) x(static_cast<Eigen::Index>(i), c) = emg.samples[i].channels[c];
  }
  const auto filter = cascade(design_butterworth_highpass(emg.sample_rate_hz, opts.highpass_hz, opts.highpass_order),
                              design_notch(emg.sample_rate_hz, opts.notch_hz, opts.notch_q));
  return filter_apply(filter, x);
}

GloveAngles glove_angles(const GloveStream& glove, std::int64_t offset_us, const WristAxisMap& axes) {
  GloveAngles out;
  const auto n = static_cast<Eigen::Index>(glove.samples.size());
  out.emg_time_us.resize(glove.samples.size());
  out.angles_deg.resize(n, kJoints);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& g = glove.samples[static_cast<std::size_t>(i)];
    out.emg_time_us[static_cast<std::size_t>(i)] = static_cast<double>(g.timestamp_us + offset_us);
    for (int j = 0; j < kFingerAngles; ++j) out.angles_deg(i, j) = g.finger_angles_deg[j];
    const auto e = quat_to_euler_zyx(g.quaternion[0], g.quaternion[1], g.quaternion[2], g.quaternion[3]);
    if (e.near_gimbal_lock) ++out.gimbal_lock_samples;
    out.angles_deg.block<1, 3>(i, kFingerAngles) = axes.to_wrist_dofs(e).transpose();
  }
  return out;
}

BuildResult build_entries(const AlignedSession& s, const BuildOptions& opts) {
  BuildResult res;
  if (s.emg.samples.empty() || s.us.frames.empty() || s.glove.samples.empty()) {
    throw Error(ErrorCode::InsufficientHistory, "session has an empty stream");
  }

  auto emg_norm = minmax_normalize(condition_emg(s.emg, opts), s.set_id);
  res.emg_scale = emg_norm.scale;
  const Eigen::MatrixXd& emg = emg_norm.values;

  // Per-transducer min/max over the whole set.
  res.us_scale.min = Eigen::VectorXd::Constant(kTransducers, std::numeric_limits<double>::infinity());
  res.us_scale.max = Eigen::VectorXd::Constant(kTransducers, -std::numeric_limits<double>::infinity());
  res.us_scale.scope_set_id = s.set_id;
  for (const auto& f : s.us.frames) {
    for (float v : f.echo) {
      if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteInput, "non-finite US sample");
      res.us_scale.min[f.transducer_id] = std::min(res.us_scale.min[f.transducer_id], static_cast<double>(v));
      res.us_scale.max[f.transducer_id] = std::max(res.us_scale.max[f.transducer_id], static_cast<double>(v));
    }
  }
  res.us_scale.constant.resize(kTransducers);
  for (int t = 0; t < kTransducers; ++t) {
    if (!std::isfinite(res.us_scale.min[t])) res.us_scale.min[t] = res.us_scale.max[t] = 0.0;
    res.us_scale.constant[static_cast<std::size_t>(t)] = res.us_scale.max[t] == res.us_scale.min[t];
  }

  // Group frames into scans by pulse index: scan g holds pulses 4g+1 .. 4g+4.
  struct Scan {
    std::array<const UsFrame*, kTransducers> frames{};
    bool complete = true;
  };
  std::vector<std::pair<std::uint64_t, Scan>> scans;
  for (const auto& f : s.us.frames) {
    const std::uint64_t g = (f.pulse_index - 1) / kTransducers;
    const auto slot = static_cast<std::size_t>((f.pulse_index - 1) % kTransducers);
    if (scans.empty() || scans.back().first != g) scans.push_back({g, Scan{}});
    auto& scan = scans.back().second;
    if (f.transducer_id != slot || scan.frames[slot] != nullptr) scan.complete = false;
    scan.frames[slot] = &f;
  }
  for (std::size_t k = 0; k < scans.size(); ++k) {
    auto& scan = scans[k].second;
    const bool missing = std::any_of(scan.frames.begin(), scan.frames.end(), [](auto* p) { return p == nullptr; });
    if (!missing && scan.complete) continue;
    // Partial scans at the edges of the recording carry no error.
    const bool edge = (k == 0 || k + 1 == scans.size()) && scan.complete;
    if (!edge && !opts.skip_incomplete_scans) {
      throw Error(ErrorCode::IncompleteScan, "scan " + std::to_string(scans[k].first) + " has a missing or misplaced transducer");
    }
    if (!edge) ++res.skipped_incomplete_scans;
    scan.complete = false;
  }

  const auto angles = glove_angles(s.glove, s.glove_time_offset_us(), opts.wrist_axes);
  res.gimbal_lock_samples = angles.gimbal_lock_samples;

  std::vector<std::int64_t> emg_ts(s.emg.samples.size());
  std::transform(s.emg.samples.begin(), s.emg.samples.end(), emg_ts.begin(), [](const EmgSample& e) { return e.timestamp_us; });
  const double emg_period = s.emg.period_us();

  struct Pending {
    const Scan* scan;
    Eigen::Index end_row;
  };
  std::vector<Pending> pending;
  std::vector<double> label_times;
  for (const auto& [g, scan] : scans) {
    if (!scan.complete) continue;
    const std::int64_t t = s.us_time_map(scan.frames[kTransducers - 1]->pulse_index);
    const auto it = std::upper_bound(emg_ts.begin(), emg_ts.end(), t);
    if (it == emg_ts.begin() || static_cast<double>(t) > static_cast<double>(emg_ts.back()) + emg_period) {
      ++res.dropped_insufficient_history;
      continue;
    }
    const auto end_row = static_cast<Eigen::Index>(it - emg_ts.begin()) - 1;
    if (end_row + 1 < kWindowSamples) {
      ++res.dropped_insufficient_history;
      continue;
    }
    pending.push_back({&scan, end_row});
    label_times.push_back(static_cast<double>(emg_ts[static_cast<std::size_t>(end_row)]));
  }
  if (pending.empty()) throw Error(ErrorCode::InsufficientHistory, "no scan has a full EMG window");

  const Eigen::MatrixXd labels = resample_linear(angles.emg_time_us, angles.angles_deg, label_times);

  res.entries.resize(pending.size());
  for (std::size_t k = 0; k < pending.size(); ++k) {
    auto& e = res.entries[k];
    e.session_id = static_cast<std::uint16_t>(s.session_id);
    e.set_id = static_cast<std::uint16_t>(s.set_id);
    e.t_end_us = static_cast<std::int64_t>(label_times[k]);
    e.emg = emg.middleRows(pending[k].end_row - kWindowSamples + 1, kWindowSamples).cast<float>();
    for (int t = 0; t < kTransducers; ++t) {
      const auto& echo = pending[k].scan->frames[static_cast<std::size_t>(t)]->echo;
      const bool flat = res.us_scale.constant[static_cast<std::size_t>(t)];
      const double lo = res.us_scale.min[t], span = res.us_scale.max[t] - res.us_scale.min[t];
      for (int d = 0; d < kEchoLength; ++d) {
        e.us(d, t) = flat ? 0.0f : static_cast<float>(2.0 * (echo[static_cast<std::size_t>(d)] - lo) / span - 1.0);
      }
    }
    e.label = labels.row(static_cast<Eigen::Index>(k)).transpose().cast<float>();
  }
  return res;
}

std::string_view to_string(Scheme s) { return s == Scheme::Aggregated ? "aggregated" : "intersession"; }

Scheme parse_scheme(std::string_view s) {
  if (s == "aggregated") return Scheme::Aggregated;
  if (s == "intersession") return Scheme::Intersession;
  throw Error(ErrorCode::UsageError, "unknown scheme '" + std::string(s) + "'");
}

SplitSpec split_aggregated(int fold, int n_sessions, int n_sets) {
  if (fold < 0 || fold >= n_sets) throw Error(ErrorCode::FoldOutOfRange, "fold " + std::to_string(fold));
  SplitSpec sp;
  sp.scheme = Scheme::Aggregated;
  sp.fold_or_test_session = fold;
  const int val = (fold + 1) % n_sets;
  for (int s = 0; s < n_sessions; ++s) {
    for (int k = 0; k < n_sets; ++k) {
      if (k == fold) {
        sp.test.push_back({s, k});
      } else if (k == val) {
        sp.val.push_back({s, k});
      } else {
        sp.train.push_back({s, k});
      }
    }
  }
  return sp;
}

SplitSpec split_intersession(int test_session, int n_sessions, int n_sets) {
  if (test_session < 0 || test_session >= n_sessions) {
    throw Error(ErrorCode::SessionOutOfRange, "session " + std::to_string(test_session));
  }
  SplitSpec sp;
  sp.scheme = Scheme::Intersession;
  sp.fold_or_test_session = test_session;
  for (int s = 0; s < n_sessions; ++s) {
    for (int k = 0; k < n_sets; ++k) {
      if (s == test_session) {
        sp.test.push_back({s, k});
      } else if (k == n_sets - 1) {
        sp.val.push_back({s, k});
      } else {
        sp.train.push_back({s, k});
      }
    }
  }
  return sp;
}

EntryRefs select(const Entries& entries, std::span<const SetRef> sets) {
  const std::set<SetRef> wanted(sets.begin(), sets.end());
  EntryRefs out;
  for (const auto& e : entries) {
    if (wanted.count({e.session_id, e.set_id}) != 0) out.push_back(&e);
  }
  return out;
}

Partition select(const Entries& entries, const SplitSpec& split) {
  return {select(entries, split.train), select(entries, split.val), select(entries, split.test)};
}

Bytes serialize_dataset(const Entries& entries) {
  ByteWriter w;
  w.reserve(8 + entries.size() * (12 + 4 * (800 + 1600 + kJoints)));
  w.raw("DST1");
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.u16(e.session_id);
    w.u16(e.set_id);
    w.u64(static_cast<std::uint64_t>(e.t_end_us));
    for (Eigen::Index i = 0; i < e.emg.size(); ++i) w.f32(e.emg.data()[i]);
    for (Eigen::Index i = 0; i < e.us.size(); ++i) w.f32(e.us.data()[i]);
    for (Eigen::Index i = 0; i < e.label.size(); ++i) w.f32(e.label[i]);
  }
  return std::move(w).bytes();
}

Entries parse_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != "DST1") throw Error(ErrorCode::BadMagic, "expected DST1");
  const auto n = r.u32();
  Entries out(n);
  for (auto& e : out) {
    e.session_id = r.u16();
    e.set_id = r.u16();
    e.t_end_us = static_cast<std::int64_t>(r.u64());
    for (Eigen::Index i = 0; i < e.emg.size(); ++i) e.emg.data()[i] = r.f32();
    for (Eigen::Index i = 0; i < e.us.size(); ++i) e.us.data()[i] = r.f32();
    for (Eigen::Index i = 0; i < e.label.size(); ++i) e.label[i] = r.f32();
  }
  if (r.remaining() != 0) throw Error(ErrorCode::InvalidRecord, "trailing bytes in dataset file");
  return out;
}

}  // namespace musefuse
