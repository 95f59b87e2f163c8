#include "musefuse/streams.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

namespace musefuse {
namespace {

void expect_magic(ByteReader& r, std::string_view magic) {
  if (r.remaining() < magic.size()) throw Error(ErrorCode::BadMagic, "file shorter than magic");
  const auto got = r.raw(magic.size());
  if (got != magic) throw Error(ErrorCode::BadMagic, "expected " + std::string(magic));
}

bool read_flag(ByteReader& r, std::size_t record) {
  const auto b = r.u8();
  if (b > 1) throw Error(ErrorCode::InvalidRecord, "flag byte " + std::to_string(b) + " in record " + std::to_string(record));
  return b == 1;
}

void expect_end(const ByteReader& r) {
  if (r.remaining() != 0) throw Error(ErrorCode::InvalidRecord, std::to_string(r.remaining()) + " trailing bytes");
}

std::size_t count_gaps(std::span<const std::int64_t> ts, double period_us) {
  std::size_t dropped = 0;
  for (std::size_t i = 1; i < ts.size(); ++i) {
    const double gap = static_cast<double>(ts[i] - ts[i - 1]) / period_us;
    if (gap > 1.5) dropped += static_cast<std::size_t>(std::llround(gap)) - 1;
  }
  return dropped;
}

}  // namespace

EmgStream parse_emg(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  expect_magic(r, "EMG1");
  const auto n = r.u32();
  const auto n_channels = r.u32();
  if (n_channels != kEmgChannels) throw Error(ErrorCode::InvalidRecord, "n_channels must be 8");
  EmgStream s;
  s.sample_rate_hz = r.f64();
  if (!(s.sample_rate_hz > 0.0)) throw Error(ErrorCode::InvalidRecord, "non-positive sample rate");
  s.samples.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto& smp = s.samples[i];
    smp.timestamp_us = static_cast<std::int64_t>(r.u64());
    smp.trigger = read_flag(r, i);
    for (auto& c : smp.channels) c = r.f32();
    if (i > 0 && smp.timestamp_us <= s.samples[i - 1].timestamp_us) {
      throw Error(ErrorCode::NonMonotonicTimestamp, "EMG sample " + std::to_string(i));
    }
  }
  expect_end(r);
  return s;
}

Bytes serialize_emg(const EmgStream& s) {
  ByteWriter w;
  w.reserve(20 + s.samples.size() * (9 + 4 * kEmgChannels));
  w.raw("EMG1");
  w.u32(static_cast<std::uint32_t>(s.samples.size()));
  w.u32(kEmgChannels);
  w.f64(s.sample_rate_hz);
  for (const auto& smp : s.samples) {
    w.u64(static_cast<std::uint64_t>(smp.timestamp_us));
    w.u8(smp.trigger ? 1 : 0);
    for (float c : smp.channels) w.f32(c);
  }
  return std::move(w).bytes();
}

UsStream parse_us(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  expect_magic(r, "USA1");
  const auto n = r.u32();
  const auto n_echo = r.u32();
  if (n_echo != kEchoLength) throw Error(ErrorCode::InvalidRecord, "n_echo must be 400");
  UsStream s;
  s.prf_hz = r.f64();
  if (!(s.prf_hz > 0.0)) throw Error(ErrorCode::InvalidRecord, "non-positive PRF");
  s.frames.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto& f = s.frames[i];
    f.pulse_index = r.u64();
    f.transducer_id = r.u8();
    if (f.pulse_index < 1) throw Error(ErrorCode::InvalidRecord, "pulse_index must be >= 1");
    if (f.transducer_id >= kTransducers) throw Error(ErrorCode::InvalidRecord, "transducer_id out of range");
    for (auto& e : f.echo) e = r.f32();
    if (i > 0 && f.pulse_index <= s.frames[i - 1].pulse_index) {
      throw Error(ErrorCode::NonMonotonicTimestamp, "US frame " + std::to_string(i));
    }
  }
  expect_end(r);
  return s;
}

Bytes serialize_us(const UsStream& s) {
  ByteWriter w;
  w.reserve(20 + s.frames.size() * (9 + 4 * kEchoLength));
  w.raw("USA1");
  w.u32(static_cast<std::uint32_t>(s.frames.size()));
  w.u32(kEchoLength);
  w.f64(s.prf_hz);
  for (const auto& f : s.frames) {
    w.u64(f.pulse_index);
    w.u8(f.transducer_id);
    for (float e : f.echo) w.f32(e);
  }
  return std::move(w).bytes();
}

GloveStream parse_glove(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  expect_magic(r, "GLV1");
  const auto n = r.u32();
  GloveStream s;
  s.sample_rate_hz = r.f64();
  if (!(s.sample_rate_hz > 0.0)) throw Error(ErrorCode::InvalidRecord, "non-positive sample rate");
  s.samples.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto& smp = s.samples[i];
    smp.timestamp_us = static_cast<std::int64_t>(r.u64());
    smp.sw_trigger = read_flag(r, i);
    double norm2 = 0.0;
    for (auto& q : smp.quaternion) {
      q = r.f32();
      norm2 += static_cast<double>(q) * q;
    }
    for (auto& a : smp.finger_angles_deg) a = r.f32();
    if (std::abs(std::sqrt(norm2) - 1.0) > 1e-3) {
      throw Error(ErrorCode::InvalidRecord, "non-unit quaternion in glove sample " + std::to_string(i));
    }
    if (i > 0 && smp.timestamp_us <= s.samples[i - 1].timestamp_us) {
      throw Error(ErrorCode::NonMonotonicTimestamp, "glove sample " + std::to_string(i));
    }
  }
  expect_end(r);
  return s;
}

Bytes serialize_glove(const GloveStream& s) {
  ByteWriter w;
  w.reserve(16 + s.samples.size() * (9 + 4 * (4 + kFingerAngles)));
  w.raw("GLV1");
  w.u32(static_cast<std::uint32_t>(s.samples.size()));
  w.f64(s.sample_rate_hz);
  for (const auto& smp : s.samples) {
    w.u64(static_cast<std::uint64_t>(smp.timestamp_us));
    w.u8(smp.sw_trigger ? 1 : 0);
    for (float q : smp.quaternion) w.f32(q);
    for (float a : smp.finger_angles_deg) w.f32(a);
  }
  return std::move(w).bytes();
}

SessionMeta parse_meta(const std::string& text) {
  SessionMeta m;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto to_i64 = [&](std::string_view v) {
    std::int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw Error(ErrorCode::InvalidRecord, "meta.txt line " + std::to_string(lineno) + ": bad integer '" + std::string(v) + "'");
    }
    return out;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::InvalidRecord, "meta.txt line " + std::to_string(lineno));
    const std::string key = line.substr(0, eq);
    const std::string_view value = std::string_view(line).substr(eq + 1);
    if (key == "session_id") {
      m.session_id = static_cast<int>(to_i64(value));
    } else if (key == "set_id") {
      m.set_id = static_cast<int>(to_i64(value));
    } else if (key == "sw_trigger_us") {
      m.sw_trigger_us.push_back(to_i64(value));
    } else if (key == "gesture") {
      const auto c1 = value.find(',');
      const auto c2 = value.find(',', c1 == std::string_view::npos ? c1 : c1 + 1);
      if (c1 == std::string_view::npos || c2 == std::string_view::npos) {
        throw Error(ErrorCode::InvalidRecord, "meta.txt line " + std::to_string(lineno) + ": gesture needs 3 fields");
      }
      GestureInterval g;
      g.gesture_id = static_cast<int>(to_i64(value.substr(0, c1)));
      g.start_us = to_i64(value.substr(c1 + 1, c2 - c1 - 1));
      g.end_us = to_i64(value.substr(c2 + 1));
      m.schedule.push_back(g);
    } else {
      throw Error(ErrorCode::InvalidRecord, "meta.txt: unknown key '" + key + "'");
    }
  }
  return m;
}

std::string serialize_meta(const SessionMeta& m) {
  std::ostringstream out;
  out << "session_id=" << m.session_id << '\n' << "set_id=" << m.set_id << '\n';
  for (auto t : m.sw_trigger_us) out << "sw_trigger_us=" << t << '\n';
  for (const auto& g : m.schedule) out << "gesture=" << g.gesture_id << ',' << g.start_us << ',' << g.end_us << '\n';
  return out.str();
}

RawSet load_set(const std::filesystem::path& dir) {
  RawSet s;
  s.emg = parse_emg(read_file(dir / "emg.bin"));
  s.us = parse_us(read_file(dir / "us.bin"));
  s.glove = parse_glove(read_file(dir / "glove.bin"));
  s.meta = parse_meta(read_text(dir / "meta.txt"));
  return s;
}

void save_set(const std::filesystem::path& dir, const RawSet& set) {
  std::filesystem::create_directories(dir);
  write_file(dir / "emg.bin", serialize_emg(set.emg));
  write_file(dir / "us.bin", serialize_us(set.us));
  write_file(dir / "glove.bin", serialize_glove(set.glove));
  write_text(dir / "meta.txt", serialize_meta(set.meta));
}

// ---------------------------------------------------------------------------

UsTimeMap::UsTimeMap(std::vector<UsAnchor> anchors) : anchors_(std::move(anchors)) {
  if (anchors_.size() < 2) throw Error(ErrorCode::TriggerCountMismatch, "time map needs at least two anchors");
  for (std::size_t i = 1; i < anchors_.size(); ++i) {
    if (anchors_[i].pulse_index <= anchors_[i - 1].pulse_index || anchors_[i].emg_time_us <= anchors_[i - 1].emg_time_us) {
      throw Error(ErrorCode::NonMonotonicTimestamp, "time map anchors must be strictly increasing");
    }
  }
  // Least squares on centered data for conditioning.
  const double n = static_cast<double>(anchors_.size());
  double mp = 0.0, mt = 0.0;
  for (const auto& a : anchors_) {
    mp += static_cast<double>(a.pulse_index);
    mt += static_cast<double>(a.emg_time_us);
  }
  mp /= n;
  mt /= n;
  double sxy = 0.0, sxx = 0.0;
  for (const auto& a : anchors_) {
    const double dp = static_cast<double>(a.pulse_index) - mp;
    sxy += dp * (static_cast<double>(a.emg_time_us) - mt);
    sxx += dp * dp;
  }
  rate_ = sxy / sxx;
  intercept_ = mt - rate_ * mp;
}

double UsTimeMap::time_us(double pulse) const {
  const auto& front = anchors_.front();
  const auto& back = anchors_.back();
  if (pulse <= static_cast<double>(front.pulse_index)) {
    return static_cast<double>(front.emg_time_us) - rate_ * (static_cast<double>(front.pulse_index) - pulse);
  }
  if (pulse >= static_cast<double>(back.pulse_index)) {
    return static_cast<double>(back.emg_time_us) + rate_ * (pulse - static_cast<double>(back.pulse_index));
  }
  const auto it = std::upper_bound(anchors_.begin(), anchors_.end(), pulse,
                                   [](double p, const UsAnchor& a) { return p < static_cast<double>(a.pulse_index); });
  const auto& hi = *it;
  const auto& lo = *(it - 1);
  const double f = (pulse - static_cast<double>(lo.pulse_index)) / static_cast<double>(hi.pulse_index - lo.pulse_index);
  return static_cast<double>(lo.emg_time_us) + f * static_cast<double>(hi.emg_time_us - lo.emg_time_us);
}

std::int64_t UsTimeMap::operator()(std::uint64_t pulse_index) const {
  return std::llround(time_us(static_cast<double>(pulse_index)));
}

std::vector<std::size_t> trigger_edges(const EmgStream& emg) {
  std::vector<std::size_t> edges;
  bool prev = false;
  for (std::size_t i = 0; i < emg.samples.size(); ++i) {
    const bool cur = emg.samples[i].trigger;
    if (cur && !prev) edges.push_back(i);
    prev = cur;
  }
  return edges;
}

UsTimeMap align_us_to_emg(const EmgStream& emg, const UsStream& us) {
  const auto edges = trigger_edges(emg);
  if (edges.empty()) throw Error(ErrorCode::NoTriggers, "EMG stream has no trigger-true samples");
  if (us.frames.empty()) throw Error(ErrorCode::TriggerCountMismatch, "US stream is empty");
  const std::uint64_t max_pulse = us.frames.back().pulse_index;
  const auto expected = static_cast<std::int64_t>(max_pulse / kPulsesPerTrigger);
  const auto observed = static_cast<std::int64_t>(edges.size());
  if (std::abs(observed - expected) > 1) {
    throw Error(ErrorCode::TriggerCountMismatch,
                "observed " + std::to_string(observed) + " trigger edges, expected " + std::to_string(expected));
  }
  if (observed < 2) throw Error(ErrorCode::TriggerCountMismatch, "at least two trigger edges are required");

  const double nominal_us = 1e6 * static_cast<double>(kPulsesPerTrigger) / us.prf_hz;
  std::vector<std::int64_t> times(edges.size());
  for (std::size_t i = 0; i < edges.size(); ++i) times[i] = emg.samples[edges[i]].timestamp_us;

  // Relative multiples from inter-edge gaps (a gap of ~2 nominal periods means a lost edge).
  std::vector<std::int64_t> rel(edges.size(), 0);
  for (std::size_t i = 1; i < edges.size(); ++i) {
    const auto steps = std::llround(static_cast<double>(times[i] - times[i - 1]) / nominal_us);
    rel[i] = rel[i - 1] + std::max<std::int64_t>(1, steps);
  }

  // The absolute multiple of the first observed edge is ambiguous when the
  // recording starts after the US device; choose the start that leaves the
  // fewest predicted-but-unobserved edges inside the EMG recording.
  const double emg_begin = static_cast<double>(emg.samples.front().timestamp_us);
  const double emg_end = static_cast<double>(emg.samples.back().timestamp_us);
  std::int64_t best_start = 1;
  std::int64_t best_misses = std::numeric_limits<std::int64_t>::max();
  for (std::int64_t start = 1; start <= 2; ++start) {
    if (start + rel.back() > std::max<std::int64_t>(expected, 1)) continue;
    std::vector<UsAnchor> trial(edges.size());
    for (std::size_t i = 0; i < edges.size(); ++i) {
      trial[i] = {static_cast<std::uint64_t>(start + rel[i]) * kPulsesPerTrigger, times[i]};
    }
    const UsTimeMap map(trial);
    std::int64_t misses = 0;
    std::size_t k = 0;
    for (std::int64_t m = 1; m <= expected; ++m) {
      while (k < trial.size() && static_cast<std::int64_t>(trial[k].pulse_index / kPulsesPerTrigger) < m) ++k;
      const bool seen = k < trial.size() && static_cast<std::int64_t>(trial[k].pulse_index / kPulsesPerTrigger) == m;
      const double t = map.fitted_time_us(static_cast<double>(m) * kPulsesPerTrigger);
      if (!seen && t >= emg_begin && t <= emg_end) ++misses;
    }
    if (misses < best_misses) {
      best_misses = misses;
      best_start = start;
    }
  }
  if (best_misses == std::numeric_limits<std::int64_t>::max()) {
    throw Error(ErrorCode::TriggerCountMismatch, "trigger edges span more multiples than the US stream");
  }

  std::vector<UsAnchor> anchors(edges.size());
  for (std::size_t i = 0; i < edges.size(); ++i) {
    anchors[i] = {static_cast<std::uint64_t>(best_start + rel[i]) * kPulsesPerTrigger, times[i]};
  }
  return UsTimeMap(std::move(anchors));
}

GloveAlignment align_glove_to_emg(std::span<const std::int64_t> emg_sw_trigger_us, const GloveStream& glove) {
  std::vector<std::int64_t> glove_events;
  bool prev = false;
  for (const auto& s : glove.samples) {
    if (s.sw_trigger && !prev) glove_events.push_back(s.timestamp_us);
    prev = s.sw_trigger;
  }
  if (emg_sw_trigger_us.empty()) throw Error(ErrorCode::NoSoftwareTrigger, "no EMG-side software trigger in session metadata");
  if (glove_events.empty()) throw Error(ErrorCode::NoSoftwareTrigger, "glove stream has no sw_trigger samples");

  GloveAlignment out;
  if (glove_events.size() != emg_sw_trigger_us.size()) {
    out.warnings.push_back("software trigger count differs: EMG " + std::to_string(emg_sw_trigger_us.size()) +
                           ", glove " + std::to_string(glove_events.size()));
  }
  const std::size_t n = std::min(glove_events.size(), emg_sw_trigger_us.size());
  std::vector<std::int64_t> diffs(n);
  for (std::size_t i = 0; i < n; ++i) diffs[i] = emg_sw_trigger_us[i] - glove_events[i];

  auto sorted = diffs;
  std::sort(sorted.begin(), sorted.end());
  out.offset_us = n % 2 == 1 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2;
  out.n_events = n;
  double sum = 0.0;
  for (auto d : diffs) {
    const auto r = std::abs(d - out.offset_us);
    out.max_residual_us = std::max(out.max_residual_us, r);
    sum += static_cast<double>(r);
  }
  out.mean_residual_us = sum / static_cast<double>(n);
  if (out.max_residual_us > kGloveSyncUncertaintyUs) {
    out.warnings.push_back("software trigger residual " + std::to_string(out.max_residual_us) +
                           " us exceeds the 8000 us sync uncertainty");
  }
  return out;
}

AlignedSession align_set(RawSet set) {
  AlignedSession a;
  a.us_time_map = align_us_to_emg(set.emg, set.us);
  a.glove_alignment = align_glove_to_emg(set.meta.sw_trigger_us, set.glove);
  a.emg = std::move(set.emg);
  a.us = std::move(set.us);
  a.glove = std::move(set.glove);
  a.session_id = set.meta.session_id;
  a.set_id = set.meta.set_id;
  a.gesture_schedule = std::move(set.meta.schedule);
  a.sw_trigger_us = std::move(set.meta.sw_trigger_us);
  return a;
}

AlignmentReport validate_alignment(const AlignedSession& s) {
  AlignmentReport rep;
  const double emg_period = s.emg.period_us();

  const auto& anchors = s.us_time_map.anchors();
  if (!anchors.empty()) {
    double sum = 0.0;
    for (const auto& a : anchors) {
      const double dev = std::abs(static_cast<double>(a.emg_time_us) - s.us_time_map.fitted_time_us(static_cast<double>(a.pulse_index)));
      const double excess = std::max(0.0, dev - emg_period);
      rep.max_us_anchor_residual_us = std::max(rep.max_us_anchor_residual_us, excess);
      sum += excess;
    }
    rep.mean_us_anchor_residual_us = sum / static_cast<double>(anchors.size());
  }

  // Glove: per-event residual beyond one glove sample period.
  {
    std::vector<std::int64_t> glove_events;
    bool prev = false;
    for (const auto& g : s.glove.samples) {
      if (g.sw_trigger && !prev) glove_events.push_back(g.timestamp_us);
      prev = g.sw_trigger;
    }
    const std::size_t n = std::min(glove_events.size(), s.sw_trigger_us.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dev = std::abs(static_cast<double>(s.sw_trigger_us[i] - glove_events[i] - s.glove_time_offset_us()));
      const double excess = std::max(0.0, dev - s.glove.period_us());
      rep.max_glove_residual_us = std::max(rep.max_glove_residual_us, excess);
      sum += excess;
    }
    if (n > 0) rep.mean_glove_residual_us = sum / static_cast<double>(n);
  }

  for (std::size_t i = 1; i < s.us.frames.size(); ++i) {
    rep.dropped_us_frames += s.us.frames[i].pulse_index - s.us.frames[i - 1].pulse_index - 1;
  }
  {
    std::vector<std::int64_t> ts(s.emg.samples.size());
    std::transform(s.emg.samples.begin(), s.emg.samples.end(), ts.begin(), [](const EmgSample& e) { return e.timestamp_us; });
    rep.dropped_emg_samples = count_gaps(ts, emg_period);
    ts.resize(s.glove.samples.size());
    std::transform(s.glove.samples.begin(), s.glove.samples.end(), ts.begin(), [](const GloveSample& g) { return g.timestamp_us; });
    rep.dropped_glove_samples = count_gaps(ts, s.glove.period_us());
  }

  if (!s.emg.samples.empty()) {
    rep.emg_duration_s = (static_cast<double>(s.emg.samples.back().timestamp_us - s.emg.samples.front().timestamp_us) + emg_period) * 1e-6;
  }
  if (!s.us.frames.empty() && !anchors.empty()) {
    const double first = static_cast<double>(s.us.frames.front().pulse_index);
    const double last = static_cast<double>(s.us.frames.back().pulse_index);
    rep.us_duration_s = (s.us_time_map.time_us(last) - s.us_time_map.time_us(first) + s.us_time_map.rate_us_per_pulse()) * 1e-6;
  }
  if (!s.glove.samples.empty()) {
    rep.glove_duration_s =
        (static_cast<double>(s.glove.samples.back().timestamp_us - s.glove.samples.front().timestamp_us) + s.glove.period_us()) * 1e-6;
  }
  auto check = [&](double d, const char* name) {
    if (rep.emg_duration_s <= 0.0) return;
    const double rel = std::abs(d - rep.emg_duration_s) / rep.emg_duration_s;
    if (rel > 0.01) {
      rep.duration_mismatch = true;
      std::ostringstream msg;
      msg << name << " duration differs from EMG by " << 100.0 * rel << " %";
      rep.notes.push_back(msg.str());
    }
  };
  check(rep.us_duration_s, "US");
  check(rep.glove_duration_s, "glove");
  return rep;
}

}  // namespace musefuse
