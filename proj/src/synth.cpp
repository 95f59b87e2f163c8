#include "musefuse/synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numbers>
#include <thread>

#include <Eigen/LU>

#include "musefuse/sigproc.hpp"

namespace musefuse {

namespace {

constexpr double kPi = std::numbers::pi;

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::SpecInvalid, what);
}

// Column of a finger DoF in label order.
constexpr int finger(int f, int dof) { return 4 * f + dof; }
enum { kSpread = 0, kCmc = 1, kPip = 2, kDip = 3 };
constexpr int kFe = kHandDofs, kRu = kHandDofs + 1, kPs = kHandDofs + 2;

constexpr std::array<std::string_view, kGestures> kGestureNames = {
    "OH", "CF", "FP", "MP", "TU", "TD", "WF", "WE", "WRD", "WUD", "WSUP"};

Biquad lowpass_biquad(double fs_hz, double fc_hz) {
  const double w0 = 2.0 * kPi * fc_hz / fs_hz;
  const double alpha = std::sin(w0) / (2.0 * std::numbers::sqrt2 / 2.0);
  const double a0 = 1.0 + alpha;
  const double c = std::cos(w0);
  Biquad s;
  s.b0 = (1.0 - c) / 2.0 / a0;
  s.b1 = (1.0 - c) / a0;
  s.b2 = (1.0 - c) / 2.0 / a0;
  s.a1 = -2.0 * c / a0;
  s.a2 = (1.0 - alpha) / a0;
  return s;
}

std::int64_t jitter(CounterRng& rng, std::int64_t bound) {
  if (bound <= 0) return 0;
  return static_cast<std::int64_t>(std::trunc(rng.uniform(-1.0, 1.0) * static_cast<double>(bound)));
}

}  // namespace

void ProtocolSpec::validate() const {
  require(n_sessions > 0 && n_sets > 0, "session and set counts must be positive");
  require(reps > 0, "reps must be positive");
  require(hold_s > 0.0 && rest_s >= 0.0, "hold must be positive and rest non-negative");
  require(transition_ms >= 0.0 && transition_ms / 1000.0 <= std::min(hold_s, rest_s),
          "transition must fit inside hold and rest");
}

std::string_view gesture_name(int gesture_id) {
  if (gesture_id < 0 || gesture_id >= kGestures) throw Error(ErrorCode::SpecInvalid, "gesture id out of range");
  return kGestureNames[static_cast<std::size_t>(gesture_id)];
}

GestureTable GestureTable::defaults() {
  GestureTable t;
  t.targets.setZero();
  auto set_finger = [&](int g, int f, double spread, double cmc, double pip, double dip) {
    t.targets(g, finger(f, kSpread)) = spread;
    t.targets(g, finger(f, kCmc)) = cmc;
    t.targets(g, finger(f, kPip)) = pip;
    t.targets(g, finger(f, kDip)) = dip;
  };
  // Open hand: fingers spread and slightly hyperextended.
  set_finger(0, 0, 25, -10, -5, -5);
  set_finger(0, 1, 10, -10, 0, 0);
  set_finger(0, 2, 5, -10, 0, 0);
  set_finger(0, 3, -10, -10, 0, 0);
  set_finger(0, 4, -20, -10, 0, 0);
  // Closed fist.
  set_finger(1, 0, -15, 40, 50, 40);
  for (int f = 1; f < 5; ++f) set_finger(1, f, 0, 90, 90, 70);
  // Fine pinch, thumb to index.
  set_finger(2, 0, -20, 30, 25, 20);
  set_finger(2, 1, 0, 40, 50, 30);
  // Middle pinch, thumb to middle.
  set_finger(3, 0, -25, 35, 30, 25);
  set_finger(3, 2, 0, 45, 55, 35);
  // Thumb up: fist with the thumb extended.
  set_finger(4, 0, 20, -15, -10, -10);
  for (int f = 1; f < 5; ++f) set_finger(4, f, 0, 90, 90, 70);
  // Thumb down: thumb tucked, fingers half closed.
  set_finger(5, 0, -30, 60, 70, 60);
  for (int f = 1; f < 5; ++f) set_finger(5, f, 0, 70, 60, 40);
  t.targets(6, kFe) = 60;    // flexion
  t.targets(7, kFe) = -50;   // extension
  t.targets(8, kRu) = 20;    // radial deviation
  t.targets(9, kRu) = -30;   // ulnar deviation
  t.targets(10, kPs) = 70;   // supination
  return t;
}

std::vector<int> GestureTable::active_joints(int gesture_id) const {
  require(gesture_id >= 0 && gesture_id < kGestures, "gesture id out of range");
  std::vector<int> out;
  for (int j = 0; j < kJoints; ++j) {
    if (targets(gesture_id, j) != 0.0) out.push_back(j);
  }
  return out;
}

void GestureTable::validate() const {
  require(targets.allFinite(), "gesture targets must be finite");
  require((targets.array().abs() <= 180.0).all(), "gesture targets must lie in [-180, 180]");
  for (int g = 0; g < kGestures; ++g) require(!active_joints(g).empty(), "every gesture must move some joint");
  for (int g = 0; g < kGestures; ++g) {
    for (int h = g + 1; h < kGestures; ++h) require(targets.row(g) != targets.row(h), "gesture targets must differ");
  }
}

MixingModel MixingModel::random(std::uint64_t seed, int scatterers_per_transducer) {
  require(scatterers_per_transducer > 0, "need at least one scatterer");
  CounterRng rng(seed);
  MixingModel m;
  CounterRng emg = rng.fork(0);
  for (int c = 0; c < kEmgChannels; ++c) {
    for (int j = 0; j < kJoints; ++j) m.emg_mixing(c, j) = emg.uniform() < 0.6 ? emg.uniform(0.1, 1.0) : 0.0;
  }
  CounterRng us = rng.fork(1);
  for (int t = 0; t < kTransducers; ++t) {
    auto& beam = m.us_scatterers[static_cast<std::size_t>(t)];
    for (int s = 0; s < scatterers_per_transducer; ++s) {
      Scatterer sc;
      // Evenly spaced lanes with a random position inside each.
      const double lane = 340.0 / scatterers_per_transducer;
      sc.depth = 30.0 + lane * (s + us.uniform(0.2, 0.8));
      sc.amplitude = us.uniform(0.4, 1.0);
      for (int j = 0; j < kJoints; ++j) {
        sc.depth_per_deg[j] = us.uniform() < 0.5 ? 0.05 * us.normal() : 0.0;
        sc.gain_per_deg[j] = us.uniform() < 0.5 ? 0.3 / 90.0 * us.normal() : 0.0;
      }
      beam.push_back(sc);
    }
  }
  m.validate();
  return m;
}

MixingModel MixingModel::perturbed(std::uint64_t seed) const {
  CounterRng rng(seed);
  const double eps = session_perturbation;
  MixingModel m = *this;
  // Electrodes slide around the forearm: each channel blends with a neighbour.
  CounterRng emg = rng.fork(0);
  const double shift = std::clamp(eps * emg.normal(), -0.9, 0.9);
  const int dir = shift >= 0.0 ? 1 : -1;
  const double frac = std::abs(shift);
  for (int c = 0; c < kEmgChannels; ++c) {
    const int nb = (c + dir + kEmgChannels) % kEmgChannels;
    const double scale = std::max(0.2, 1.0 + eps * emg.normal());
    m.emg_mixing.row(c) = scale * ((1.0 - frac) * emg_mixing.row(c) + frac * emg_mixing.row(nb));
    m.emg_baseline[c] = scale * ((1.0 - frac) * emg_baseline[c] + frac * emg_baseline[nb]);
  }
  CounterRng us = rng.fork(1);
  for (auto& beam : m.us_scatterers) {
    for (auto& sc : beam) {
      sc.depth = std::clamp(sc.depth + 40.0 * eps * us.normal(), 10.0, kEchoLength - 10.0);
      sc.amplitude *= std::max(0.2, 1.0 + eps * us.normal());
      for (int j = 0; j < kJoints; ++j) {
        sc.depth_per_deg[j] *= 1.0 + eps * us.normal();
        sc.gain_per_deg[j] *= 1.0 + eps * us.normal();
      }
    }
  }
  m.validate();
  return m;
}

void MixingModel::validate() const {
  require(emg_mixing.allFinite() && emg_baseline.allFinite(), "EMG mixing must be finite");
  require((emg_mixing.array() >= 0.0).all() && (emg_baseline.array() >= 0.0).all(),
          "EMG envelopes must be non-negative");
  // A zero model is a valid degenerate case (flat envelope); otherwise every
  // channel must carry independent information.
  if (!emg_mixing.isZero(0.0)) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(emg_mixing);
    require(lu.rank() == kEmgChannels, "EMG mixing must have full row rank");
  }
  for (const auto& beam : us_scatterers) {
    require(!beam.empty(), "every transducer needs a scatterer");
    for (const auto& sc : beam) {
      require(std::isfinite(sc.depth) && sc.depth >= 0.0 && sc.depth < kEchoLength, "scatterer depth out of range");
      require(sc.amplitude >= 0.0 && sc.depth_per_deg.allFinite() && sc.gain_per_deg.allFinite(),
              "scatterer parameters must be finite");
    }
  }
  require(echo_width > 0.0 && echo_cycles >= 0.0, "echo shape must be positive");
  require(session_perturbation >= 0.0, "perturbation must be non-negative");
  require(emg_line_amplitude >= 0.0 && emg_white_sigma >= 0.0 && us_white_sigma >= 0.0,
          "noise levels must be non-negative");
}

void SynthOptions::validate() const {
  require(jitter_us >= 0 && jitter_us <= 1000, "jitter must lie in [0, 1000] us");
  require(sw_trigger_interval_s > 0.0, "software trigger interval must be positive");
  require(emg_tail_s >= 0.0, "EMG tail must be non-negative");
}

Eigen::Matrix<double, kJoints, 1> trajectory_at(const ProtocolSpec& protocol, const GestureTable& table, double t_s) {
  Eigen::Matrix<double, kJoints, 1> zero = Eigen::Matrix<double, kJoints, 1>::Zero();
  if (t_s < 0.0 || t_s >= protocol.set_duration_s()) return zero;
  const double slot = protocol.slot_s();
  const int k = std::min(static_cast<int>(t_s / slot), kGestures * protocol.reps - 1);
  const int g = k / protocol.reps;
  const double u = t_s - k * slot;
  const double tr = protocol.transition_ms / 1000.0;
  double level = 0.0;
  if (u < protocol.hold_s) {
    level = tr > 0.0 ? std::min(1.0, u / tr) : 1.0;
  } else {
    level = tr > 0.0 ? std::max(0.0, 1.0 - (u - protocol.hold_s) / tr) : 0.0;
  }
  return level * table.targets.row(g).transpose();
}

std::vector<GestureInterval> make_schedule(const ProtocolSpec& protocol) {
  std::vector<GestureInterval> out;
  for (int g = 0; g < kGestures; ++g) {
    for (int r = 0; r < protocol.reps; ++r) {
      const double t0 = (g * protocol.reps + r) * protocol.slot_s();
      out.push_back({g, std::llround(t0 * 1e6), std::llround((t0 + protocol.hold_s) * 1e6)});
    }
  }
  return out;
}

SyntheticSet gen_set(const ProtocolSpec& protocol, const GestureTable& table, const MixingModel& mix, int session_id,
                     int set_id, std::uint64_t seed, const SynthOptions& opts) {
  protocol.validate();
  table.validate();
  mix.validate();
  opts.validate();
  const CounterRng root(seed);
  const double duration = protocol.set_duration_s();

  SyntheticSet out;
  out.us_offset_us = opts.us_offset_us;
  out.glove_offset_us = opts.glove_offset_us;
  RawSet& raw = out.raw;

  // EMG: envelope-modulated band noise on the reference clock.
  {
    EmgStream& emg = raw.emg;
    const double fs = emg.sample_rate_hz;
    const auto n = static_cast<std::size_t>(std::llround((duration + opts.emg_tail_s) * fs));
    const double period = emg.period_us();
    IirFilter band = design_butterworth_highpass(fs, 20.0, 2);
    band.sections.push_back(lowpass_biquad(fs, 200.0));

    Eigen::MatrixXd carrier(static_cast<Eigen::Index>(n), kEmgChannels);
    CounterRng noise = root.fork(1);
    for (auto& v : carrier.reshaped()) v = noise.normal();
    carrier = filter_apply(band, carrier);
    for (int c = 0; c < kEmgChannels; ++c) {
      const double sd = std::sqrt(carrier.col(c).squaredNorm() / static_cast<double>(n));
      if (sd > 0.0) carrier.col(c) /= sd;
    }

    CounterRng white = root.fork(2);
    CounterRng phase = root.fork(3);
    std::array<double, kEmgChannels> line_phase{};
    for (auto& p : line_phase) p = phase.uniform(0.0, 2.0 * kPi);
    CounterRng jit = root.fork(4);

    emg.samples.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double t_s = static_cast<double>(k) * period * 1e-6;
      const auto a = trajectory_at(protocol, table, t_s);
      const Eigen::Matrix<double, kEmgChannels, 1> env = mix.emg_baseline + mix.emg_mixing * a.cwiseAbs() / 90.0;
      auto& s = emg.samples[k];
      s.timestamp_us = std::llround(static_cast<double>(k) * period) + jitter(jit, opts.jitter_us);
      for (int c = 0; c < kEmgChannels; ++c) {
        const double v = env[c] * carrier(static_cast<Eigen::Index>(k), c) +
                         mix.emg_line_amplitude * std::sin(2.0 * kPi * 50.0 * t_s + line_phase[static_cast<std::size_t>(c)]) +
                         mix.emg_white_sigma * white.normal();
        s.channels[static_cast<std::size_t>(c)] = static_cast<float>(v);
      }
    }
    // Hardware trigger every 50 pulses, latched on the sample being acquired.
    const double pulse_us = 1e6 / raw.us.prf_hz;
    const auto n_pulses = static_cast<std::uint64_t>(std::llround(duration * raw.us.prf_hz));
    for (std::uint64_t p = kPulsesPerTrigger; p <= n_pulses; p += kPulsesPerTrigger) {
      const double tau = static_cast<double>(opts.us_offset_us) + static_cast<double>(p - 1) * pulse_us;
      const double k = std::floor(tau / period);
      if (k >= 0.0 && k < static_cast<double>(n)) emg.samples[static_cast<std::size_t>(k)].trigger = true;
    }
  }

  // US: echo trains, transducers fired round-robin.
  {
    UsStream& us = raw.us;
    const double pulse_us = 1e6 / us.prf_hz;
    const auto n_pulses = static_cast<std::uint64_t>(std::llround(duration * us.prf_hz));
    CounterRng noise = root.fork(5);
    const double inv2w2 = 1.0 / (2.0 * mix.echo_width * mix.echo_width);
    const int reach = static_cast<int>(std::ceil(5.0 * mix.echo_width));
    us.frames.resize(n_pulses);
    for (std::uint64_t p = 1; p <= n_pulses; ++p) {
      UsFrame& f = us.frames[p - 1];
      f.pulse_index = p;
      f.transducer_id = static_cast<std::uint8_t>((p - 1) % kTransducers);
      const double tau_s = (static_cast<double>(opts.us_offset_us) + static_cast<double>(p - 1) * pulse_us) * 1e-6;
      const auto a = trajectory_at(protocol, table, tau_s);
      std::array<double, kEchoLength> line{};
      for (const auto& sc : mix.us_scatterers[f.transducer_id]) {
        const double d = std::clamp(sc.depth + sc.depth_per_deg.dot(a), 0.0, kEchoLength - 1.0);
        const double amp = sc.amplitude * std::max(0.1, 1.0 + sc.gain_per_deg.dot(a));
        const int lo = std::max(0, static_cast<int>(d) - reach);
        const int hi = std::min(kEchoLength - 1, static_cast<int>(d) + reach);
        for (int i = lo; i <= hi; ++i) {
          const double x = i - d;
          line[static_cast<std::size_t>(i)] += amp * std::exp(-x * x * inv2w2) * std::cos(2.0 * kPi * mix.echo_cycles * x);
        }
      }
      for (int i = 0; i < kEchoLength; ++i) {
        f.echo[static_cast<std::size_t>(i)] =
            static_cast<float>(line[static_cast<std::size_t>(i)] + mix.us_white_sigma * noise.normal());
      }
    }
  }

  // Glove on its own clock, plus the latent trajectory it samples.
  {
    GloveStream& glove = raw.glove;
    const double period = glove.period_us();
    const auto n = static_cast<std::size_t>(std::llround(duration * glove.sample_rate_hz));
    const WristAxisMap axes{};
    CounterRng jit = root.fork(6);
    glove.samples.resize(n);
    out.latent.time_us.resize(n);
    out.latent.angles_deg.resize(static_cast<Eigen::Index>(n), kJoints);
    for (std::size_t j = 0; j < n; ++j) {
      const double t_true_us = static_cast<double>(opts.glove_offset_us) + static_cast<double>(j) * period;
      const auto a = trajectory_at(protocol, table, t_true_us * 1e-6);
      out.latent.time_us[j] = std::llround(t_true_us);
      out.latent.angles_deg.row(static_cast<Eigen::Index>(j)) = a.transpose();
      auto& s = glove.samples[j];
      s.timestamp_us = std::llround(static_cast<double>(j) * period) + jitter(jit, opts.jitter_us);
      for (int i = 0; i < kFingerAngles; ++i) s.finger_angles_deg[static_cast<std::size_t>(i)] = static_cast<float>(a[i]);
      const EulerAnglesZYX e = axes.from_wrist_dofs(a.tail<kWristDofs>());
      const Eigen::Vector4d q = euler_zyx_to_quat(e.yaw_deg, e.pitch_deg, e.roll_deg);
      for (int i = 0; i < 4; ++i) s.quaternion[static_cast<std::size_t>(i)] = static_cast<float>(q[i]);
    }
  }

  // Software trigger events seen by both the EMG host and the glove.
  {
    CounterRng jit = root.fork(7);
    const double glove_period = raw.glove.period_us();
    const double end_us = duration * 1e6;
    for (double t = 5e6; t < end_us - 5e6; t += opts.sw_trigger_interval_s * 1e6) {
      const double g = t - static_cast<double>(opts.glove_offset_us);
      const auto j = static_cast<std::int64_t>(std::llround(g / glove_period));
      if (j < 0 || j >= static_cast<std::int64_t>(raw.glove.samples.size())) continue;
      raw.meta.sw_trigger_us.push_back(std::llround(t) + jitter(jit, opts.jitter_us));
      raw.glove.samples[static_cast<std::size_t>(j)].sw_trigger = true;
    }
  }

  raw.meta.session_id = session_id;
  raw.meta.set_id = set_id;
  raw.meta.schedule = make_schedule(protocol);
  return out;
}

std::vector<SyntheticSet> gen_session(const ProtocolSpec& protocol, const GestureTable& table, const MixingModel& base,
                                      int session_id, std::uint64_t seed, const SynthOptions& opts) {
  protocol.validate();
  require(session_id >= 0 && session_id < protocol.n_sessions, "session id out of range");
  const CounterRng root(seed);
  const MixingModel mix = base.perturbed(root.fork(0).next_u64());
  std::vector<SyntheticSet> out;
  for (int k = 0; k < protocol.n_sets; ++k) {
    out.push_back(gen_set(protocol, table, mix, session_id, k, root.fork(1 + static_cast<std::uint64_t>(k)).next_u64(), opts));
  }
  return out;
}

Bytes serialize_latent(const Latent& latent) {
  ByteWriter w;
  w.raw("LAT1");
  w.u64(latent.time_us.size());
  w.u32(static_cast<std::uint32_t>(latent.angles_deg.cols()));
  for (std::size_t i = 0; i < latent.time_us.size(); ++i) {
    w.u64(static_cast<std::uint64_t>(latent.time_us[i]));
    for (Eigen::Index j = 0; j < latent.angles_deg.cols(); ++j) w.f64(latent.angles_deg(static_cast<Eigen::Index>(i), j));
  }
  return w.bytes();
}

Latent parse_latent(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != "LAT1") throw Error(ErrorCode::BadMagic, "latent file must start with LAT1");
  const std::uint64_t n = r.u64();
  const std::uint32_t cols = r.u32();
  if (cols != kJoints) throw Error(ErrorCode::InvalidRecord, "latent file must have 23 columns");
  if (r.remaining() != n * (8 + 8ULL * cols)) throw Error(ErrorCode::TruncatedRecord, "latent size mismatch");
  Latent l;
  l.time_us.resize(n);
  l.angles_deg.resize(static_cast<Eigen::Index>(n), cols);
  for (std::uint64_t i = 0; i < n; ++i) {
    l.time_us[i] = static_cast<std::int64_t>(r.u64());
    for (Eigen::Index j = 0; j < cols; ++j) l.angles_deg(static_cast<Eigen::Index>(i), j) = r.f64();
  }
  return l;
}

std::filesystem::path set_dir(const std::filesystem::path& root, int session_id, int set_id) {
  return root / ("session" + std::to_string(session_id)) / ("set" + std::to_string(set_id));
}

void save_synthetic_set(const std::filesystem::path& dir, const SyntheticSet& set) {
  save_set(dir, set.raw);
  write_file(dir / "latent.bin", serialize_latent(set.latent));
}

std::vector<std::filesystem::path> gen_corpus(const std::filesystem::path& root, const ProtocolSpec& protocol,
                                              const GestureTable& table, const MixingModel& base, std::uint64_t seed,
                                              const SynthOptions& opts, int threads) {
  protocol.validate();
  const CounterRng rng(seed);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(protocol.n_sessions));
  auto one = [&](int s) {
    try {
      const auto sets = gen_session(protocol, table, base, s, rng.fork(static_cast<std::uint64_t>(s)).next_u64(), opts);
      for (const auto& set : sets) save_synthetic_set(set_dir(root, s, set.raw.meta.set_id), set);
    } catch (...) {
      errors[static_cast<std::size_t>(s)] = std::current_exception();
    }
  };
  const int workers = std::clamp(threads, 1, protocol.n_sessions);
  if (workers == 1) {
    for (int s = 0; s < protocol.n_sessions; ++s) one(s);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&] {
        for (int s = next++; s < protocol.n_sessions; s = next++) one(s);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<std::filesystem::path> dirs;
  for (int s = 0; s < protocol.n_sessions; ++s) {
    for (int k = 0; k < protocol.n_sets; ++k) dirs.push_back(set_dir(root, s, k));
  }
  return dirs;
}

CorruptMode parse_corrupt_mode(std::string_view s) {
  if (s == "noise-swamp") return CorruptMode::NoiseSwamp;
  if (s == "channel-dropout") return CorruptMode::ChannelDropout;
  if (s == "detach") return CorruptMode::Detach;
  throw Error(ErrorCode::UnknownMode, "unknown corruption mode '" + std::string(s) + "'");
}

std::string_view to_string(CorruptMode m) {
  switch (m) {
    case CorruptMode::NoiseSwamp: return "noise-swamp";
    case CorruptMode::ChannelDropout: return "channel-dropout";
    case CorruptMode::Detach: return "detach";
  }
  return "?";
}

namespace {

// Applies the corruption to one channel given as a strided view.
template <typename Get>
void corrupt_channel(std::size_t n, Get&& at, CorruptMode mode, double snr_db, CounterRng& rng) {
  double power = 0.0;
  for (std::size_t i = 0; i < n; ++i) power += static_cast<double>(at(i)) * static_cast<double>(at(i));
  power = n > 0 ? power / static_cast<double>(n) : 0.0;
  switch (mode) {
    case CorruptMode::ChannelDropout:
      for (std::size_t i = 0; i < n; ++i) at(i) = 0.0f;
      break;
    case CorruptMode::NoiseSwamp: {
      const double sd = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
      for (std::size_t i = 0; i < n; ++i) at(i) = static_cast<float>(at(i) + sd * rng.normal());
      break;
    }
    case CorruptMode::Detach: {
      const double sd = std::sqrt(power);
      for (std::size_t i = 0; i < n; ++i) at(i) = static_cast<float>(sd * rng.normal());
      break;
    }
  }
}

}  // namespace

RawSet corrupt_modality(const RawSet& set, const Corruption& c, std::uint64_t seed) {
  if (!std::isfinite(c.snr_db)) throw Error(ErrorCode::SpecInvalid, "snr must be finite");
  RawSet out = set;
  const CounterRng root(seed);
  if (c.modality == Modality::Emg) {
    if (c.mode == CorruptMode::ChannelDropout && (c.channel < 0 || c.channel >= kEmgChannels)) {
      throw Error(ErrorCode::SpecInvalid, "EMG channel out of range");
    }
    auto& s = out.emg.samples;
    for (int ch = 0; ch < kEmgChannels; ++ch) {
      if (c.mode == CorruptMode::ChannelDropout && ch != c.channel) continue;
      CounterRng rng = root.fork(static_cast<std::uint64_t>(ch));
      const auto idx = static_cast<std::size_t>(ch);
      corrupt_channel(s.size(), [&](std::size_t i) -> float& { return s[i].channels[idx]; }, c.mode, c.snr_db, rng);
    }
  } else if (c.modality == Modality::Us) {
    if (c.mode == CorruptMode::ChannelDropout && (c.channel < 0 || c.channel >= kTransducers)) {
      throw Error(ErrorCode::SpecInvalid, "transducer out of range");
    }
    for (int t = 0; t < kTransducers; ++t) {
      if (c.mode == CorruptMode::ChannelDropout && t != c.channel) continue;
      std::vector<UsFrame*> frames;
      for (auto& f : out.us.frames) {
        if (f.transducer_id == t) frames.push_back(&f);
      }
      CounterRng rng = root.fork(static_cast<std::uint64_t>(t));
      corrupt_channel(
          frames.size() * kEchoLength,
          [&](std::size_t i) -> float& { return frames[i / kEchoLength]->echo[i % kEchoLength]; }, c.mode, c.snr_db,
          rng);
    }
  } else {
    throw Error(ErrorCode::SpecInvalid, "corruption targets a single modality");
  }
  return out;
}

}  // namespace musefuse
