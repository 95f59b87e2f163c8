#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "musefuse/dataset.hpp"
#include "musefuse/models.hpp"
#include "musefuse/rng.hpp"
#include "musefuse/streams.hpp"

namespace musefuse {

inline constexpr int kGestures = 11;

/// Acquisition schedule. Each gesture is performed `reps` times in a row,
/// every repetition being a hold followed by a rest.
struct ProtocolSpec {
  int n_sessions = 3;
  int n_sets = 5;
  int reps = 6;
  double hold_s = 4.0;
  double rest_s = 1.0;
  double transition_ms = 300.0;

  double slot_s() const { return hold_s + rest_s; }
  double set_duration_s() const { return kGestures * reps * slot_s(); }
  /// Throws SpecInvalid.
  void validate() const;
};

std::string_view gesture_name(int gesture_id);

/// Target joint angles per gesture, rows in gesture order, columns in label order.
struct GestureTable {
  Eigen::Matrix<double, kGestures, kJoints> targets;

  static GestureTable defaults();
  /// Joints with a nonzero target for this gesture.
  std::vector<int> active_joints(int gesture_id) const;
  void validate() const;
};

/// Echo generator for one scatterer in one transducer's beam.
struct Scatterer {
  double depth = 200.0;  // samples
  double amplitude = 1.0;
  Eigen::Matrix<double, kJoints, 1> depth_per_deg = Eigen::Matrix<double, kJoints, 1>::Zero();
  Eigen::Matrix<double, kJoints, 1> gain_per_deg = Eigen::Matrix<double, kJoints, 1>::Zero();
};

struct MixingModel {
  /// Channel envelope = baseline + emg_mixing * |angles| / 90.
  Eigen::Matrix<double, kEmgChannels, kJoints> emg_mixing = Eigen::Matrix<double, kEmgChannels, kJoints>::Zero();
  Eigen::Matrix<double, kEmgChannels, 1> emg_baseline = Eigen::Matrix<double, kEmgChannels, 1>::Constant(0.1);
  std::array<std::vector<Scatterer>, kTransducers> us_scatterers;
  double echo_width = 3.0;        // samples, Gaussian sigma
  double echo_cycles = 0.15;      // carrier cycles per sample
  double session_perturbation = 0.15;

  double emg_line_amplitude = 0.5;  // 50 Hz interference
  double emg_white_sigma = 0.05;
  double us_white_sigma = 0.05;

  /// Positive EMG mixing, scatterers spread over the echo line.
  static MixingModel random(std::uint64_t seed, int scatterers_per_transducer = 5);
  /// Session copy: electrodes rotated/rescaled and transducers shifted by an
  /// amount proportional to session_perturbation.
  MixingModel perturbed(std::uint64_t seed) const;
  /// Throws SpecInvalid (rank-deficient mixing, negative noise, empty beams).
  void validate() const;
};

struct SynthOptions {
  std::int64_t us_offset_us = 0;     // true time of US pulse 1
  std::int64_t glove_offset_us = 0;  // true time of glove clock zero
  std::int64_t jitter_us = 0;        // timestamp jitter bound, < 1000
  double sw_trigger_interval_s = 20.0;
  /// Extra EMG recording after the schedule ends, so late US triggers are
  /// still captured when the US device starts after the EMG host.
  double emg_tail_s = 0.0;

  void validate() const;
};

/// True angle trajectory, one row per glove sample.
struct Latent {
  std::vector<std::int64_t> time_us;  // true time (EMG clock)
  Eigen::MatrixXd angles_deg;         // rows x 23
};

struct SyntheticSet {
  RawSet raw;
  Latent latent;
  std::int64_t us_offset_us = 0;
  std::int64_t glove_offset_us = 0;
};

/// Angles (label order) at true time t_s, rest outside the schedule.
Eigen::Matrix<double, kJoints, 1> trajectory_at(const ProtocolSpec& protocol, const GestureTable& table, double t_s);

std::vector<GestureInterval> make_schedule(const ProtocolSpec& protocol);

SyntheticSet gen_set(const ProtocolSpec& protocol, const GestureTable& table, const MixingModel& session_mixing,
                     int session_id, int set_id, std::uint64_t seed, const SynthOptions& opts = {});

/// All sets of one session; the base mixing is perturbed once per session.
std::vector<SyntheticSet> gen_session(const ProtocolSpec& protocol, const GestureTable& table, const MixingModel& base,
                                      int session_id, std::uint64_t seed, const SynthOptions& opts = {});

Bytes serialize_latent(const Latent& latent);
Latent parse_latent(std::span<const std::uint8_t> bytes);

std::filesystem::path set_dir(const std::filesystem::path& root, int session_id, int set_id);
/// Writes the four stream files plus latent.bin.
void save_synthetic_set(const std::filesystem::path& dir, const SyntheticSet& set);

/// Generates every session/set under `root`, sessions in parallel when
/// threads > 1. Returns the set directories in (session, set) order.
std::vector<std::filesystem::path> gen_corpus(const std::filesystem::path& root, const ProtocolSpec& protocol,
                                              const GestureTable& table, const MixingModel& base,
                                              std::uint64_t seed,
                                              const SynthOptions& opts = {}, int threads = 1);

// ---------------------------------------------------------------------------
// Corruption

enum class CorruptMode { NoiseSwamp, ChannelDropout, Detach };

/// Accepts "noise-swamp", "channel-dropout", "detach". Throws UnknownMode.
CorruptMode parse_corrupt_mode(std::string_view s);
std::string_view to_string(CorruptMode m);

struct Corruption {
  Modality modality = Modality::Emg;  // Emg or Us
  CorruptMode mode = CorruptMode::NoiseSwamp;
  double snr_db = 0.0;  // noise-swamp
  int channel = 0;      // EMG channel or US transducer for channel-dropout
};

/// Degrades one modality of a set, keeping counts and timing. Noise-swamp adds
/// white noise whose power is the channel power scaled by 10^(-snr/10); detach
/// replaces the signal with noise of the same power.
RawSet corrupt_modality(const RawSet& set, const Corruption& c, std::uint64_t seed);

}  // namespace musefuse
