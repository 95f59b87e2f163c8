#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "musefuse/binary_io.hpp"

namespace musefuse {

inline constexpr int kEmgChannels = 8;
inline constexpr int kEchoLength = 400;
inline constexpr int kTransducers = 4;
inline constexpr int kFingerAngles = 20;
inline constexpr std::uint64_t kPulsesPerTrigger = 50;
inline constexpr std::int64_t kGloveSyncUncertaintyUs = 8000;

struct EmgSample {
  std::int64_t timestamp_us = 0;
  std::array<float, kEmgChannels> channels{};
  bool trigger = false;
};

struct EmgStream {
  double sample_rate_hz = 500.0;
  std::vector<EmgSample> samples;

  double period_us() const { return 1e6 / sample_rate_hz; }
};

struct UsFrame {
  std::uint64_t pulse_index = 1;
  std::uint8_t transducer_id = 0;
  std::array<float, kEchoLength> echo{};
};

struct UsStream {
  double prf_hz = 30.0;
  std::vector<UsFrame> frames;
};

struct GloveSample {
  std::int64_t timestamp_us = 0;
  std::array<float, 4> quaternion{1.0f, 0.0f, 0.0f, 0.0f};  // w, x, y, z
  std::array<float, kFingerAngles> finger_angles_deg{};
  bool sw_trigger = false;
};

struct GloveStream {
  double sample_rate_hz = 120.0;
  std::vector<GloveSample> samples;

  double period_us() const { return 1e6 / sample_rate_hz; }
};

struct GestureInterval {
  int gesture_id = 0;
  std::int64_t start_us = 0;
  std::int64_t end_us = 0;

  bool operator==(const GestureInterval&) const = default;
};

/// Contents of meta.txt. Software trigger times are on the EMG clock.
struct SessionMeta {
  int session_id = 0;
  int set_id = 0;
  std::vector<std::int64_t> sw_trigger_us;
  std::vector<GestureInterval> schedule;

  bool operator==(const SessionMeta&) const = default;
};

// Binary formats. parse_* validate the stream invariants and throw Error with
// BadMagic, TruncatedRecord, NonMonotonicTimestamp or InvalidRecord.
EmgStream parse_emg(std::span<const std::uint8_t> bytes);
UsStream parse_us(std::span<const std::uint8_t> bytes);
GloveStream parse_glove(std::span<const std::uint8_t> bytes);
SessionMeta parse_meta(const std::string& text);

Bytes serialize_emg(const EmgStream& s);
Bytes serialize_us(const UsStream& s);
Bytes serialize_glove(const GloveStream& s);
std::string serialize_meta(const SessionMeta& m);

/// One acquisition set as stored on disk (emg.bin, us.bin, glove.bin, meta.txt).
struct RawSet {
  EmgStream emg;
  UsStream us;
  GloveStream glove;
  SessionMeta meta;
};

RawSet load_set(const std::filesystem::path& dir);
void save_set(const std::filesystem::path& dir, const RawSet& set);

// ---------------------------------------------------------------------------
// Alignment

struct UsAnchor {
  std::uint64_t pulse_index = 0;
  std::int64_t emg_time_us = 0;
};

/// Maps US pulse indices onto the EMG clock. Piecewise-linear between anchors;
/// outside the anchor range the least-squares clock rate over all anchors is
/// used, starting from the nearest anchor.
class UsTimeMap {
 public:
  UsTimeMap() = default;
  explicit UsTimeMap(std::vector<UsAnchor> anchors);

  double time_us(double pulse_index) const;
  std::int64_t operator()(std::uint64_t pulse_index) const;

  const std::vector<UsAnchor>& anchors() const { return anchors_; }
  /// Least-squares clock model over all anchors: t = intercept + rate * pulse.
  double rate_us_per_pulse() const { return rate_; }
  double fitted_time_us(double pulse_index) const { return intercept_ + rate_ * pulse_index; }

 private:
  std::vector<UsAnchor> anchors_;
  double rate_ = 0.0;
  double intercept_ = 0.0;
};

/// Rising edges of the EMG trigger bit (sample indices).
std::vector<std::size_t> trigger_edges(const EmgStream& emg);

/// Pairs the hardware trigger edges with pulse multiples of 50.
/// Throws NoTriggers or TriggerCountMismatch.
UsTimeMap align_us_to_emg(const EmgStream& emg, const UsStream& us);

struct GloveAlignment {
  std::int64_t offset_us = 0;  // add to glove timestamps to reach the EMG clock
  std::int64_t max_residual_us = 0;
  double mean_residual_us = 0.0;
  std::size_t n_events = 0;
  std::vector<std::string> warnings;
};

/// Offset between the EMG-side software trigger times (from meta.txt) and the
/// glove sw_trigger edges. Throws NoSoftwareTrigger.
GloveAlignment align_glove_to_emg(std::span<const std::int64_t> emg_sw_trigger_us, const GloveStream& glove);

struct AlignedSession {
  EmgStream emg;
  UsStream us;
  GloveStream glove;
  UsTimeMap us_time_map;
  GloveAlignment glove_alignment;
  int session_id = 0;
  int set_id = 0;
  std::vector<GestureInterval> gesture_schedule;
  std::vector<std::int64_t> sw_trigger_us;

  std::int64_t glove_time_offset_us() const { return glove_alignment.offset_us; }
};

AlignedSession align_set(RawSet set);

/// Residuals are reported beyond the quantization of the sampling grid: an
/// anchor that deviates from the fitted clock by less than one EMG sample
/// period (or a glove event by less than one glove period) counts as zero.
struct AlignmentReport {
  double max_us_anchor_residual_us = 0.0;
  double mean_us_anchor_residual_us = 0.0;
  double max_glove_residual_us = 0.0;
  double mean_glove_residual_us = 0.0;
  std::size_t dropped_us_frames = 0;
  std::size_t dropped_emg_samples = 0;
  std::size_t dropped_glove_samples = 0;
  double emg_duration_s = 0.0;
  double us_duration_s = 0.0;
  double glove_duration_s = 0.0;
  bool duration_mismatch = false;  // US or glove differs from EMG by more than 1 %
  std::vector<std::string> notes;
};

AlignmentReport validate_alignment(const AlignedSession& session);

}  // namespace musefuse
