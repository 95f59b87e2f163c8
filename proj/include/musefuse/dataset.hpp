#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "musefuse/sigproc.hpp"
#include "musefuse/streams.hpp"

namespace musefuse {

inline constexpr int kWindowSamples = 100;  // 200 ms at 500 Hz
inline constexpr int kHandDofs = 20;
inline constexpr int kWristDofs = 3;
inline constexpr int kJoints = kHandDofs + kWristDofs;
inline constexpr int kSessions = 3;
inline constexpr int kSetsPerSession = 5;

/// Joint names in label order: thumb..pinky x [CMC spread, CMC flexion, PIP
/// flexion, DIP flexion], then wrist flexion-extension, radial-ulnar,
/// pronation-supination.
const std::array<std::string_view, kJoints>& joint_names();

struct DatasetEntry {
  using EmgWindow = Eigen::Matrix<float, kWindowSamples, kEmgChannels, Eigen::RowMajor>;
  using UsScan = Eigen::Matrix<float, kEchoLength, kTransducers, Eigen::RowMajor>;
  using Label = Eigen::Matrix<float, kJoints, 1>;

  std::uint16_t session_id = 0;
  std::uint16_t set_id = 0;
  std::int64_t t_end_us = 0;
  EmgWindow emg = EmgWindow::Zero();
  UsScan us = UsScan::Zero();
  Label label = Label::Zero();

  EIGEN_MAKE_ALIGNED_OPERATOR_NEW
};

using Entries = std::vector<DatasetEntry, Eigen::aligned_allocator<DatasetEntry>>;
using EntryRefs = std::vector<const DatasetEntry*>;

struct BuildOptions {
  double highpass_hz = 20.0;
  int highpass_order = 4;
  double notch_hz = 50.0;
  double notch_q = 30.0;
  WristAxisMap wrist_axes{};
  /// Skip interior scans with a missing or out-of-order transducer instead of
  /// throwing IncompleteScan.
  bool skip_incomplete_scans = false;
};

struct BuildResult {
  Entries entries;
  std::size_t dropped_insufficient_history = 0;
  std::size_t skipped_incomplete_scans = 0;
  std::size_t gimbal_lock_samples = 0;
  NormScale emg_scale;
  NormScale us_scale;
};

/// EMG conditioning (high-pass then notch, causal), per-set min-max
/// normalization of EMG channels and US transducers, one entry per full-arm
/// scan of 4 consecutive frames. Throws IncompleteScan, InsufficientHistory.
BuildResult build_entries(const AlignedSession& session, const BuildOptions& opts = {});

/// Conditioned, normalized EMG (rows = samples) for a session, as used by build_entries.
Eigen::MatrixXd condition_emg(const EmgStream& emg, const BuildOptions& opts = {});

/// Per-sample joint-angle labels (rows = glove samples, 23 columns) and their EMG-clock times.
struct GloveAngles {
  std::vector<double> emg_time_us;
  Eigen::MatrixXd angles_deg;
  std::size_t gimbal_lock_samples = 0;
};
GloveAngles glove_angles(const GloveStream& glove, std::int64_t offset_us, const WristAxisMap& axes = {});

struct SetRef {
  int session_id = 0;
  int set_id = 0;
  auto operator<=>(const SetRef&) const = default;
};

enum class Scheme { Aggregated, Intersession };
std::string_view to_string(Scheme s);
Scheme parse_scheme(std::string_view s);

struct SplitSpec {
  Scheme scheme = Scheme::Aggregated;
  int fold_or_test_session = 0;
  std::vector<SetRef> train, val, test;
};

/// Per session: set `fold` is test, (fold + 1) mod 5 validation, the rest training.
SplitSpec split_aggregated(int fold, int n_sessions = kSessions, int n_sets = kSetsPerSession);
/// All sets of `test_session` are test; other sessions give sets 0..3 to
/// training and set 4 to validation.
SplitSpec split_intersession(int test_session, int n_sessions = kSessions, int n_sets = kSetsPerSession);

struct Partition {
  EntryRefs train, val, test;
};
Partition select(const Entries& entries, const SplitSpec& split);
EntryRefs select(const Entries& entries, std::span<const SetRef> sets);

Bytes serialize_dataset(const Entries& entries);
Entries parse_dataset(std::span<const std::uint8_t> bytes);

}  // namespace musefuse
