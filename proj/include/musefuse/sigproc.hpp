#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "musefuse/error.hpp"

namespace musefuse {

/// One second-order section, a0 normalized to 1.
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0, a1 = 0.0, a2 = 0.0;

  std::complex<double> response(double f_hz, double fs_hz) const;
  bool is_stable() const { return std::abs(a2) < 1.0 && std::abs(a1) < 1.0 + a2; }
};

/// Cascade of second-order sections.
struct IirFilter {
  std::vector<Biquad> sections;

  std::complex<double> response(double f_hz, double fs_hz) const;
  double magnitude_db(double f_hz, double fs_hz) const { return 20.0 * std::log10(std::abs(response(f_hz, fs_hz))); }
  bool is_stable() const;
  /// Coefficients as text, one section per line.
  std::string describe() const;
};

/// Direct-form-II-transposed state, two values per section, for one channel.
struct FilterState {
  std::vector<double> z;  // 2 * n_sections

  explicit FilterState(const IirFilter& f) : z(2 * f.sections.size(), 0.0) {}
};

/// Butterworth high-pass via bilinear transform with pre-warping, realized as
/// order/2 biquads. Throws InvalidCutoff unless 0 < fc < fs/2 and order is even.
IirFilter design_butterworth_highpass(double fs_hz, double fc_hz, int order);

/// Single-biquad notch (RBJ form). Throws InvalidCenter unless 0 < f0 < fs/2, q > 0.
IirFilter design_notch(double fs_hz, double f0_hz, double q);

/// Concatenates the sections of two filters (a then b).
IirFilter cascade(const IirFilter& a, const IirFilter& b);

/// Causal forward pass over one channel, carrying `state`.
template <typename Scalar>
void filter_apply_inplace(const IirFilter& filter, std::span<Scalar> x, FilterState& state) {
  for (auto& v : x) {
    double s = static_cast<double>(v);
    if (!std::isfinite(s)) throw Error(ErrorCode::NonFiniteInput, "non-finite sample in filter input");
    for (std::size_t k = 0; k < filter.sections.size(); ++k) {
      const auto& c = filter.sections[k];
      double& z1 = state.z[2 * k];
      double& z2 = state.z[2 * k + 1];
      const double y = c.b0 * s + z1;
      z1 = c.b1 * s - c.a1 * y + z2;
      z2 = c.b2 * s - c.a2 * y;
      s = y;
    }
    v = static_cast<Scalar>(s);
  }
}

/// Filters every column of `signal` (rows are samples) from a fresh state.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> filter_apply(const IirFilter& filter,
                                                                                   const Eigen::MatrixBase<Derived>& signal) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out = signal;  // column-major: columns are contiguous
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    FilterState st(filter);
    filter_apply_inplace(filter, std::span<Scalar>(out.col(c).data(), static_cast<std::size_t>(out.rows())), st);
  }
  return out;
}

struct EulerAnglesZYX {
  double yaw_deg = 0.0;
  double pitch_deg = 0.0;
  double roll_deg = 0.0;
  bool near_gimbal_lock = false;  // |pitch| > 89.9 deg
};

/// ZYX (yaw-pitch-roll) decomposition of a quaternion (w, x, y, z), renormalized
/// internally. Throws ZeroQuaternion.
EulerAnglesZYX quat_to_euler_zyx(double w, double x, double y, double z);

/// Inverse of quat_to_euler_zyx: q = qz(yaw) * qy(pitch) * qx(roll), returned as (w, x, y, z).
Eigen::Vector4d euler_zyx_to_quat(double yaw_deg, double pitch_deg, double roll_deg);

/// Which Euler angle carries each anatomical wrist DoF. The glove's axis
/// convention is not documented, so this is a configuration constant.
struct WristAxisMap {
  enum class Axis { Yaw, Pitch, Roll };
  Axis flexion_extension = Axis::Roll;
  Axis radial_ulnar = Axis::Pitch;
  Axis pronation_supination = Axis::Yaw;

  /// [flexion-extension, radial-ulnar, pronation-supination] in degrees.
  Eigen::Vector3d to_wrist_dofs(const EulerAnglesZYX& e) const;
  /// Inverse of to_wrist_dofs.
  EulerAnglesZYX from_wrist_dofs(const Eigen::Vector3d& dofs) const;
};

/// Wraps an angle into (-180, 180].
double wrap_deg(double a);

/// Piecewise-linear resampling of angle channels (columns of `src_values`).
/// Each channel is unwrapped across the +-180 seam before interpolation and the
/// output re-wrapped; destination times outside the source range hold the edge
/// value. Throws EmptySource.
Eigen::MatrixXd resample_linear(std::span<const double> src_times, const Eigen::MatrixXd& src_values,
                                std::span<const double> dst_times);

struct NormScale {
  Eigen::VectorXd min;
  Eigen::VectorXd max;
  std::vector<bool> constant;  // channel had max == min and maps to 0
  int scope_set_id = -1;

  /// Maps x to 2 (x - min) / (max - min) - 1 per column.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
};

struct Normalized {
  Eigen::MatrixXd values;
  NormScale scale;
};

/// Channel-wise (column-wise) min-max normalization to [-1, 1].
Normalized minmax_normalize(const Eigen::MatrixXd& channels, int scope_set_id = -1);

}  // namespace musefuse
