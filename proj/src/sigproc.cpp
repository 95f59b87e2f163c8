#include "musefuse/sigproc.hpp"

#include <algorithm>
#include <numbers>
#include <sstream>

namespace musefuse {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr double kRad2Deg = 180.0 / kPi;
constexpr double kDeg2Rad = kPi / 180.0;
}  // namespace

std::complex<double> Biquad::response(double f_hz, double fs_hz) const {
  const std::complex<double> zi = std::polar(1.0, -2.0 * kPi * f_hz / fs_hz);  // z^-1
  return (b0 + b1 * zi + b2 * zi * zi) / (1.0 + a1 * zi + a2 * zi * zi);
}

std::complex<double> IirFilter::response(double f_hz, double fs_hz) const {
  std::complex<double> h = 1.0;
  for (const auto& s : sections) h *= s.response(f_hz, fs_hz);
  return h;
}

bool IirFilter::is_stable() const {
  return std::all_of(sections.begin(), sections.end(), [](const Biquad& s) { return s.is_stable(); });
}

std::string IirFilter::describe() const {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < sections.size(); ++i) {
    const auto& s = sections[i];
    out << "section " << i << ": b = [" << s.b0 << ", " << s.b1 << ", " << s.b2 << "], a = [1, " << s.a1 << ", " << s.a2
        << "]\n";
  }
  return out.str();
}

IirFilter design_butterworth_highpass(double fs_hz, double fc_hz, int order) {
  if (!(fc_hz > 0.0) || !(fc_hz < fs_hz / 2.0)) {
    throw Error(ErrorCode::InvalidCutoff, "cutoff must lie in (0, fs/2)");
  }
  if (order <= 0 || order % 2 != 0) throw Error(ErrorCode::InvalidCutoff, "order must be positive and even");

  // Pre-warped analog cutoff with the bilinear constant folded in (K = 1).
  const double w = std::tan(kPi * fc_hz / fs_hz);
  IirFilter f;
  for (int k = 1; k <= order / 2; ++k) {
    // Prototype pole pair damping: s^2 + 2 zeta s + 1, mapped s -> w / s.
    const double zeta = std::sin((2.0 * k - 1.0) * kPi / (2.0 * order));
    const double a0 = 1.0 + 2.0 * zeta * w + w * w;
    Biquad s;
    s.b0 = 1.0 / a0;
    s.b1 = -2.0 / a0;
    s.b2 = 1.0 / a0;
    s.a1 = (2.0 * w * w - 2.0) / a0;
    s.a2 = (1.0 - 2.0 * zeta * w + w * w) / a0;
    f.sections.push_back(s);
  }
  return f;
}

IirFilter design_notch(double fs_hz, double f0_hz, double q) {
  if (!(f0_hz > 0.0) || !(f0_hz < fs_hz / 2.0)) throw Error(ErrorCode::InvalidCenter, "center must lie in (0, fs/2)");
  if (!(q > 0.0)) throw Error(ErrorCode::InvalidCenter, "q must be positive");
  const double w0 = 2.0 * kPi * f0_hz / fs_hz;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  Biquad s;
  s.b0 = 1.0 / a0;
  s.b1 = -2.0 * std::cos(w0) / a0;
  s.b2 = 1.0 / a0;
  s.a1 = -2.0 * std::cos(w0) / a0;
  s.a2 = (1.0 - alpha) / a0;
  return IirFilter{{s}};
}

IirFilter cascade(const IirFilter& a, const IirFilter& b) {
  IirFilter out = a;
  out.sections.insert(out.sections.end(), b.sections.begin(), b.sections.end());
  return out;
}

EulerAnglesZYX quat_to_euler_zyx(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > 1e-12)) throw Error(ErrorCode::ZeroQuaternion, "quaternion norm is zero");
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  EulerAnglesZYX e;
  e.yaw_deg = kRad2Deg * std::atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z));
  e.pitch_deg = kRad2Deg * std::asin(std::clamp(2.0 * (w * y - z * x), -1.0, 1.0));
  e.roll_deg = kRad2Deg * std::atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y));
  e.yaw_deg = wrap_deg(e.yaw_deg);
  e.roll_deg = wrap_deg(e.roll_deg);
  e.near_gimbal_lock = std::abs(e.pitch_deg) > 89.9;
  return e;
}

Eigen::Vector4d euler_zyx_to_quat(double yaw_deg, double pitch_deg, double roll_deg) {
  const double cy = std::cos(0.5 * yaw_deg * kDeg2Rad), sy = std::sin(0.5 * yaw_deg * kDeg2Rad);
  const double cp = std::cos(0.5 * pitch_deg * kDeg2Rad), sp = std::sin(0.5 * pitch_deg * kDeg2Rad);
  const double cr = std::cos(0.5 * roll_deg * kDeg2Rad), sr = std::sin(0.5 * roll_deg * kDeg2Rad);
  return {cr * cp * cy + sr * sp * sy, sr * cp * cy - cr * sp * sy, cr * sp * cy + sr * cp * sy,
          cr * cp * sy - sr * sp * cy};
}

namespace {
double pick(const EulerAnglesZYX& e, WristAxisMap::Axis a) {
  switch (a) {
    case WristAxisMap::Axis::Yaw: return e.yaw_deg;
    case WristAxisMap::Axis::Pitch: return e.pitch_deg;
    case WristAxisMap::Axis::Roll: return e.roll_deg;
  }
  return 0.0;
}
void put(EulerAnglesZYX& e, WristAxisMap::Axis a, double v) {
  switch (a) {
    case WristAxisMap::Axis::Yaw: e.yaw_deg = v; break;
    case WristAxisMap::Axis::Pitch: e.pitch_deg = v; break;
    case WristAxisMap::Axis::Roll: e.roll_deg = v; break;
  }
}
}  // namespace

Eigen::Vector3d WristAxisMap::to_wrist_dofs(const EulerAnglesZYX& e) const {
  return {pick(e, flexion_extension), pick(e, radial_ulnar), pick(e, pronation_supination)};
}

EulerAnglesZYX WristAxisMap::from_wrist_dofs(const Eigen::Vector3d& d) const {
  EulerAnglesZYX e;
  put(e, flexion_extension, d[0]);
  put(e, radial_ulnar, d[1]);
  put(e, pronation_supination, d[2]);
  return e;
}

double wrap_deg(double a) { return a - 360.0 * std::ceil((a - 180.0) / 360.0); }

Eigen::MatrixXd resample_linear(std::span<const double> src_times, const Eigen::MatrixXd& src_values,
                                std::span<const double> dst_times) {
  const auto n = static_cast<Eigen::Index>(src_times.size());
  if (n == 0 || src_values.rows() == 0) throw Error(ErrorCode::EmptySource, "no source samples");
  if (src_values.rows() != n) throw Error(ErrorCode::ShapeMismatch, "source times and values differ in length");
  for (Eigen::Index i = 1; i < n; ++i) {
    if (!(src_times[i] > src_times[i - 1])) throw Error(ErrorCode::NonMonotonicTimestamp, "source times must increase");
  }

  Eigen::MatrixXd unwrapped = src_values;
  for (Eigen::Index c = 0; c < unwrapped.cols(); ++c) {
    for (Eigen::Index i = 1; i < n; ++i) {
      const double d = src_values(i, c) - src_values(i - 1, c);
      unwrapped(i, c) = unwrapped(i - 1, c) + (d - 360.0 * std::round(d / 360.0));
    }
  }

  Eigen::MatrixXd out(static_cast<Eigen::Index>(dst_times.size()), src_values.cols());
  Eigen::Index j = 0;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double t = dst_times[r];
    if (t <= src_times.front()) {
      out.row(r) = unwrapped.row(0);
    } else if (t >= src_times.back()) {
      out.row(r) = unwrapped.row(n - 1);
    } else {
      if (j > 0 && src_times[j] > t) j = 0;  // dst not sorted: restart search
      while (src_times[j + 1] < t) ++j;
      const double f = (t - src_times[j]) / (src_times[j + 1] - src_times[j]);
      out.row(r) = (1.0 - f) * unwrapped.row(j) + f * unwrapped.row(j + 1);
    }
  }
  return out.unaryExpr([](double a) { return wrap_deg(a); });
}

Eigen::MatrixXd NormScale::apply(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    if (constant[static_cast<std::size_t>(c)]) {
      out.col(c).setZero();
    } else {
      out.col(c) = (2.0 * (x.col(c).array() - min[c]) / (max[c] - min[c]) - 1.0).matrix();
    }
  }
  return out;
}

Normalized minmax_normalize(const Eigen::MatrixXd& channels, int scope_set_id) {
  if (!channels.allFinite()) throw Error(ErrorCode::NonFiniteInput, "non-finite value in normalization input");
  Normalized out;
  auto& s = out.scale;
  s.scope_set_id = scope_set_id;
  if (channels.rows() == 0) {
    s.min = Eigen::VectorXd::Zero(channels.cols());
    s.max = Eigen::VectorXd::Zero(channels.cols());
    s.constant.assign(static_cast<std::size_t>(channels.cols()), true);
  } else {
    s.min = channels.colwise().minCoeff().transpose();
    s.max = channels.colwise().maxCoeff().transpose();
    s.constant.resize(static_cast<std::size_t>(channels.cols()));
    for (Eigen::Index c = 0; c < channels.cols(); ++c) s.constant[static_cast<std::size_t>(c)] = s.max[c] == s.min[c];
  }
  out.values = s.apply(channels);
  return out;
}

}  // namespace musefuse
