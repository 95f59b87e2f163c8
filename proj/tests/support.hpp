// Shared fixtures for the unit tests and the acceptance runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "musefuse/nn/ops.hpp"
#include "musefuse/rng.hpp"

namespace musefuse::testing {

using T64 = nn::Tensor<double>;

inline T64 random_tensor(nn::Shape shape, CounterRng& rng, bool requires_grad, double lo = -1.0, double hi = 1.0) {
  T64 t = T64::zeros(std::move(shape), requires_grad);
  for (nn::Index i = 0; i < t.numel(); ++i) t.value()[i] = rng.uniform(lo, hi);
  return t;
}

/// Norm-wise relative error between two gradients.
inline double rel_error(const nn::Buffer<double>& a, const nn::Buffer<double>& b) {
  const double denom = std::max({a.matrix().norm(), b.matrix().norm(), 1e-12});
  return (a - b).matrix().norm() / denom;
}

/// Central finite differences on every element of every input, compared to
/// reverse-mode gradients of the scalar loss. Returns the worst relative
/// error over the inputs.
inline double gradient_check(const std::function<T64(std::vector<T64>&)>& loss_of, std::vector<T64>& inputs,
                             double h = 1e-5) {
  for (auto& x : inputs) x.zero_grad();
  T64 loss = loss_of(inputs);
  loss.backward();
  double worst = 0.0;
  for (auto& x : inputs) {
    if (!x.requires_grad()) continue;
    const nn::Buffer<double> analytic = x.has_grad() ? x.grad() : nn::Buffer<double>::Zero(x.numel());
    nn::Buffer<double> numeric(x.numel());
    nn::NoGradGuard guard;
    for (nn::Index i = 0; i < x.numel(); ++i) {
      const double keep = x.value()[i];
      x.value()[i] = keep + h;
      const double up = loss_of(inputs).item();
      x.value()[i] = keep - h;
      const double down = loss_of(inputs).item();
      x.value()[i] = keep;
      numeric[i] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, rel_error(analytic, numeric));
  }
  return worst;
}

struct GradCase {
  std::string layer;
  std::string shape;
  double rel_error = 0.0;
};

/// Gradient checks for every engine layer over `shapes_per_layer` random
/// shapes each, in double precision.
std::vector<GradCase> run_gradient_suite(int shapes_per_layer, std::uint64_t seed);

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

/// Independent ZYX Euler decomposition through the rotation matrix.
inline Eigen::Vector3d euler_oracle_deg(double w, double x, double y, double z) {
  const Eigen::Matrix3d r = Eigen::Quaterniond(w, x, y, z).normalized().toRotationMatrix();
  // R = Rz(yaw) Ry(pitch) Rx(roll)
  const double pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  const double yaw = std::atan2(r(1, 0), r(0, 0));
  const double roll = std::atan2(r(2, 1), r(2, 2));
  constexpr double deg = 180.0 / 3.14159265358979323846;
  return {yaw * deg, pitch * deg, roll * deg};
}

struct MetricRef {
  std::vector<double> mae, rmse, r2;  // r2 NaN when labels are constant
};

/// Per-joint metrics by direct loops.
inline MetricRef brute_force_metrics(const Eigen::MatrixXd& y, const Eigen::MatrixXd& p) {
  MetricRef m;
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    double abs_sum = 0.0, sq_sum = 0.0, mean = 0.0;
    for (Eigen::Index i = 0; i < y.rows(); ++i) mean += y(i, j);
    mean /= static_cast<double>(y.rows());
    double tot = 0.0;
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double e = p(i, j) - y(i, j);
      abs_sum += std::abs(e);
      sq_sum += e * e;
      tot += (y(i, j) - mean) * (y(i, j) - mean);
    }
    const double n = static_cast<double>(y.rows());
    m.mae.push_back(abs_sum / n);
    m.rmse.push_back(std::sqrt(sq_sum / n));
    m.r2.push_back(std::sqrt(tot / n) <= 1e-9 ? std::nan("") : 1.0 - sq_sum / tot);
  }
  return m;
}

}  // namespace musefuse::testing
