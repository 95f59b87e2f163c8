#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "musefuse/nn/tensor.hpp"

namespace musefuse::nn {

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// false: L2 term added to the gradient (grad += wd * param).
  /// true: decoupled decay (param -= lr * wd * param) applied beside the Adam step.
  bool decoupled_weight_decay = false;
};

template <typename S>
struct AdamState {
  AdamConfig config;
  std::vector<Buffer<S>> m, v;
  long long t = 0;

  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : config(cfg) {}
};

/// One Adam update with bias correction. Parameters without a gradient are
/// treated as having a zero gradient. Moments are created on the first call.
template <typename S>
void adam_step(std::span<Tensor<S>> params, AdamState<S>& st) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.push_back(Buffer<S>::Zero(p.numel()));
      st.v.push_back(Buffer<S>::Zero(p.numel()));
    }
  }
  if (st.m.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "Adam state holds a different parameter count");
  const auto& c = st.config;
  ++st.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
  const S b1 = static_cast<S>(c.beta1), b2 = static_cast<S>(c.beta2);
  const S step = static_cast<S>(c.lr / bc1);
  const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
  const S eps = static_cast<S>(c.eps);
  const S wd = static_cast<S>(c.weight_decay);
  const S lr = static_cast<S>(c.lr);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    if (m.size() != p.numel()) throw Error(ErrorCode::ShapeMismatch, "Adam moment shape differs from parameter");
    Buffer<S> g = p.has_grad() ? p.grad() : Buffer<S>::Zero(p.numel());
    if (!c.decoupled_weight_decay && wd != S(0)) g += wd * p.value();
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.square();
    if (c.decoupled_weight_decay && wd != S(0)) p.value() -= lr * wd * p.value();
    p.value() -= step * m / (v.sqrt() * inv_sqrt_bc2 + eps);
  }
}

}  // namespace musefuse::nn
