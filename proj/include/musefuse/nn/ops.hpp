#pragma once

#include <limits>
#include <memory>
#include <string>

#include "musefuse/nn/tensor.hpp"
#include "musefuse/rng.hpp"

namespace musefuse::nn {

enum class Mode { Train, Eval };

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) throw Error(code, what);
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}


// Valid output columns [lo, hi) for a kernel column offset `d` with leading pad `pad`.
inline std::pair<Index, Index> valid_span(Index d, Index pad, Index n) {
  return {std::max<Index>(0, pad - d), std::min<Index>(n, n + pad - d)};
}

/// Unfolds x (N x C x H x W) into N stacked (C kh kw) x (H W) row-major
/// matrices with zero "same" padding. Each kernel tap is a flat shift of the plane;
/// columns that wrap across a row boundary are zeroed afterwards.
template <typename S>
void im2col(const S* x, Index N, Index C, Index H, Index W, Index kh, Index kw, S* cols) {
  const Index ph = (kh - 1) / 2, pw = (kw - 1) / 2, P = H * W;
  for (Index c = 0; c < C; ++c) {
    for (Index dy = 0; dy < kh; ++dy) {
      for (Index dx = 0; dx < kw; ++dx) {
        const auto [lo, hi] = valid_span(dx, pw, W);
        const Index shift = (dy - ph) * W + (dx - pw);
        const Index i0 = std::clamp<Index>(-shift, 0, P), i1 = std::clamp<Index>(P - shift, 0, P);
        const Index k = (c * kh + dy) * kw + dx;
        for (Index n = 0; n < N; ++n) {
          const S* plane = x + (n * C + c) * P;
          S* dst = cols + (n * C * kh * kw + k) * P;
          std::fill(dst, dst + i0, S(0));
          if (i1 > i0) std::copy(plane + i0 + shift, plane + i1 + shift, dst + i0);
          std::fill(dst + std::max(i0, i1), dst + P, S(0));
          if (lo == 0 && hi == W) continue;
          for (Index y = 0; y < H; ++y) {
            for (Index xx = 0; xx < lo; ++xx) dst[y * W + xx] = S(0);
            for (Index xx = hi; xx < W; ++xx) dst[y * W + xx] = S(0);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds columns back into dx.
template <typename S>
void col2im(const S* cols, Index N, Index C, Index H, Index W, Index kh, Index kw, S* dx) {
  const Index ph = (kh - 1) / 2, pw = (kw - 1) / 2, P = H * W;
  for (Index c = 0; c < C; ++c) {
    for (Index dy = 0; dy < kh; ++dy) {
      for (Index dxk = 0; dxk < kw; ++dxk) {
        const auto [lo, hi] = valid_span(dxk, pw, W);
        if (lo >= hi) continue;
        const Index shift = (dy - ph) * W + (dxk - pw);
        const Index y0 = std::max<Index>(0, ph - dy), y1 = std::min<Index>(H, H + ph - dy);
        if (y1 <= y0) continue;
        const Index k = (c * kh + dy) * kw + dxk;
        for (Index n = 0; n < N; ++n) {
          S* plane = dx + (n * C + c) * P;
          const S* src = cols + (n * C * kh * kw + k) * P;
          if (lo == 0 && hi == W) {
            const Index i0 = y0 * W, len = (y1 - y0) * W;
            Eigen::Map<Buffer<S>>(plane + i0 + shift, len) += Eigen::Map<const Buffer<S>>(src + i0, len);
            continue;
          }
          for (Index y = y0; y < y1; ++y) {
            for (Index xx = lo; xx < hi; ++xx) plane[y * W + xx + shift] += src[y * W + xx];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation, stride 1, zero "same" padding. For even kernel
/// extents the extra padding goes after (bottom/right).
/// x: N x Cin x H x W, w: Cout x Cin x kh x kw, b: Cout.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  using detail::require;
  require(x.ndim() == 4 && w.ndim() == 4, ErrorCode::ShapeMismatch, "conv2d expects 4-D input and weight");
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == C, ErrorCode::ShapeMismatch,
          "conv2d: input channels " + std::to_string(C) + " vs weight " + to_string(w.shape()));
  require(b.numel() == O, ErrorCode::ShapeMismatch, "conv2d: bias length must equal output channels");
  const Index K = C * kh * kw, P = H * W;

  using Mat = detail::RowMat<S>;
  auto cols = std::make_shared<Buffer<S>>(N * K * P);
  detail::im2col(x.data(), N, C, H, W, kh, kw, cols->data());
  Eigen::Map<const Mat> wm(w.data(), O, K);
  Buffer<S> out(N * O * P);
  for (Index n = 0; n < N; ++n) {
    Eigen::Map<Mat> on(out.data() + n * O * P, O, P);
    on.noalias() = wm * Eigen::Map<const Mat>(cols->data() + n * K * P, K, P);
    on.colwise() += b.value().matrix();
  }

  return Tensor<S>::make_result({N, O, H, W}, std::move(out), {x, w, b}, [=](Node<S>& self) {
    const auto gn = [&](Index n) { return Eigen::Map<const Mat>(self.grad.data() + n * O * P, O, P); };
    if (parent_wants_grad(self, 1)) {
      Eigen::Map<Mat> dw(parent_grad(self, 1).data(), O, K);
      for (Index n = 0; n < N; ++n) {
        dw.noalias() += gn(n).lazyProduct(Eigen::Map<const Mat>(cols->data() + n * K * P, K, P).transpose());
      }
    }
    if (parent_wants_grad(self, 2)) {
      auto& db = parent_grad(self, 2);
      for (Index n = 0; n < N; ++n) db.matrix() += gn(n).rowwise().sum();
    }
    if (parent_wants_grad(self, 0)) {
      Eigen::Map<const Mat> wmap(self.parents[1]->value.data(), O, K);
      Buffer<S> dcols(N * K * P);
      for (Index n = 0; n < N; ++n) {
        Eigen::Map<Mat> dc(dcols.data() + n * K * P, K, P);
        const auto g = gn(n);
        for (Index k = 0; k < K; ++k) {
          dc.row(k) = wmap(0, k) * g.row(0);
          for (Index o = 1; o < O; ++o) dc.row(k) += wmap(o, k) * g.row(o);
        }
      }
      detail::col2im(dcols.data(), N, C, H, W, kh, kw, parent_grad(self, 0).data());
    }
  });
}

/// Per-channel batch normalization over (N, H, W). Train mode uses batch
/// statistics and updates the running estimates in place (unbiased variance);
/// eval mode uses the running estimates.
template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, Tensor<S>& running_mean,
                       Tensor<S>& running_var, Mode mode, S momentum = S(0.1), S eps = S(1e-5)) {
  using detail::require;
  require(x.ndim() == 4, ErrorCode::ShapeMismatch, "batch_norm2d expects 4-D input");
  const Index N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3), M = N * P;
  require(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C && running_var.numel() == C,
          ErrorCode::ShapeMismatch, "batch_norm2d: per-channel parameters must have length C");

  // Statistics in one pass, shifted by the channel's first value against cancellation.
  Buffer<S> mean(C), inv_std(C);
  if (mode == Mode::Train) {
    require(M > 1, ErrorCode::ShapeMismatch, "batch_norm2d: train mode needs more than one value per channel");
    for (Index c = 0; c < C; ++c) {
      const S shift = x.value()[c * P];
      double sum = 0, sq = 0;
      for (Index n = 0; n < N; ++n) {
        const auto seg = x.value().segment((n * C + c) * P, P) - shift;
        sum += static_cast<double>(seg.sum());
        sq += static_cast<double>(seg.square().sum());
      }
      const double d = sum / static_cast<double>(M);
      const double ss = std::max(0.0, sq - sum * d);
      const S mu = shift + static_cast<S>(d);
      mean[c] = mu;
      inv_std[c] = static_cast<S>(1.0 / std::sqrt(ss / static_cast<double>(M) + static_cast<double>(eps)));
      running_mean.value()[c] = (S(1) - momentum) * running_mean.value()[c] + momentum * mu;
      running_var.value()[c] =
          (S(1) - momentum) * running_var.value()[c] + momentum * static_cast<S>(ss / static_cast<double>(M - 1));
    }
  } else {
    mean = running_mean.value();
    inv_std = (running_var.value() + eps).rsqrt();
  }

  // out = x * a + b per channel
  const Buffer<S> a = gamma.value() * inv_std;
  const Buffer<S> b = beta.value() - mean * a;
  Buffer<S> out(x.numel());
  for (Index n = 0; n < N; ++n) {
    for (Index c = 0; c < C; ++c) {
      const Index off = (n * C + c) * P;
      out.segment(off, P) = x.value().segment(off, P) * a[c] + b[c];
    }
  }

  const bool train = mode == Mode::Train;
  return Tensor<S>::make_result(x.shape(), std::move(out), {x, gamma, beta}, [=](Node<S>& self) {
    const auto& g = self.grad;
    const auto& xv = self.parents[0]->value;
    Buffer<S> sum_g = Buffer<S>::Zero(C), sum_gx = Buffer<S>::Zero(C);
    for (Index n = 0; n < N; ++n) {
      for (Index c = 0; c < C; ++c) {
        const Index off = (n * C + c) * P;
        sum_g[c] += g.segment(off, P).sum();
        sum_gx[c] += (g.segment(off, P) * xv.segment(off, P)).sum();
      }
    }
    // sum of g * xhat
    const Buffer<S> sum_gxhat = (sum_gx - mean * sum_g) * inv_std;
    if (parent_wants_grad(self, 1)) parent_grad(self, 1) += sum_gxhat;
    if (parent_wants_grad(self, 2)) parent_grad(self, 2) += sum_g;
    if (parent_wants_grad(self, 0)) {
      // dx = k g + alpha x + beta per channel
      const S m = static_cast<S>(M);
      const Buffer<S> k = self.parents[1]->value * inv_std;
      Buffer<S> alpha = Buffer<S>::Zero(C), offset = Buffer<S>::Zero(C);
      if (train) {
        alpha = -k * inv_std * sum_gxhat / m;
        offset = -k * sum_g / m - alpha * mean;
      }
      Buffer<S> dx(g.size());
      for (Index n = 0; n < N; ++n) {
        for (Index c = 0; c < C; ++c) {
          const Index off = (n * C + c) * P;
          dx.segment(off, P) = k[c] * g.segment(off, P) + alpha[c] * xv.segment(off, P) + offset[c];
        }
      }
      accumulate_grad(self, 0, std::move(dx));
    }
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Buffer<S> out = x.value().max(S(0));
  return Tensor<S>::make_result(x.shape(), std::move(out), {x}, [](Node<S>& self) {
    const auto& in = self.parents[0]->value;
    accumulate_grad(self, 0, (in > S(0)).select(self.grad, S(0)));
  });
}

/// Inverted dropout: in train mode kept values are scaled by 1 / (1 - rate).
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Mode mode, CounterRng& rng) {
  detail::require(rate >= 0.0 && rate < 1.0, ErrorCode::InvalidRate, "dropout rate must lie in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return x;
  // One draw from the stream seeds a counter hash per element (24-bit uniforms).
  auto mask = std::make_shared<Buffer<S>>(x.numel());
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  const auto threshold = static_cast<std::uint64_t>(std::llround(rate * 16777216.0));
  const std::uint64_t base = rng.next_u64();
  S* m = mask->data();
  for (Index i = 0; i < x.numel(); ++i) {
    const std::uint64_t h = CounterRng::mix(base + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(i + 1));
    m[i] = (h >> 40) < threshold ? S(0) : keep_scale;
  }
  Buffer<S> out = x.value() * (*mask);
  return Tensor<S>::make_result(x.shape(), std::move(out), {x},
                                [mask](Node<S>& self) { accumulate_grad(self, 0, self.grad * (*mask)); });
}

/// Block-wise maximum over kh x kw windows. H and W must be divisible.
template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& x, Index kh, Index kw) {
  using detail::require;
  require(x.ndim() == 4, ErrorCode::ShapeMismatch, "max_pool2d expects 4-D input");
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(kh > 0 && kw > 0 && H % kh == 0 && W % kw == 0, ErrorCode::NonDivisibleShape,
          "max_pool2d: " + to_string(x.shape()) + " by " + std::to_string(kh) + "x" + std::to_string(kw));
  const Index Ho = H / kh, Wo = W / kw;
  // Per output: offset of the winning element inside its window, dy * kw + dx.
  auto arg = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(N * C * Ho * Wo));
  Buffer<S> out(N * C * Ho * Wo);
  const S* xd = x.data();
  for (Index nc = 0; nc < N * C; ++nc) {
    for (Index yo = 0; yo < Ho; ++yo) {
      const Index o0 = (nc * Ho + yo) * Wo;
      S* bv = out.data() + o0;
      std::int32_t* bi = arg->data() + o0;
      const S* r0 = xd + nc * H * W + yo * kh * W;
      for (Index xo = 0; xo < Wo; ++xo) {
        bv[xo] = r0[xo * kw];
        bi[xo] = 0;
      }
      for (Index dy = 0; dy < kh; ++dy) {
        const S* r = r0 + dy * W;
        for (Index xo = 0; xo < Wo; ++xo) {
          for (Index dx = 0; dx < kw; ++dx) {
            const S v = r[xo * kw + dx];
            const bool gt = v > bv[xo];
            bv[xo] = gt ? v : bv[xo];
            bi[xo] = gt ? static_cast<std::int32_t>(dy * kw + dx) : bi[xo];
          }
        }
      }
    }
  }
  return Tensor<S>::make_result({N, C, Ho, Wo}, std::move(out), {x}, [=](Node<S>& self) {
    S* dx = parent_grad(self, 0).data();
    for (Index nc = 0; nc < N * C; ++nc) {
      for (Index yo = 0; yo < Ho; ++yo) {
        const Index o0 = (nc * Ho + yo) * Wo;
        S* r0 = dx + nc * H * W + yo * kh * W;
        for (Index xo = 0; xo < Wo; ++xo) {
          const std::int32_t a = (*arg)[static_cast<std::size_t>(o0 + xo)];
          r0[(a / kw) * W + xo * kw + a % kw] += self.grad[o0 + xo];
        }
      }
    }
  });
}

/// Nearest-neighbour upsampling: each value replicated fh x fw.
template <typename S>
Tensor<S> upsample_nearest(const Tensor<S>& x, Index fh, Index fw) {
  using detail::require;
  require(x.ndim() == 4, ErrorCode::ShapeMismatch, "upsample_nearest expects 4-D input");
  require(fh > 0 && fw > 0, ErrorCode::ShapeMismatch, "upsample factors must be positive");
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Ho = H * fh, Wo = W * fw;
  Buffer<S> out(N * C * Ho * Wo);
  const S* xd = x.data();
  for (Index row = 0; row < N * C * H; ++row) {
    const S* src = xd + row * W;
    S* dst = out.data() + row * fh * Wo;
    for (Index xi = 0; xi < W; ++xi) std::fill(dst + xi * fw, dst + (xi + 1) * fw, src[xi]);
    for (Index r = 1; r < fh; ++r) std::copy(dst, dst + Wo, dst + r * Wo);
  }
  return Tensor<S>::make_result({N, C, Ho, Wo}, std::move(out), {x}, [=](Node<S>& self) {
    S* dx = parent_grad(self, 0).data();
    for (Index row = 0; row < N * C * H; ++row) {
      const S* g = self.grad.data() + row * fh * Wo;
      S* d = dx + row * W;
      if (fw == 1) {
        Eigen::Map<Buffer<S>> dm(d, W);
        for (Index r = 0; r < fh; ++r, g += Wo) dm += Eigen::Map<const Buffer<S>>(g, W);
        continue;
      }
      for (Index r = 0; r < fh; ++r, g += Wo) {
        for (Index xi = 0; xi < W; ++xi) {
          for (Index j = 0; j < fw; ++j) d[xi] += g[xi * fw + j];
        }
      }
    }
  });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  detail::require(numel(shape) == x.numel(), ErrorCode::ShapeMismatch,
                  "reshape " + to_string(x.shape()) + " to " + to_string(shape));
  return Tensor<S>::make_result(std::move(shape), x.value(), {x},
                                [](Node<S>& self) { accumulate_grad(self, 0, self.grad); });
}

/// N x ... -> N x F.
template <typename S>
Tensor<S> flatten(const Tensor<S>& x) {
  return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

/// Concatenates two N x F matrices along the feature axis.
template <typename S>
Tensor<S> concat_features(const Tensor<S>& a, const Tensor<S>& b) {
  using detail::require;
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(0) == b.dim(0), ErrorCode::ShapeMismatch,
          "concat_features: " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const Index N = a.dim(0), Fa = a.dim(1), Fb = b.dim(1);
  Buffer<S> out(N * (Fa + Fb));
  for (Index n = 0; n < N; ++n) {
    out.segment(n * (Fa + Fb), Fa) = a.value().segment(n * Fa, Fa);
    out.segment(n * (Fa + Fb) + Fa, Fb) = b.value().segment(n * Fb, Fb);
  }
  return Tensor<S>::make_result({N, Fa + Fb}, std::move(out), {a, b}, [=](Node<S>& self) {
    for (Index n = 0; n < N; ++n) {
      if (parent_wants_grad(self, 0)) parent_grad(self, 0).segment(n * Fa, Fa) += self.grad.segment(n * (Fa + Fb), Fa);
      if (parent_wants_grad(self, 1)) parent_grad(self, 1).segment(n * Fb, Fb) += self.grad.segment(n * (Fa + Fb) + Fa, Fb);
    }
  });
}

/// x: N x F, w: O x F, b: O -> N x O.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  using detail::require;
  require(x.ndim() == 2 && w.ndim() == 2, ErrorCode::ShapeMismatch, "linear expects 2-D input and weight");
  const Index N = x.dim(0), F = x.dim(1), O = w.dim(0);
  require(w.dim(1) == F, ErrorCode::ShapeMismatch,
          "linear: input features " + std::to_string(F) + " vs weight " + to_string(w.shape()));
  require(b.numel() == O, ErrorCode::ShapeMismatch, "linear: bias length must equal outputs");
  Eigen::Map<const detail::RowMat<S>> xm(x.data(), N, F), wm(w.data(), O, F);
  Buffer<S> out(N * O);
  Eigen::Map<detail::RowMat<S>> om(out.data(), N, O);
  om.noalias() = xm * wm.transpose();
  om.rowwise() += b.value().matrix().transpose();
  return Tensor<S>::make_result({N, O}, std::move(out), {x, w, b}, [=](Node<S>& self) {
    Eigen::Map<const detail::RowMat<S>> g(self.grad.data(), N, O);
    if (parent_wants_grad(self, 0)) {
      Eigen::Map<const detail::RowMat<S>> wv(self.parents[1]->value.data(), O, F);
      Eigen::Map<detail::RowMat<S>>(parent_grad(self, 0).data(), N, F).noalias() += g * wv;
    }
    if (parent_wants_grad(self, 1)) {
      Eigen::Map<const detail::RowMat<S>> xv(self.parents[0]->value.data(), N, F);
      Eigen::Map<detail::RowMat<S>>(parent_grad(self, 1).data(), O, F).noalias() += g.transpose() * xv;
    }
    if (parent_wants_grad(self, 2)) parent_grad(self, 2).matrix() += g.colwise().sum().transpose();
  });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  return Tensor<S>::make_result(a.shape(), a.value() + b.value(), {a, b}, [](Node<S>& self) {
    if (parent_wants_grad(self, 0)) accumulate_grad(self, 0, self.grad);
    if (parent_wants_grad(self, 1)) accumulate_grad(self, 1, self.grad);
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S k) {
  return Tensor<S>::make_result(a.shape(), a.value() * k, {a},
                                [k](Node<S>& self) { accumulate_grad(self, 0, self.grad * k); });
}

/// Mean of squared differences over all elements.
template <typename S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  detail::require_same_shape(pred, target, "mse_loss");
  const S n = static_cast<S>(pred.numel());
  Buffer<S> loss(1);
  loss[0] = (pred.value() - target.value()).square().sum() / n;
  return Tensor<S>::make_result({1}, std::move(loss), {pred, target}, [n](Node<S>& self) {
    const auto diff = (self.parents[0]->value - self.parents[1]->value).eval();
    const S g = self.grad[0] * S(2) / n;
    if (parent_wants_grad(self, 0)) accumulate_grad(self, 0, g * diff);
    if (parent_wants_grad(self, 1)) accumulate_grad(self, 1, -g * diff);
  });
}

}  // namespace musefuse::nn
