#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "rail/mask.hpp"
#include "rail/parallel.hpp"
#include "rail/tensor.hpp"

// Differentiable tensor operations. Every op is a pure function of its
// inputs plus an optional Tape; passing a null tape runs the op without
// gradient recording (inference / detached evaluation). Internal
// parallelism only ever partitions independent output elements, each with
// a fixed serial reduction order, so results do not depend on the worker
// count.

namespace rail {

using Int3 = std::array<int, 3>;

namespace detail {

inline const char* vol_axis_name(int i) {
  static const char* names[3] = {"W", "H", "D"};
  return names[i];
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return;
  if (a.rank() == b.rank()) {
    for (int i = 0; i < a.rank(); ++i)
      if (a.shape()[i] != b.shape()[i])
        throw std::invalid_argument(
            std::string(op) + ": axis " + std::to_string(i) + " extent " +
            std::to_string(a.shape()[i]) + " vs " +
            std::to_string(b.shape()[i]));
  }
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
}

template <typename T, typename F>
void record_op(Tape<T>* tape, const char* op, bool tracked, Tensor<T>& out,
               F&& fn) {
  if (!tape || !tracked) return;
  out.set_requires_grad(true);
  tape->record(op, std::forward<F>(fn));
}

// Range of output positions o (0 <= o < out_extent) for which
// i = o*stride - pad + k lands inside [0, in_extent).
struct AxisRange {
  int lo;
  int hi;
};

inline AxisRange conv_output_range(int k, int in_extent, int pad, int stride,
                                   int out_extent) {
  int lo = 0;
  if (pad - k > 0) lo = (pad - k + stride - 1) / stride;
  const int num = in_extent - 1 + pad - k;
  int hi = num < 0 ? 0 : num / stride + 1;
  hi = std::min(hi, out_extent);
  lo = std::min(lo, hi);
  return {lo, hi};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction suite
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::check_same_shape("add", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  detail::record_op(tape, "add", a.requires_grad() || b.requires_grad(), out,
                    [a = a, b = b, out]() mutable {
                      auto g = out.grad();
                      if (a.requires_grad()) {
                        auto ga = a.grad();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      }
                      if (b.requires_grad()) {
                        auto gb = b.grad();
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                      }
                    });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::check_same_shape("sub", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  detail::record_op(tape, "sub", a.requires_grad() || b.requires_grad(), out,
                    [a = a, b = b, out]() mutable {
                      auto g = out.grad();
                      if (a.requires_grad()) {
                        auto ga = a.grad();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      }
                      if (b.requires_grad()) {
                        auto gb = b.grad();
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                      }
                    });
  return out;
}

// Hadamard product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::check_same_shape("mul", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  detail::record_op(tape, "mul", a.requires_grad() || b.requires_grad(), out,
                    [a = a, b = b, out]() mutable {
                      auto g = out.grad();
                      auto av2 = a.values();
                      auto bv2 = b.values();
                      if (a.requires_grad()) {
                        auto ga = a.grad();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          ga[i] += g[i] * bv2[i];
                      }
                      if (b.requires_grad()) {
                        auto gb = b.grad();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          gb[i] += g[i] * av2[i];
                      }
                    });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.values();
  auto av = a.values();
  const T cc = static_cast<T>(c);
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * cc;
  detail::record_op(tape, "scale", a.requires_grad(), out,
                    [a = a, out, cc]() mutable {
                      auto g = out.grad();
                      auto ga = a.grad();
                      for (std::size_t i = 0; i < g.size(); ++i)
                        ga[i] += g[i] * cc;
                    });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.values();
  auto av = a.values();
  // std::max(x, 0) with x first keeps NaN visible instead of clipping it
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::max(av[i], T(0));
  detail::record_op(tape, "relu", a.requires_grad(), out, [a = a, out]() mutable {
    auto g = out.grad();
    auto av2 = a.values();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av2[i] > T(0)) ga[i] += g[i];
  });
  return out;
}

// Natural log; caller is responsible for keeping inputs positive
// (probabilities are clamped to [eps, 1] before any log in the losses).
template <typename T>
Tensor<T> log_elem(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
  detail::record_op(tape, "log", a.requires_grad(), out, [a = a, out]() mutable {
    auto g = out.grad();
    auto av2 = a.values();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av2[i];
  });
  return out;
}

// Gradient passes through strictly inside (lo, hi) and is zero where the
// clamp binds.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, double lo, double hi,
                Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.values();
  auto av = a.values();
  const T l = static_cast<T>(lo), h = static_cast<T>(hi);
  for (std::size_t i = 0; i < ov.size(); ++i)
    ov[i] = std::min(h, std::max(l, av[i]));
  detail::record_op(tape, "clamp", a.requires_grad(), out,
                    [a = a, out, l, h]() mutable {
                      auto g = out.grad();
                      auto av2 = a.values();
                      auto ga = a.grad();
                      for (std::size_t i = 0; i < g.size(); ++i)
                        if (av2[i] > l && av2[i] < h) ga[i] += g[i];
                    });
  return out;
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::record_op(tape, "reduce_sum", a.requires_grad(), out,
                    [a = a, out]() mutable {
                      const T g = out.grad()[0];
                      auto ga = a.grad();
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
                    });
  return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  const T inv_n = T(1) / static_cast<T>(a.size());
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  detail::record_op(tape, "reduce_mean", a.requires_grad(), out,
                    [a = a, out, inv_n]() mutable {
                      const T g = out.grad()[0] * inv_n;
                      auto ga = a.grad();
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
                    });
  return out;
}

// ---------------------------------------------------------------------------
// Channel softmax / argmax
// ---------------------------------------------------------------------------

// Per-voxel class distribution over the channel axis of [B,K,...];
// stabilized by max subtraction.
template <typename T>
Tensor<T> softmax_channel(const Tensor<T>& logits, Tape<T>* tape = nullptr) {
  if (logits.rank() < 2)
    throw std::invalid_argument("softmax_channel: rank must be >= 2, got " +
                                std::to_string(logits.rank()));
  const int B = logits.shape()[0];
  const int K = logits.shape()[1];
  if (K < 2)
    throw std::invalid_argument("softmax_channel: needs K >= 2 channels");
  const std::int64_t S = logits.size() / (static_cast<std::int64_t>(B) * K);
  Tensor<T> out = Tensor<T>::zeros(logits.shape());
  auto ov = out.values();
  auto lv = logits.values();
  for (int b = 0; b < B; ++b) {
    const std::int64_t base = static_cast<std::int64_t>(b) * K * S;
    for (std::int64_t v = 0; v < S; ++v) {
      T mx = lv[base + v];
      for (int k = 1; k < K; ++k) mx = std::max(mx, lv[base + k * S + v]);
      T denom = 0;
      for (int k = 0; k < K; ++k) {
        const T e = std::exp(lv[base + k * S + v] - mx);
        ov[base + k * S + v] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (int k = 0; k < K; ++k) ov[base + k * S + v] *= inv;
    }
  }
  detail::record_op(
      tape, "softmax_channel", logits.requires_grad(), out,
      [logits = logits, out, B, K, S]() mutable {
        auto g = out.grad();
        auto p = out.values();
        auto gl = logits.grad();
        for (int b = 0; b < B; ++b) {
          const std::int64_t base = static_cast<std::int64_t>(b) * K * S;
          for (std::int64_t v = 0; v < S; ++v) {
            T dot = 0;
            for (int k = 0; k < K; ++k)
              dot += p[base + k * S + v] * g[base + k * S + v];
            for (int k = 0; k < K; ++k)
              gl[base + k * S + v] +=
                  p[base + k * S + v] * (g[base + k * S + v] - dot);
          }
        }
      });
  return out;
}

// Hard per-voxel class map; non-differentiable. Ties resolve to the lower
// class index.
template <typename T>
LabelMap argmax_channel(const Tensor<T>& x) {
  if (x.rank() < 2)
    throw std::invalid_argument("argmax_channel: rank must be >= 2");
  const int B = x.shape()[0];
  const int K = x.shape()[1];
  const std::int64_t S = x.size() / (static_cast<std::int64_t>(B) * K);
  LabelMap m;
  m.shape.assign(x.shape().begin(), x.shape().end());
  m.shape.erase(m.shape.begin() + 1);  // drop channel axis
  m.labels.resize(static_cast<std::size_t>(B) * S);
  auto xv = x.values();
  for (int b = 0; b < B; ++b) {
    const std::int64_t base = static_cast<std::int64_t>(b) * K * S;
    for (std::int64_t v = 0; v < S; ++v) {
      int best = 0;
      T best_val = xv[base + v];
      for (int k = 1; k < K; ++k) {
        const T val = xv[base + k * S + v];
        if (val > best_val) {
          best_val = val;
          best = k;
        }
      }
      m.labels[static_cast<std::size_t>(b) * S + v] =
          static_cast<std::uint8_t>(best);
    }
  }
  return m;
}

// One-hot encoding of a label map as a constant tensor [B,K,...].
template <typename T>
Tensor<T> onehot(const LabelMap& labels, int num_classes) {
  Shape shape = labels.shape;
  shape.insert(shape.begin() + 1, num_classes);
  Tensor<T> out = Tensor<T>::zeros(shape);
  const int B = labels.shape[0];
  const std::int64_t S = labels.size() / B;
  auto ov = out.values();
  for (int b = 0; b < B; ++b)
    for (std::int64_t v = 0; v < S; ++v) {
      const int k = labels.labels[static_cast<std::size_t>(b) * S + v];
      ov[(static_cast<std::int64_t>(b) * num_classes + k) * S + v] = T(1);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void conv3d_check(const Tensor<T>& input, const Tensor<T>& kernel, Int3 stride,
                  Int3 padding) {
  if (input.rank() != 5)
    throw std::invalid_argument("conv3d: input rank " +
                                std::to_string(input.rank()) +
                                " != 5 ([B,C,W,H,D])");
  if (kernel.rank() != 5)
    throw std::invalid_argument("conv3d: kernel rank " +
                                std::to_string(kernel.rank()) + " != 5");
  if (kernel.shape()[1] != input.shape()[1])
    throw std::invalid_argument(
        "conv3d: kernel input channels " + std::to_string(kernel.shape()[1]) +
        " != input channels " + std::to_string(input.shape()[1]));
  for (int i = 0; i < 3; ++i) {
    if (stride[i] <= 0)
      throw std::invalid_argument(std::string("conv3d: non-positive stride on axis ") +
                                  vol_axis_name(i));
    if (padding[i] < 0)
      throw std::invalid_argument(std::string("conv3d: negative padding on axis ") +
                                  vol_axis_name(i));
    const int padded = input.shape()[2 + i] + 2 * padding[i];
    if (kernel.shape()[2 + i] > padded)
      throw std::invalid_argument(
          std::string("conv3d: kernel extent ") +
          std::to_string(kernel.shape()[2 + i]) + " exceeds padded input " +
          std::to_string(padded) + " on axis " + vol_axis_name(i));
  }
}

}  // namespace detail

// Standard cross-correlation of [B,Cin,W,H,D] with [Cout,Cin,kw,kh,kd];
// zero padding, output extent floor((W + 2p - kw)/s) + 1 per axis.
// Differentiable w.r.t. input and kernel.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, Int3 stride,
                 Int3 padding, Tape<T>* tape = nullptr) {
  detail::conv3d_check(input, kernel, stride, padding);
  const int B = input.shape()[0], Ci = input.shape()[1], W = input.shape()[2],
            H = input.shape()[3], D = input.shape()[4];
  const int Co = kernel.shape()[0], KW = kernel.shape()[2],
            KH = kernel.shape()[3], KD = kernel.shape()[4];
  const int sx = stride[0], sy = stride[1], sz = stride[2];
  const int px = padding[0], py = padding[1], pz = padding[2];
  const int OW = (W + 2 * px - KW) / sx + 1;
  const int OH = (H + 2 * py - KH) / sy + 1;
  const int OD = (D + 2 * pz - KD) / sz + 1;

  Tensor<T> out = Tensor<T>::zeros({B, Co, OW, OH, OD});
  {
    const T* x = input.values().data();
    const T* k = kernel.values().data();
    T* y = out.values().data();
    parallel_for(static_cast<std::int64_t>(B) * Co * OW, [&](std::int64_t i0,
                                                             std::int64_t i1) {
      for (std::int64_t idx = i0; idx < i1; ++idx) {
        const int ox = static_cast<int>(idx % OW);
        const int co = static_cast<int>((idx / OW) % Co);
        const int b = static_cast<int>(idx / (static_cast<std::int64_t>(OW) * Co));
        T* out_plane = y + ((static_cast<std::int64_t>(b) * Co + co) * OW + ox) *
                               OH * OD;
        for (int ci = 0; ci < Ci; ++ci) {
          const T* x_chan =
              x + (static_cast<std::int64_t>(b) * Ci + ci) * W * H * D;
          const T* k_chan =
              k + (static_cast<std::int64_t>(co) * Ci + ci) * KW * KH * KD;
          for (int kx = 0; kx < KW; ++kx) {
            const int ix = ox * sx - px + kx;
            if (ix < 0 || ix >= W) continue;
            const T* x_plane = x_chan + static_cast<std::int64_t>(ix) * H * D;
            const T* k_plane = k_chan + static_cast<std::int64_t>(kx) * KH * KD;
            for (int ky = 0; ky < KH; ++ky) {
              const auto ry = detail::conv_output_range(ky, H, py, sy, OH);
              for (int kz = 0; kz < KD; ++kz) {
                const T w = k_plane[ky * KD + kz];
                const auto rz = detail::conv_output_range(kz, D, pz, sz, OD);
                for (int oy = ry.lo; oy < ry.hi; ++oy) {
                  const int iy = oy * sy - py + ky;
                  const T* x_row = x_plane + static_cast<std::int64_t>(iy) * D;
                  T* out_row = out_plane + static_cast<std::int64_t>(oy) * OD;
                  if (sz == 1) {
                    const int off = kz - pz;
                    for (int oz = rz.lo; oz < rz.hi; ++oz)
                      out_row[oz] += w * x_row[oz + off];
                  } else {
                    for (int oz = rz.lo; oz < rz.hi; ++oz)
                      out_row[oz] += w * x_row[oz * sz - pz + kz];
                  }
                }
              }
            }
          }
        }
      }
    });
  }

  detail::record_op(
      tape, "conv3d", input.requires_grad() || kernel.requires_grad(), out,
      [input = input, kernel = kernel, out, stride, padding]() mutable {
        const int B = input.shape()[0], Ci = input.shape()[1],
                  W = input.shape()[2], H = input.shape()[3],
                  D = input.shape()[4];
        const int Co = kernel.shape()[0], KW = kernel.shape()[2],
                  KH = kernel.shape()[3], KD = kernel.shape()[4];
        const int OW = out.shape()[2], OH = out.shape()[3], OD = out.shape()[4];
        const int sx = stride[0], sy = stride[1], sz = stride[2];
        const int px = padding[0], py = padding[1], pz = padding[2];
        const T* gy = out.grad().data();
        const T* k = kernel.values().data();
        const T* x = input.values().data();

        if (input.requires_grad()) {
          T* gx = input.grad().data();
          // Gather per input element row: i = o*s - p + k  =>  o = (i+p-k)/s.
          parallel_for(
              static_cast<std::int64_t>(B) * Ci * W,
              [&](std::int64_t i0, std::int64_t i1) {
                for (std::int64_t idx = i0; idx < i1; ++idx) {
                  const int ix = static_cast<int>(idx % W);
                  const int ci = static_cast<int>((idx / W) % Ci);
                  const int b =
                      static_cast<int>(idx / (static_cast<std::int64_t>(W) * Ci));
                  T* gx_plane =
                      gx + ((static_cast<std::int64_t>(b) * Ci + ci) * W + ix) *
                               H * D;
                  for (int co = 0; co < Co; ++co) {
                    const T* gy_chan =
                        gy + (static_cast<std::int64_t>(b) * Co + co) * OW * OH *
                                 OD;
                    const T* k_chan =
                        k + (static_cast<std::int64_t>(co) * Ci + ci) * KW * KH *
                                KD;
                    for (int kx = 0; kx < KW; ++kx) {
                      const int tx = ix + px - kx;
                      if (tx < 0 || tx % sx != 0) continue;
                      const int ox = tx / sx;
                      if (ox >= OW) continue;
                      const T* gy_plane =
                          gy_chan + static_cast<std::int64_t>(ox) * OH * OD;
                      const T* k_plane =
                          k_chan + static_cast<std::int64_t>(kx) * KH * KD;
                      for (int ky = 0; ky < KH; ++ky) {
                        const auto ry =
                            detail::conv_output_range(ky, H, py, sy, OH);
                        for (int kz = 0; kz < KD; ++kz) {
                          const T w = k_plane[ky * KD + kz];
                          const auto rz =
                              detail::conv_output_range(kz, D, pz, sz, OD);
                          for (int oy = ry.lo; oy < ry.hi; ++oy) {
                            const int iy = oy * sy - py + ky;
                            T* gx_row =
                                gx_plane + static_cast<std::int64_t>(iy) * D;
                            const T* gy_row =
                                gy_plane + static_cast<std::int64_t>(oy) * OD;
                            if (sz == 1) {
                              const int off = kz - pz;
                              for (int oz = rz.lo; oz < rz.hi; ++oz)
                                gx_row[oz + off] += w * gy_row[oz];
                            } else {
                              for (int oz = rz.lo; oz < rz.hi; ++oz)
                                gx_row[oz * sz - pz + kz] += w * gy_row[oz];
                            }
                          }
                        }
                      }
                    }
                  }
                }
              });
        }

        if (kernel.requires_grad()) {
          T* gk = kernel.grad().data();
          parallel_for(
              static_cast<std::int64_t>(Co) * Ci * KW * KH * KD,
              [&](std::int64_t i0, std::int64_t i1) {
                for (std::int64_t idx = i0; idx < i1; ++idx) {
                  const int kz = static_cast<int>(idx % KD);
                  const int ky = static_cast<int>((idx / KD) % KH);
                  const int kx = static_cast<int>((idx / (KD * KH)) % KW);
                  const int ci = static_cast<int>(
                      (idx / (static_cast<std::int64_t>(KD) * KH * KW)) % Ci);
                  const int co = static_cast<int>(
                      idx / (static_cast<std::int64_t>(KD) * KH * KW * Ci));
                  const auto rx = detail::conv_output_range(kx, W, px, sx, OW);
                  const auto ry = detail::conv_output_range(ky, H, py, sy, OH);
                  const auto rz = detail::conv_output_range(kz, D, pz, sz, OD);
                  T acc = 0;
                  for (int b = 0; b < B; ++b) {
                    const T* x_chan =
                        x + (static_cast<std::int64_t>(b) * Ci + ci) * W * H * D;
                    const T* gy_chan =
                        gy +
                        (static_cast<std::int64_t>(b) * Co + co) * OW * OH * OD;
                    for (int ox = rx.lo; ox < rx.hi; ++ox) {
                      const int ix = ox * sx - px + kx;
                      const T* x_plane =
                          x_chan + static_cast<std::int64_t>(ix) * H * D;
                      const T* gy_plane =
                          gy_chan + static_cast<std::int64_t>(ox) * OH * OD;
                      for (int oy = ry.lo; oy < ry.hi; ++oy) {
                        const int iy = oy * sy - py + ky;
                        const T* x_row =
                            x_plane + static_cast<std::int64_t>(iy) * D;
                        const T* gy_row =
                            gy_plane + static_cast<std::int64_t>(oy) * OD;
                        if (sz == 1) {
                          const int off = kz - pz;
                          for (int oz = rz.lo; oz < rz.hi; ++oz)
                            acc += x_row[oz + off] * gy_row[oz];
                        } else {
                          for (int oz = rz.lo; oz < rz.hi; ++oz)
                            acc += x_row[oz * sz - pz + kz] * gy_row[oz];
                        }
                      }
                    }
                  }
                  gk[idx] += acc;
                }
              });
        }
      });
  return out;
}

// Adjoint of conv3d with zero padding: for matching shapes,
// inner(conv3d(x,k,s,0), y) == inner(x, transposed_conv3d(y,k,s)).
// Input [B,C1,...], kernel [C1,C2,kw,kh,kd], output extent (W-1)*s + kw.
template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& input, const Tensor<T>& kernel,
                            Int3 stride, Tape<T>* tape = nullptr) {
  if (input.rank() != 5 || kernel.rank() != 5)
    throw std::invalid_argument("transposed_conv3d: expects rank-5 input and kernel");
  if (kernel.shape()[0] != input.shape()[1])
    throw std::invalid_argument(
        "transposed_conv3d: kernel leading channels " +
        std::to_string(kernel.shape()[0]) + " != input channels " +
        std::to_string(input.shape()[1]));
  for (int i = 0; i < 3; ++i)
    if (stride[i] <= 0)
      throw std::invalid_argument(
          std::string("transposed_conv3d: non-positive stride on axis ") +
          detail::vol_axis_name(i));
  const int B = input.shape()[0], C1 = input.shape()[1], W = input.shape()[2],
            H = input.shape()[3], D = input.shape()[4];
  const int C2 = kernel.shape()[1], KW = kernel.shape()[2],
            KH = kernel.shape()[3], KD = kernel.shape()[4];
  const int sx = stride[0], sy = stride[1], sz = stride[2];
  const int OW = (W - 1) * sx + KW;
  const int OH = (H - 1) * sy + KH;
  const int OD = (D - 1) * sz + KD;

  Tensor<T> out = Tensor<T>::zeros({B, C2, OW, OH, OD});
  {
    const T* x = input.values().data();
    const T* k = kernel.values().data();
    T* y = out.values().data();
    parallel_for(
        static_cast<std::int64_t>(B) * C2 * OW,
        [&](std::int64_t i0, std::int64_t i1) {
          for (std::int64_t idx = i0; idx < i1; ++idx) {
            const int ox = static_cast<int>(idx % OW);
            const int c2 = static_cast<int>((idx / OW) % C2);
            const int b =
                static_cast<int>(idx / (static_cast<std::int64_t>(OW) * C2));
            T* out_plane =
                y +
                ((static_cast<std::int64_t>(b) * C2 + c2) * OW + ox) * OH * OD;
            for (int c1 = 0; c1 < C1; ++c1) {
              const T* x_chan =
                  x + (static_cast<std::int64_t>(b) * C1 + c1) * W * H * D;
              const T* k_chan =
                  k + (static_cast<std::int64_t>(c1) * C2 + c2) * KW * KH * KD;
              for (int kx = 0; kx < KW; ++kx) {
                const int tx = ox - kx;
                if (tx < 0 || tx % sx != 0) continue;
                const int ix = tx / sx;
                if (ix >= W) continue;
                const T* x_plane =
                    x_chan + static_cast<std::int64_t>(ix) * H * D;
                const T* k_plane =
                    k_chan + static_cast<std::int64_t>(kx) * KH * KD;
                for (int ky = 0; ky < KH; ++ky)
                  for (int iy = 0; iy < H; ++iy) {
                    const int oy = iy * sy + ky;
                    const T* x_row =
                        x_plane + static_cast<std::int64_t>(iy) * D;
                    T* out_row = out_plane + static_cast<std::int64_t>(oy) * OD;
                    for (int kz = 0; kz < KD; ++kz) {
                      const T w = k_plane[ky * KD + kz];
                      for (int iz = 0; iz < D; ++iz)
                        out_row[iz * sz + kz] += w * x_row[iz];
                    }
                  }
              }
            }
          }
        });
  }

  detail::record_op(
      tape, "transposed_conv3d",
      input.requires_grad() || kernel.requires_grad(), out,
      [input = input, kernel = kernel, out, stride]() mutable {
        const int B = input.shape()[0], C1 = input.shape()[1],
                  W = input.shape()[2], H = input.shape()[3],
                  D = input.shape()[4];
        const int C2 = kernel.shape()[1], KW = kernel.shape()[2],
                  KH = kernel.shape()[3], KD = kernel.shape()[4];
        const int OW = out.shape()[2], OH = out.shape()[3], OD = out.shape()[4];
        const int sx = stride[0], sy = stride[1], sz = stride[2];
        const T* gy = out.grad().data();
        const T* k = kernel.values().data();
        const T* x = input.values().data();

        if (input.requires_grad()) {
          // d(input) is the forward correlation of the output gradient with
          // the same kernel (the two ops are adjoint).
          T* gx = input.grad().data();
          parallel_for(
              static_cast<std::int64_t>(B) * C1 * W,
              [&](std::int64_t i0, std::int64_t i1) {
                for (std::int64_t idx = i0; idx < i1; ++idx) {
                  const int ix = static_cast<int>(idx % W);
                  const int c1 = static_cast<int>((idx / W) % C1);
                  const int b = static_cast<int>(
                      idx / (static_cast<std::int64_t>(W) * C1));
                  T* gx_plane =
                      gx + ((static_cast<std::int64_t>(b) * C1 + c1) * W + ix) *
                               H * D;
                  for (int c2 = 0; c2 < C2; ++c2) {
                    const T* gy_chan =
                        gy +
                        (static_cast<std::int64_t>(b) * C2 + c2) * OW * OH * OD;
                    const T* k_chan =
                        k + (static_cast<std::int64_t>(c1) * C2 + c2) * KW * KH *
                                KD;
                    for (int kx = 0; kx < KW; ++kx) {
                      const int ox = ix * sx + kx;
                      const T* gy_plane =
                          gy_chan + static_cast<std::int64_t>(ox) * OH * OD;
                      const T* k_plane =
                          k_chan + static_cast<std::int64_t>(kx) * KH * KD;
                      for (int ky = 0; ky < KH; ++ky)
                        for (int iy = 0; iy < H; ++iy) {
                          const int oy = iy * sy + ky;
                          T* gx_row =
                              gx_plane + static_cast<std::int64_t>(iy) * D;
                          const T* gy_row =
                              gy_plane + static_cast<std::int64_t>(oy) * OD;
                          for (int kz = 0; kz < KD; ++kz) {
                            const T w = k_plane[ky * KD + kz];
                            for (int iz = 0; iz < D; ++iz)
                              gx_row[iz] += w * gy_row[iz * sz + kz];
                          }
                        }
                    }
                  }
                }
              });
        }

        if (kernel.requires_grad()) {
          T* gk = kernel.grad().data();
          parallel_for(
              static_cast<std::int64_t>(C1) * C2 * KW * KH * KD,
              [&](std::int64_t i0, std::int64_t i1) {
                for (std::int64_t idx = i0; idx < i1; ++idx) {
                  const int kz = static_cast<int>(idx % KD);
                  const int ky = static_cast<int>((idx / KD) % KH);
                  const int kx = static_cast<int>((idx / (KD * KH)) % KW);
                  const int c2 = static_cast<int>(
                      (idx / (static_cast<std::int64_t>(KD) * KH * KW)) % C2);
                  const int c1 = static_cast<int>(
                      idx / (static_cast<std::int64_t>(KD) * KH * KW * C2));
                  T acc = 0;
                  for (int b = 0; b < B; ++b) {
                    const T* x_chan =
                        x + (static_cast<std::int64_t>(b) * C1 + c1) * W * H * D;
                    const T* gy_chan =
                        gy +
                        (static_cast<std::int64_t>(b) * C2 + c2) * OW * OH * OD;
                    for (int ix = 0; ix < W; ++ix) {
                      const int ox = ix * sx + kx;
                      const T* x_plane =
                          x_chan + static_cast<std::int64_t>(ix) * H * D;
                      const T* gy_plane =
                          gy_chan + static_cast<std::int64_t>(ox) * OH * OD;
                      for (int iy = 0; iy < H; ++iy) {
                        const int oy = iy * sy + ky;
                        const T* x_row =
                            x_plane + static_cast<std::int64_t>(iy) * D;
                        const T* gy_row =
                            gy_plane + static_cast<std::int64_t>(oy) * OD;
                        for (int iz = 0; iz < D; ++iz)
                          acc += x_row[iz] * gy_row[iz * sz + kz];
                      }
                    }
                  }
                  gk[idx] += acc;
                }
              });
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// Network building blocks
// ---------------------------------------------------------------------------

// y = x + b[c] broadcast over batch and spatial axes.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias,
                   Tape<T>* tape = nullptr) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.shape()[0] != x.shape()[1])
    throw std::invalid_argument("add_bias: bias must be [C] matching input channels");
  const int B = x.shape()[0], C = x.shape()[1];
  const std::int64_t S = x.size() / (static_cast<std::int64_t>(B) * C);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto ov = out.values();
  auto xv = x.values();
  auto bv = bias.values();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * S;
      const T bc = bv[c];
      for (std::int64_t v = 0; v < S; ++v) ov[base + v] = xv[base + v] + bc;
    }
  detail::record_op(tape, "add_bias",
                    x.requires_grad() || bias.requires_grad(), out,
                    [x = x, bias = bias, out, B, C, S]() mutable {
                      auto g = out.grad();
                      if (x.requires_grad()) {
                        auto gx = x.grad();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          gx[i] += g[i];
                      }
                      if (bias.requires_grad()) {
                        auto gb = bias.grad();
                        for (int b = 0; b < B; ++b)
                          for (int c = 0; c < C; ++c) {
                            const std::int64_t base =
                                (static_cast<std::int64_t>(b) * C + c) * S;
                            T acc = 0;
                            for (std::int64_t v = 0; v < S; ++v)
                              acc += g[base + v];
                            gb[c] += acc;
                          }
                      }
                    });
  return out;
}

// Per-(batch, channel) normalization over the spatial axes with learnable
// per-channel scale and shift. Population variance.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                        const Tensor<T>& beta, double eps = 1e-5,
                        Tape<T>* tape = nullptr) {
  if (x.rank() < 3)
    throw std::invalid_argument("instance_norm: rank must be >= 3");
  const int B = x.shape()[0], C = x.shape()[1];
  if (gamma.rank() != 1 || gamma.shape()[0] != C || beta.rank() != 1 ||
      beta.shape()[0] != C)
    throw std::invalid_argument("instance_norm: gamma/beta must be [C]");
  const std::int64_t S = x.size() / (static_cast<std::int64_t>(B) * C);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B) * C);
  auto inv_std =
      std::make_shared<std::vector<T>>(static_cast<std::size_t>(B) * C);
  {
    auto ov = out.values();
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * S;
        T mu = 0;
        for (std::int64_t v = 0; v < S; ++v) mu += xv[base + v];
        mu /= static_cast<T>(S);
        T var = 0;
        for (std::int64_t v = 0; v < S; ++v) {
          const T d = xv[base + v] - mu;
          var += d * d;
        }
        var /= static_cast<T>(S);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
        (*mean)[static_cast<std::size_t>(b) * C + c] = mu;
        (*inv_std)[static_cast<std::size_t>(b) * C + c] = inv;
        const T g = gv[c], bt = bv[c];
        for (std::int64_t v = 0; v < S; ++v)
          ov[base + v] = (xv[base + v] - mu) * inv * g + bt;
      }
  }
  detail::record_op(
      tape, "instance_norm",
      x.requires_grad() || gamma.requires_grad() || beta.requires_grad(), out,
      [x = x, gamma = gamma, beta = beta, out, mean, inv_std, B, C, S]() mutable {
        auto g = out.grad();
        auto xv = x.values();
        auto gv = gamma.values();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * S;
            const T mu = (*mean)[static_cast<std::size_t>(b) * C + c];
            const T inv = (*inv_std)[static_cast<std::size_t>(b) * C + c];
            T sum_g = 0, sum_gxh = 0;
            for (std::int64_t v = 0; v < S; ++v) {
              const T xh = (xv[base + v] - mu) * inv;
              sum_g += g[base + v];
              sum_gxh += g[base + v] * xh;
            }
            if (beta.requires_grad()) beta.grad()[c] += sum_g;
            if (gamma.requires_grad()) gamma.grad()[c] += sum_gxh;
            if (x.requires_grad()) {
              auto gx = x.grad();
              const T mg = sum_g / static_cast<T>(S);
              const T mgxh = sum_gxh / static_cast<T>(S);
              const T scale = gv[c] * inv;
              for (std::int64_t v = 0; v < S; ++v) {
                const T xh = (xv[base + v] - mu) * inv;
                gx[base + v] += scale * (g[base + v] - mg - xh * mgxh);
              }
            }
          }
      });
  return out;
}

}  // namespace rail
