#pragma once

// Differentiable operations over Tensor<T>. Every op computes its forward
// result and, when a tape is supplied and any input requires grad, records a
// closure that adds into the inputs' grad buffers. Closures skip work when
// the output never received an upstream gradient.

#include <algorithm>
#include <cmath>
#include <limits>

#include "tdam/gemm.hpp"
#include "tdam/tensor.hpp"

namespace tdam {

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  const T* xp = x.ptr();
  T* yp = y.ptr();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      xc.ensure_grad();
      const T* xp = xc.ptr();
      const T* g = yc.grad_data();
      T* gx = xc.grad_data();
      for (int64_t i = 0, n = xc.numel(); i < n; ++i)
        if (xp[i] > T(0)) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  const T* xp = x.ptr();
  T* yp = y.ptr();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) yp[i] = sigmoid_scalar(xp[i]);
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      xc.ensure_grad();
      const T* yp = yc.ptr();
      const T* g = yc.grad_data();
      T* gx = xc.grad_data();
      for (int64_t i = 0, n = xc.numel(); i < n; ++i)
        gx[i] += g[i] * yp[i] * (T(1) - yp[i]);
    });
  }
  return y;
}

namespace detail {

struct BcastPlan {
  Shape out;
  int64_t stride_a[4] = {0, 0, 0, 0};
  int64_t stride_b[4] = {0, 0, 0, 0};
  int dims[4] = {1, 1, 1, 1};
  int rank = 0;
};

inline BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  if (a.rank() != b.rank())
    throw std::invalid_argument(
        cat(op, ": rank mismatch ", a.str(), " vs ", b.str()));
  BcastPlan p;
  p.rank = a.rank();
  p.out = a;
  for (int i = 0; i < p.rank; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1)
      throw std::invalid_argument(
          cat(op, ": shapes not broadcastable ", a.str(), " vs ", b.str()));
    p.out[i] = std::max(a[i], b[i]);
    p.dims[i] = p.out[i];
  }
  int64_t sa = 1, sb = 1;
  for (int i = p.rank - 1; i >= 0; --i) {
    p.stride_a[i] = (a[i] == 1 && p.out[i] != 1) ? 0 : sa;
    p.stride_b[i] = (b[i] == 1 && p.out[i] != 1) ? 0 : sb;
    sa *= a[i];
    sb *= b[i];
  }
  return p;
}

}  // namespace detail

template <typename T, bool kMul>
Tensor<T> binary_broadcast(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::broadcast_plan(a.shape, b.shape, kMul ? "mul" : "add");
  Tensor<T> y(plan.out);
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  T* yp = y.ptr();
  int64_t o = 0;
  for (int i0 = 0; i0 < plan.dims[0]; ++i0)
    for (int i1 = 0; i1 < plan.dims[1]; ++i1)
      for (int i2 = 0; i2 < plan.dims[2]; ++i2) {
        int64_t ia = i0 * plan.stride_a[0] + i1 * plan.stride_a[1] + i2 * plan.stride_a[2];
        int64_t ib = i0 * plan.stride_b[0] + i1 * plan.stride_b[1] + i2 * plan.stride_b[2];
        for (int i3 = 0; i3 < plan.dims[3]; ++i3) {
          const T va = ap[ia + i3 * plan.stride_a[3]];
          const T vb = bp[ib + i3 * plan.stride_b[3]];
          yp[o++] = kMul ? va * vb : va + vb;
        }
      }
  if (tape && (a.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, yc = y;
    tape->record([ac, bc, yc, plan]() mutable {
      if (!yc.has_grad()) return;
      const bool na = ac.requires_grad(), nb = bc.requires_grad();
      if (na) ac.ensure_grad();
      if (nb) bc.ensure_grad();
      const T* g = yc.grad_data();
      const T* ap = ac.ptr();
      const T* bp = bc.ptr();
      T* ga = na ? ac.grad_data() : nullptr;
      T* gb = nb ? bc.grad_data() : nullptr;
      int64_t o = 0;
      for (int i0 = 0; i0 < plan.dims[0]; ++i0)
        for (int i1 = 0; i1 < plan.dims[1]; ++i1)
          for (int i2 = 0; i2 < plan.dims[2]; ++i2) {
            int64_t ia = i0 * plan.stride_a[0] + i1 * plan.stride_a[1] + i2 * plan.stride_a[2];
            int64_t ib = i0 * plan.stride_b[0] + i1 * plan.stride_b[1] + i2 * plan.stride_b[2];
            for (int i3 = 0; i3 < plan.dims[3]; ++i3, ++o) {
              const int64_t ja = ia + i3 * plan.stride_a[3];
              const int64_t jb = ib + i3 * plan.stride_b[3];
              if constexpr (kMul) {
                if (ga) ga[ja] += g[o] * bp[jb];
                if (gb) gb[jb] += g[o] * ap[ja];
              } else {
                if (ga) ga[ja] += g[o];
                if (gb) gb[jb] += g[o];
              }
            }
          }
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast<T, false>(tape, a, b);
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast<T, true>(tape, a, b);
}

// ---------------------------------------------------------------------------
// shape ops

// A reshape shares storage and gradient with its input, so it needs no
// backward node; the tape parameter exists only for interface symmetry.
template <typename T>
Tensor<T> reshape(Tape<T>*, const Tensor<T>& x, Shape s) {
  return x.view(s);
}

template <typename T>
Tensor<T> flatten(Tape<T>* tape, const Tensor<T>& x) {
  if (x.shape.rank() != 4)
    throw std::invalid_argument(cat("flatten: expected 4D, got ", x.shape.str()));
  return reshape(tape, x, Shape{x.shape[0], x.shape[1] * x.shape[2] * x.shape[3]});
}

template <typename T>
Tensor<T> concat_dim1(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.rank() != b.shape.rank() || a.shape.rank() < 2)
    throw std::invalid_argument(
        cat("concat_dim1: rank mismatch ", a.shape.str(), " vs ", b.shape.str()));
  Shape os = a.shape;
  os[1] = a.shape[1] + b.shape[1];
  int64_t inner = 1;
  for (int i = 2; i < a.shape.rank(); ++i) {
    if (a.shape[i] != b.shape[i])
      throw std::invalid_argument(
          cat("concat_dim1: trailing dims differ ", a.shape.str(), " vs ", b.shape.str()));
    inner *= a.shape[i];
  }
  if (a.shape[0] != b.shape[0])
    throw std::invalid_argument(
        cat("concat_dim1: leading dim differs ", a.shape.str(), " vs ", b.shape.str()));
  const int64_t rows = a.shape[0];
  const int64_t wa = a.shape[1] * inner, wb = b.shape[1] * inner;
  Tensor<T> y(os);
  for (int64_t r = 0; r < rows; ++r) {
    std::copy_n(a.ptr() + r * wa, wa, y.ptr() + r * (wa + wb));
    std::copy_n(b.ptr() + r * wb, wb, y.ptr() + r * (wa + wb) + wa);
  }
  if (tape && (a.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, yc = y;
    tape->record([ac, bc, yc, rows, wa, wb]() mutable {
      if (!yc.has_grad()) return;
      const T* g = yc.grad_data();
      if (ac.requires_grad()) {
        ac.ensure_grad();
        T* ga = ac.grad_data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < wa; ++i) ga[r * wa + i] += g[r * (wa + wb) + i];
      }
      if (bc.requires_grad()) {
        bc.ensure_grad();
        T* gb = bc.grad_data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < wb; ++i) gb[r * wb + i] += g[r * (wa + wb) + wa + i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// convolution (im2col + GEMM; 1x1/s1/p0 skips the col buffer entirely)

namespace detail {

inline int conv_out_extent(int in, int k, int stride, int pad, const char* op) {
  const int out = (in + 2 * pad - k) / stride + 1;
  if (out <= 0)
    throw std::invalid_argument(cat(op, ": non-positive output extent for input ",
                                    in, ", kernel ", k, ", stride ", stride,
                                    ", pad ", pad));
  return out;
}

template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* col) {
  const int64_t n = static_cast<int64_t>(oh) * ow;
  for (int ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        T* dst = col + ((static_cast<int64_t>(ci) * kh + ki) * kw + kj) * n;
        for (int oi = 0; oi < oh; ++oi) {
          const int ih = oi * stride - pad + ki;
          if (ih < 0 || ih >= h) {
            std::fill_n(dst + static_cast<int64_t>(oi) * ow, ow, T(0));
            continue;
          }
          const T* src = x + (static_cast<int64_t>(ci) * h + ih) * w;
          for (int oj = 0; oj < ow; ++oj) {
            const int iw = oj * stride - pad + kj;
            dst[static_cast<int64_t>(oi) * ow + oj] =
                (iw >= 0 && iw < w) ? src[iw] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int stride,
                int pad, int oh, int ow, T* x) {
  const int64_t n = static_cast<int64_t>(oh) * ow;
  for (int ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const T* src = col + ((static_cast<int64_t>(ci) * kh + ki) * kw + kj) * n;
        for (int oi = 0; oi < oh; ++oi) {
          const int ih = oi * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          T* dst = x + (static_cast<int64_t>(ci) * h + ih) * w;
          for (int oj = 0; oj < ow; ++oj) {
            const int iw = oj * stride - pad + kj;
            if (iw >= 0 && iw < w) dst[iw] += src[static_cast<int64_t>(oi) * ow + oj];
          }
        }
      }
}

template <typename T>
std::vector<T>& conv_scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>* bias, int stride, int pad) {
  if (x.shape.rank() != 4 || w.shape.rank() != 4)
    throw std::invalid_argument(cat("conv2d: expected 4D input/weight, got ",
                                    x.shape.str(), " and ", w.shape.str()));
  const int batch = x.shape[0], in_c = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const int out_c = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  if (w.shape[1] != in_c)
    throw std::invalid_argument(cat("conv2d: input has ", in_c,
                                    " channels but weight expects ", w.shape[1]));
  const int oh = detail::conv_out_extent(h, kh, stride, pad, "conv2d");
  const int ow = detail::conv_out_extent(wd, kw, stride, pad, "conv2d");
  const bool unit = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
  const int64_t k_dim = static_cast<int64_t>(in_c) * kh * kw;
  const int64_t n_dim = static_cast<int64_t>(oh) * ow;

  Tensor<T> y(Shape{batch, out_c, oh, ow});
  auto& col = detail::conv_scratch<T>();
  if (!unit) col.resize(k_dim * n_dim);
  for (int b = 0; b < batch; ++b) {
    const T* xb = x.ptr() + static_cast<int64_t>(b) * in_c * h * wd;
    T* yb = y.ptr() + static_cast<int64_t>(b) * out_c * n_dim;
    const T* cb = xb;
    if (!unit) {
      detail::im2col(xb, in_c, h, wd, kh, kw, stride, pad, oh, ow, col.data());
      cb = col.data();
    }
    detail::gemm(false, false, out_c, static_cast<int>(n_dim), static_cast<int>(k_dim),
                 T(1), w.ptr(), static_cast<int>(k_dim), cb, static_cast<int>(n_dim),
                 T(0), yb, static_cast<int>(n_dim));
    if (bias) {
      const T* bp = bias->ptr();
      for (int oc = 0; oc < out_c; ++oc) {
        T* row = yb + static_cast<int64_t>(oc) * n_dim;
        for (int64_t i = 0; i < n_dim; ++i) row[i] += bp[oc];
      }
    }
  }

  const bool has_bias = bias != nullptr;
  if (tape && (x.requires_grad() || w.requires_grad() ||
               (has_bias && bias->requires_grad()))) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, yc = y;
    Tensor<T> bb = has_bias ? *bias : Tensor<T>();
    tape->record([xc, wc, bb, yc, stride, pad, unit, oh, ow, k_dim, n_dim]() mutable {
      if (!yc.has_grad()) return;
      const int batch = xc.shape[0], in_c = xc.shape[1], h = xc.shape[2], wd = xc.shape[3];
      const int out_c = wc.shape[0], kh = wc.shape[2], kw = wc.shape[3];
      const bool nx = xc.requires_grad(), nw = wc.requires_grad();
      const bool nb = bb.defined() && bb.requires_grad();
      if (nx) xc.ensure_grad();
      if (nw) wc.ensure_grad();
      if (nb) bb.ensure_grad();
      auto& col = detail::conv_scratch<T>();
      thread_local std::vector<T> dcol;
      if (!unit) {
        col.resize(k_dim * n_dim);
        dcol.resize(k_dim * n_dim);
      }
      for (int b = 0; b < batch; ++b) {
        const T* xb = xc.ptr() + static_cast<int64_t>(b) * in_c * h * wd;
        const T* gyb = yc.grad_data() + static_cast<int64_t>(b) * out_c * n_dim;
        if (nw) {
          const T* cb = xb;
          if (!unit) {
            detail::im2col(xb, in_c, h, wd, kh, kw, stride, pad, oh, ow, col.data());
            cb = col.data();
          }
          detail::gemm(false, true, out_c, static_cast<int>(k_dim), static_cast<int>(n_dim),
                       T(1), gyb, static_cast<int>(n_dim), cb, static_cast<int>(n_dim),
                       T(1), wc.grad_data(), static_cast<int>(k_dim));
        }
        if (nx) {
          T* gxb = xc.grad_data() + static_cast<int64_t>(b) * in_c * h * wd;
          if (unit) {
            detail::gemm(true, false, static_cast<int>(k_dim), static_cast<int>(n_dim),
                         out_c, T(1), wc.ptr(), static_cast<int>(k_dim), gyb,
                         static_cast<int>(n_dim), T(1), gxb, static_cast<int>(n_dim));
          } else {
            detail::gemm(true, false, static_cast<int>(k_dim), static_cast<int>(n_dim),
                         out_c, T(1), wc.ptr(), static_cast<int>(k_dim), gyb,
                         static_cast<int>(n_dim), T(0), dcol.data(), static_cast<int>(n_dim));
            detail::col2im_add(dcol.data(), in_c, h, wd, kh, kw, stride, pad, oh, ow, gxb);
          }
        }
        if (nb) {
          T* gb = bb.grad_data();
          for (int oc = 0; oc < out_c; ++oc) {
            T s = T(0);
            const T* row = gyb + static_cast<int64_t>(oc) * n_dim;
            for (int64_t i = 0; i < n_dim; ++i) s += row[i];
            gb[oc] += s;
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 std::nullptr_t, int stride, int pad) {
  return conv2d<T>(tape, x, w, static_cast<const Tensor<T>*>(nullptr), stride, pad);
}

// out[b,0,h,w] = sum_c s[b,c] * x[b,c,h,w]; s is (B,C) or (1,C)
template <typename T>
Tensor<T> pointwise_conv_filter(Tape<T>* tape, const Tensor<T>& s, const Tensor<T>& x) {
  if (x.shape.rank() != 4 || s.shape.rank() != 2)
    throw std::invalid_argument(cat("pointwise_conv_filter: expected 2D filter and 4D input, got ",
                                    s.shape.str(), " and ", x.shape.str()));
  const int batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (s.shape[1] != c)
    throw std::invalid_argument(cat("pointwise_conv_filter: filter length ", s.shape[1],
                                    " != input channels ", c));
  if (s.shape[0] != batch && s.shape[0] != 1)
    throw std::invalid_argument(cat("pointwise_conv_filter: filter batch ", s.shape[0],
                                    " incompatible with input batch ", batch));
  const bool shared = s.shape[0] == 1;
  const int64_t hw = static_cast<int64_t>(h) * w;
  Tensor<T> y(Shape{batch, 1, h, w});
  for (int b = 0; b < batch; ++b) {
    const T* sp = s.ptr() + (shared ? 0 : static_cast<int64_t>(b) * c);
    const T* xb = x.ptr() + static_cast<int64_t>(b) * c * hw;
    T* yb = y.ptr() + static_cast<int64_t>(b) * hw;
    std::fill_n(yb, hw, T(0));
    for (int ci = 0; ci < c; ++ci) {
      const T sv = sp[ci];
      const T* xr = xb + static_cast<int64_t>(ci) * hw;
      for (int64_t i = 0; i < hw; ++i) yb[i] += sv * xr[i];
    }
  }
  if (tape && (s.requires_grad() || x.requires_grad())) {
    y.set_requires_grad(true);
    Tensor<T> sc = s, xc = x, yc = y;
    tape->record([sc, xc, yc, shared, hw]() mutable {
      if (!yc.has_grad()) return;
      const int batch = xc.shape[0], c = xc.shape[1];
      const bool ns = sc.requires_grad(), nx = xc.requires_grad();
      if (ns) sc.ensure_grad();
      if (nx) xc.ensure_grad();
      for (int b = 0; b < batch; ++b) {
        const T* g = yc.grad_data() + static_cast<int64_t>(b) * hw;
        const T* sp = sc.ptr() + (shared ? 0 : static_cast<int64_t>(b) * c);
        const T* xb = xc.ptr() + static_cast<int64_t>(b) * c * hw;
        for (int ci = 0; ci < c; ++ci) {
          const T* xr = xb + static_cast<int64_t>(ci) * hw;
          if (ns) {
            T acc = T(0);
            for (int64_t i = 0; i < hw; ++i) acc += g[i] * xr[i];
            sc.grad_data()[(shared ? 0 : static_cast<int64_t>(b) * c) + ci] += acc;
          }
          if (nx) {
            T* gx = xc.grad_data() + static_cast<int64_t>(b) * c * hw +
                    static_cast<int64_t>(ci) * hw;
            const T sv = sp[ci];
            for (int64_t i = 0; i < hw; ++i) gx[i] += sv * g[i];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// pooling

enum class PoolKind { kGlobalAvg, kGlobalMax };

template <typename T>
Tensor<T> global_avg_pool(Tape<T>* tape, const Tensor<T>& x) {
  if (x.shape.rank() != 4)
    throw std::invalid_argument(cat("global_avg_pool: expected 4D, got ", x.shape.str()));
  const int batch = x.shape[0], c = x.shape[1];
  const int64_t hw = static_cast<int64_t>(x.shape[2]) * x.shape[3];
  Tensor<T> y(Shape{batch, c, 1, 1});
  for (int64_t bc = 0; bc < static_cast<int64_t>(batch) * c; ++bc) {
    const T* p = x.ptr() + bc * hw;
    T s = T(0);
    for (int64_t i = 0; i < hw; ++i) s += p[i];
    y.ptr()[bc] = s / static_cast<T>(hw);
  }
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, hw]() mutable {
      if (!yc.has_grad()) return;
      xc.ensure_grad();
      const T inv = T(1) / static_cast<T>(hw);
      for (int64_t bc = 0; bc < yc.numel(); ++bc) {
        const T g = yc.grad_data()[bc] * inv;
        T* gx = xc.grad_data() + bc * hw;
        for (int64_t i = 0; i < hw; ++i) gx[i] += g;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> global_max_pool(Tape<T>* tape, const Tensor<T>& x) {
  if (x.shape.rank() != 4)
    throw std::invalid_argument(cat("global_max_pool: expected 4D, got ", x.shape.str()));
  const int batch = x.shape[0], c = x.shape[1];
  const int64_t hw = static_cast<int64_t>(x.shape[2]) * x.shape[3];
  Tensor<T> y(Shape{batch, c, 1, 1});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(batch) * c);
  for (int64_t bc = 0; bc < static_cast<int64_t>(batch) * c; ++bc) {
    const T* p = x.ptr() + bc * hw;
    int64_t best = 0;
    for (int64_t i = 1; i < hw; ++i)
      if (p[i] > p[best]) best = i;  // first max wins ties
    y.ptr()[bc] = p[best];
    (*argmax)[bc] = best;
  }
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, argmax, hw]() mutable {
      if (!yc.has_grad()) return;
      xc.ensure_grad();
      for (int64_t bc = 0; bc < yc.numel(); ++bc)
        xc.grad_data()[bc * hw + (*argmax)[bc]] += yc.grad_data()[bc];
    });
  }
  return y;
}

template <typename T>
Tensor<T> pool(Tape<T>* tape, PoolKind kind, const Tensor<T>& x) {
  return kind == PoolKind::kGlobalAvg ? global_avg_pool(tape, x)
                                      : global_max_pool(tape, x);
}

template <typename T>
Tensor<T> max_pool2d(Tape<T>* tape, const Tensor<T>& x, int k, int stride, int pad) {
  if (x.shape.rank() != 4)
    throw std::invalid_argument(cat("max_pool2d: expected 4D, got ", x.shape.str()));
  const int batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const int oh = detail::conv_out_extent(h, k, stride, pad, "max_pool2d");
  const int ow = detail::conv_out_extent(w, k, stride, pad, "max_pool2d");
  Tensor<T> y(Shape{batch, c, oh, ow});
  auto argmax = std::make_shared<std::vector<int64_t>>(y.numel());
  int64_t o = 0;
  for (int b = 0; b < batch; ++b)
    for (int ci = 0; ci < c; ++ci) {
      const T* xp = x.ptr() + (static_cast<int64_t>(b) * c + ci) * h * w;
      for (int oi = 0; oi < oh; ++oi)
        for (int oj = 0; oj < ow; ++oj, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t best_idx = -1;
          for (int ki = 0; ki < k; ++ki) {
            const int ih = oi * stride - pad + ki;
            if (ih < 0 || ih >= h) continue;
            for (int kj = 0; kj < k; ++kj) {
              const int iw = oj * stride - pad + kj;
              if (iw < 0 || iw >= w) continue;
              const T v = xp[static_cast<int64_t>(ih) * w + iw];
              if (v > best) {
                best = v;
                best_idx = static_cast<int64_t>(ih) * w + iw;
              }
            }
          }
          y.ptr()[o] = best;
          (*argmax)[o] = (static_cast<int64_t>(b) * c + ci) * h * w + best_idx;
        }
    }
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, argmax]() mutable {
      if (!yc.has_grad()) return;
      xc.ensure_grad();
      for (int64_t i = 0, n = yc.numel(); i < n; ++i)
        xc.grad_data()[(*argmax)[i]] += yc.grad_data()[i];
    });
  }
  return y;
}

// reductions over the channel axis, used by the CBAM spatial stage
template <typename T>
Tensor<T> channel_mean(Tape<T>* tape, const Tensor<T>& x) {
  const int batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const int64_t hw = static_cast<int64_t>(h) * w;
  Tensor<T> y(Shape{batch, 1, h, w});
  for (int b = 0; b < batch; ++b) {
    T* yb = y.ptr() + static_cast<int64_t>(b) * hw;
    std::fill_n(yb, hw, T(0));
    for (int ci = 0; ci < c; ++ci) {
      const T* xr = x.ptr() + (static_cast<int64_t>(b) * c + ci) * hw;
      for (int64_t i = 0; i < hw; ++i) yb[i] += xr[i];
    }
    for (int64_t i = 0; i < hw; ++i) yb[i] /= static_cast<T>(c);
  }
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, hw]() mutable {
      if (!yc.has_grad()) return;
      xc.ensure_grad();
      const int batch = xc.shape[0], c = xc.shape[1];
      const T inv = T(1) / static_cast<T>(c);
      for (int b = 0; b < batch; ++b) {
        const T* g = yc.grad_data() + static_cast<int64_t>(b) * hw;
        for (int ci = 0; ci < c; ++ci) {
          T* gx = xc.grad_data() + (static_cast<int64_t>(b) * c + ci) * hw;
          for (int64_t i = 0; i < hw; ++i) gx[i] += g[i] * inv;
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> channel_max(Tape<T>* tape, const Tensor<T>& x) {
  const int batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const int64_t hw = static_cast<int64_t>(h) * w;
  Tensor<T> y(Shape{batch, 1, h, w});
  auto argmax = std::make_shared<std::vector<int>>(y.numel());
  for (int b = 0; b < batch; ++b) {
    T* yb = y.ptr() + static_cast<int64_t>(b) * hw;
    int* am = argmax->data() + static_cast<int64_t>(b) * hw;
    const T* xb = x.ptr() + static_cast<int64_t>(b) * c * hw;
    for (int64_t i = 0; i < hw; ++i) {
      int best = 0;
      for (int ci = 1; ci < c; ++ci)
        if (xb[static_cast<int64_t>(ci) * hw + i] > xb[static_cast<int64_t>(best) * hw + i])
          best = ci;
      yb[i] = xb[static_cast<int64_t>(best) * hw + i];
      am[i] = best;
    }
  }
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, argmax, hw]() mutable {
      if (!yc.has_grad()) return;
      xc.ensure_grad();
      const int batch = xc.shape[0], c = xc.shape[1];
      for (int b = 0; b < batch; ++b) {
        const T* g = yc.grad_data() + static_cast<int64_t>(b) * hw;
        const int* am = argmax->data() + static_cast<int64_t>(b) * hw;
        T* gx = xc.grad_data() + static_cast<int64_t>(b) * c * hw;
        for (int64_t i = 0; i < hw; ++i)
          gx[static_cast<int64_t>(am[i]) * hw + i] += g[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// linear

template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>* bias) {
  if (x.shape.rank() != 2 || w.shape.rank() != 2)
    throw std::invalid_argument(cat("linear: expected 2D input/weight, got ",
                                    x.shape.str(), " and ", w.shape.str()));
  const int batch = x.shape[0], in = x.shape[1], out = w.shape[0];
  if (w.shape[1] != in)
    throw std::invalid_argument(cat("linear: input features ", in,
                                    " != weight in features ", w.shape[1]));
  Tensor<T> y(Shape{batch, out});
  detail::gemm(false, true, batch, out, in, T(1), x.ptr(), in, w.ptr(), in, T(0),
               y.ptr(), out);
  if (bias) {
    const T* bp = bias->ptr();
    for (int b = 0; b < batch; ++b)
      for (int j = 0; j < out; ++j) y.ptr()[static_cast<int64_t>(b) * out + j] += bp[j];
  }
  const bool has_bias = bias != nullptr;
  if (tape && (x.requires_grad() || w.requires_grad() ||
               (has_bias && bias->requires_grad()))) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, yc = y;
    Tensor<T> bb = has_bias ? *bias : Tensor<T>();
    tape->record([xc, wc, bb, yc]() mutable {
      if (!yc.has_grad()) return;
      const int batch = xc.shape[0], in = xc.shape[1], out = wc.shape[0];
      const T* gy = yc.grad_data();
      if (xc.requires_grad()) {
        xc.ensure_grad();
        detail::gemm(false, false, batch, in, out, T(1), gy, out, wc.ptr(), in,
                     T(1), xc.grad_data(), in);
      }
      if (wc.requires_grad()) {
        wc.ensure_grad();
        detail::gemm(true, false, out, in, batch, T(1), gy, out, xc.ptr(), in,
                     T(1), wc.grad_data(), in);
      }
      if (bb.defined() && bb.requires_grad()) {
        bb.ensure_grad();
        T* gb = bb.grad_data();
        for (int b = 0; b < batch; ++b)
          for (int j = 0; j < out; ++j) gb[j] += gy[static_cast<int64_t>(b) * out + j];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, std::nullptr_t) {
  return linear<T>(tape, x, w, static_cast<const Tensor<T>*>(nullptr));
}

// ---------------------------------------------------------------------------
// batch normalization

template <typename T>
struct BatchNormState {
  Tensor<T> gamma, beta;        // trainable
  Tensor<T> run_mean, run_var;  // buffers (not parameters)
  T eps = T(1e-5);
  T momentum = T(0.1);

  BatchNormState() = default;
  explicit BatchNormState(int channels) { init(channels); }

  void init(int channels) {
    gamma = Tensor<T>(Shape{channels}, T(1));
    beta = Tensor<T>(Shape{channels}, T(0));
    run_mean = Tensor<T>(Shape{channels}, T(0));
    run_var = Tensor<T>(Shape{channels}, T(1));
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }
  int channels() const { return gamma.defined() ? gamma.shape[0] : 0; }
};

template <typename T>
Tensor<T> batchnorm(Tape<T>* tape, const Tensor<T>& x, BatchNormState<T>& bn, Mode mode) {
  if (x.shape.rank() != 4)
    throw std::invalid_argument(cat("batchnorm: expected 4D, got ", x.shape.str()));
  const int batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (bn.channels() != c)
    throw std::invalid_argument(cat("batchnorm: state has ", bn.channels(),
                                    " channels but input has ", c));
  const int64_t hw = static_cast<int64_t>(h) * w;
  const int64_t n = static_cast<int64_t>(batch) * hw;
  Tensor<T> y(x.shape);

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto invstd = std::make_shared<std::vector<T>>(c);

  if (mode == Mode::kTrain) {
    for (int ci = 0; ci < c; ++ci) {
      T mean = T(0);
      for (int b = 0; b < batch; ++b) {
        const T* p = x.ptr() + (static_cast<int64_t>(b) * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) mean += p[i];
      }
      mean /= static_cast<T>(n);
      T var = T(0);
      for (int b = 0; b < batch; ++b) {
        const T* p = x.ptr() + (static_cast<int64_t>(b) * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const T d = p[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<T>(n);
      const T is = T(1) / std::sqrt(var + bn.eps);
      (*invstd)[ci] = is;
      const T g = bn.gamma[ci], be = bn.beta[ci];
      for (int b = 0; b < batch; ++b) {
        const T* p = x.ptr() + (static_cast<int64_t>(b) * c + ci) * hw;
        T* xh = xhat->data() + (static_cast<int64_t>(b) * c + ci) * hw;
        T* yp = y.ptr() + (static_cast<int64_t>(b) * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          xh[i] = (p[i] - mean) * is;
          yp[i] = g * xh[i] + be;
        }
      }
      // running stats use the unbiased variance, PyTorch-style
      const T unbiased = n > 1 ? var * static_cast<T>(n) / static_cast<T>(n - 1) : var;
      bn.run_mean[ci] = (T(1) - bn.momentum) * bn.run_mean[ci] + bn.momentum * mean;
      bn.run_var[ci] = (T(1) - bn.momentum) * bn.run_var[ci] + bn.momentum * unbiased;
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      const T is = T(1) / std::sqrt(bn.run_var[ci] + bn.eps);
      (*invstd)[ci] = is;
      const T mean = bn.run_mean[ci];
      const T g = bn.gamma[ci], be = bn.beta[ci];
      for (int b = 0; b < batch; ++b) {
        const T* p = x.ptr() + (static_cast<int64_t>(b) * c + ci) * hw;
        T* xh = xhat->data() + (static_cast<int64_t>(b) * c + ci) * hw;
        T* yp = y.ptr() + (static_cast<int64_t>(b) * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          xh[i] = (p[i] - mean) * is;
          yp[i] = g * xh[i] + be;
        }
      }
    }
  }

  if (tape && (x.requires_grad() || bn.gamma.requires_grad() || bn.beta.requires_grad())) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y, gam = bn.gamma, bet = bn.beta;
    const bool train_stats = mode == Mode::kTrain;
    tape->record([xc, yc, gam, bet, xhat, invstd, hw, n, train_stats]() mutable {
      if (!yc.has_grad()) return;
      const int batch = xc.shape[0], c = xc.shape[1];
      const bool nx = xc.requires_grad(), ng = gam.requires_grad(), nb = bet.requires_grad();
      if (nx) xc.ensure_grad();
      if (ng) gam.ensure_grad();
      if (nb) bet.ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        T sum_g = T(0), sum_gx = T(0);
        for (int b = 0; b < batch; ++b) {
          const int64_t off = (static_cast<int64_t>(b) * c + ci) * hw;
          const T* g = yc.grad_data() + off;
          const T* xh = xhat->data() + off;
          for (int64_t i = 0; i < hw; ++i) {
            sum_g += g[i];
            sum_gx += g[i] * xh[i];
          }
        }
        if (ng) gam.grad_data()[ci] += sum_gx;
        if (nb) bet.grad_data()[ci] += sum_g;
        if (nx) {
          const T gv = gam[ci] * (*invstd)[ci];
          if (train_stats) {
            const T mg = sum_g / static_cast<T>(n);
            const T mgx = sum_gx / static_cast<T>(n);
            for (int b = 0; b < batch; ++b) {
              const int64_t off = (static_cast<int64_t>(b) * c + ci) * hw;
              const T* g = yc.grad_data() + off;
              const T* xh = xhat->data() + off;
              T* gx = xc.grad_data() + off;
              for (int64_t i = 0; i < hw; ++i)
                gx[i] += gv * (g[i] - mg - xh[i] * mgx);
            }
          } else {
            for (int b = 0; b < batch; ++b) {
              const int64_t off = (static_cast<int64_t>(b) * c + ci) * hw;
              const T* g = yc.grad_data() + off;
              T* gx = xc.grad_data() + off;
              for (int64_t i = 0; i < hw; ++i) gx[i] += gv * g[i];
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// loss and scalar plumbing

template <typename T>
void softmax_rows(const Tensor<T>& logits, std::vector<T>& probs) {
  const int batch = logits.shape[0], k = logits.shape[1];
  probs.resize(logits.numel());
  for (int b = 0; b < batch; ++b) {
    const T* row = logits.ptr() + static_cast<int64_t>(b) * k;
    T* pr = probs.data() + static_cast<int64_t>(b) * k;
    T m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
    T z = T(0);
    for (int j = 0; j < k; ++j) {
      pr[j] = std::exp(row[j] - m);
      z += pr[j];
    }
    for (int j = 0; j < k; ++j) pr[j] /= z;
  }
}

template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>* tape, const Tensor<T>& logits,
                                const std::vector<int>& labels) {
  if (logits.shape.rank() != 2)
    throw std::invalid_argument(cat("softmax_cross_entropy: expected 2D logits, got ",
                                    logits.shape.str()));
  const int batch = logits.shape[0], k = logits.shape[1];
  if (static_cast<int>(labels.size()) != batch)
    throw std::invalid_argument(cat("softmax_cross_entropy: ", labels.size(),
                                    " labels for batch ", batch));
  for (int b = 0; b < batch; ++b)
    if (labels[b] < 0 || labels[b] >= k)
      throw std::invalid_argument(cat("softmax_cross_entropy: label ", labels[b],
                                      " out of range [0,", k, ") at row ", b));
  auto probs = std::make_shared<std::vector<T>>();
  softmax_rows(logits, *probs);
  T loss = T(0);
  for (int b = 0; b < batch; ++b) {
    const T* row = logits.ptr() + static_cast<int64_t>(b) * k;
    T m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
    T z = T(0);
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
    loss += m + std::log(z) - row[labels[b]];
  }
  Tensor<T> out(Shape{1});
  out[0] = loss / static_cast<T>(batch);
  if (tape && logits.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> lc = logits, oc = out;
    auto lab = std::make_shared<std::vector<int>>(labels);
    tape->record([lc, oc, probs, lab]() mutable {
      if (!oc.has_grad()) return;
      lc.ensure_grad();
      const int batch = lc.shape[0], k = lc.shape[1];
      const T g = oc.grad()[0] / static_cast<T>(batch);
      for (int b = 0; b < batch; ++b) {
        const T* pr = probs->data() + static_cast<int64_t>(b) * k;
        T* gl = lc.grad_data() + static_cast<int64_t>(b) * k;
        for (int j = 0; j < k; ++j)
          gl[j] += g * (pr[j] - (j == (*lab)[b] ? T(1) : T(0)));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y(Shape{1});
  T s = T(0);
  for (int64_t i = 0, n = x.numel(); i < n; ++i) s += x[i];
  y[0] = s;
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      xc.ensure_grad();
      const T g = yc.grad()[0];
      T* gx = xc.grad_data();
      for (int64_t i = 0, n = xc.numel(); i < n; ++i) gx[i] += g;
    });
  }
  return y;
}

// out[i,:] = steps[pick[i]][i,:]; routes each row's gradient back to the
// step tensor it was taken from (per-item most-confident-step training)
template <typename T>
Tensor<T> gather_step_rows(Tape<T>* tape, const std::vector<Tensor<T>>& steps,
                           const std::vector<int>& pick) {
  if (steps.empty()) throw std::invalid_argument("gather_step_rows: no step tensors");
  const int batch = steps[0].shape[0], k = steps[0].shape[1];
  if (static_cast<int>(pick.size()) != batch)
    throw std::invalid_argument("gather_step_rows: pick size != batch");
  Tensor<T> y(Shape{batch, k});
  bool any_grad = false;
  for (auto& s : steps) any_grad = any_grad || s.requires_grad();
  for (int b = 0; b < batch; ++b) {
    const int t = pick[b];
    if (t < 0 || t >= static_cast<int>(steps.size()))
      throw std::invalid_argument(cat("gather_step_rows: step ", t, " out of range"));
    std::copy_n(steps[t].ptr() + static_cast<int64_t>(b) * k, k,
                y.ptr() + static_cast<int64_t>(b) * k);
  }
  if (tape && any_grad) {
    y.set_requires_grad(true);
    std::vector<Tensor<T>> sc = steps;
    Tensor<T> yc = y;
    auto pk = std::make_shared<std::vector<int>>(pick);
    tape->record([sc, yc, pk]() mutable {
      if (!yc.has_grad()) return;
      const int batch = yc.shape[0], k = yc.shape[1];
      for (int b = 0; b < batch; ++b) {
        auto& src = sc[(*pk)[b]];
        if (!src.requires_grad()) continue;
        src.ensure_grad();
        const T* g = yc.grad_data() + static_cast<int64_t>(b) * k;
        T* gs = src.grad_data() + static_cast<int64_t>(b) * k;
        for (int j = 0; j < k; ++j) gs[j] += g[j];
      }
    });
  }
  return y;
}

// picks one element of a 2D tensor as a scalar (Grad-CAM backprops a logit)
template <typename T>
Tensor<T> select_scalar(Tape<T>* tape, const Tensor<T>& x, int row, int col) {
  if (x.shape.rank() != 2 || row >= x.shape[0] || col >= x.shape[1])
    throw std::invalid_argument(cat("select_scalar: index (", row, ",", col,
                                    ") out of range for ", x.shape.str()));
  Tensor<T> y(Shape{1});
  y[0] = x[static_cast<int64_t>(row) * x.shape[1] + col];
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, row, col]() mutable {
      if (!yc.has_grad()) return;
      xc.ensure_grad();
      xc.grad_data()[static_cast<int64_t>(row) * xc.shape[1] + col] += yc.grad()[0];
    });
  }
  return y;
}

}  // namespace tdam
