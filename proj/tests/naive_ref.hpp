#pragma once

// Straight-line double-precision reference math for oracle tests: plain
// nested loops, no GEMM, no tape, no shared code with the library ops.

#include <cmath>
#include <vector>

#include "tdam/attention.hpp"

namespace tdam::naiveref {

inline double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline std::vector<double> naive_gap(const Tensor<double>& x) {
  std::vector<double> out(static_cast<size_t>(x.shape[0]) * x.shape[1]);
  for (int b = 0; b < x.shape[0]; ++b)
    for (int c = 0; c < x.shape[1]; ++c) {
      double s = 0;
      for (int h = 0; h < x.shape[2]; ++h)
        for (int w = 0; w < x.shape[3]; ++w) s += x.at(b, c, h, w);
      out[b * x.shape[1] + c] = s / (x.shape[2] * x.shape[3]);
    }
  return out;
}

inline std::vector<double> naive_linear(const std::vector<double>& x, int batch, int in,
                                        const LinearLayer<double>& l) {
  const int out = l.out_features();
  std::vector<double> y(static_cast<size_t>(batch) * out);
  for (int b = 0; b < batch; ++b)
    for (int o = 0; o < out; ++o) {
      double s = l.has_bias ? l.b[o] : 0.0;
      for (int i = 0; i < in; ++i) s += l.w[o * in + i] * x[b * in + i];
      y[b * out + o] = s;
    }
  return y;
}

inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w,
                                 int stride, int pad) {
  const int batch = x.shape[0], ic = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const int oc = w.shape[0], k = w.shape[2];
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> y(Shape{batch, oc, oh, ow});
  for (int b = 0; b < batch; ++b)
    for (int o = 0; o < oc; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double s = 0;
          for (int c = 0; c < ic; ++c)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const int ih = i * stride - pad + ki, iw = j * stride - pad + kj;
                if (ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
                s += x.at(b, c, ih, iw) * w.at(o, c, ki, kj);
              }
          y.at(b, o, i, j) = s;
        }
  return y;
}

inline Tensor<double> naive_bn_train(const Tensor<double>& x,
                                     const BatchNormState<double>& bn) {
  const int batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  Tensor<double> y(x.shape);
  const double n = static_cast<double>(batch) * h * w;
  for (int ci = 0; ci < c; ++ci) {
    double mean = 0, var = 0;
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) mean += x.at(b, ci, i, j);
    mean /= n;
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const double d = x.at(b, ci, i, j) - mean;
          var += d * d;
        }
    var /= n;
    const double is = 1.0 / std::sqrt(var + bn.eps);
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          y.at(b, ci, i, j) =
              bn.gamma[ci] * (x.at(b, ci, i, j) - mean) * is + bn.beta[ci];
  }
  return y;
}

inline Tensor<double> naive_relu(const Tensor<double>& x) {
  Tensor<double> y(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = std::max(0.0, x[i]);
  return y;
}

inline std::vector<double> naive_searchlight_joint(const Tensor<double>& top,
                                                   const Tensor<double>& bottom,
                                                   const SearchlightWeights<double>& w) {
  const int batch = top.shape[0];
  auto pt = naive_gap(top);
  auto pb = naive_gap(bottom);
  auto ht = naive_linear(pt, batch, top.shape[1], w.w_t);
  auto hb = naive_linear(pb, batch, bottom.shape[1], w.w_b);
  const int nt = w.w_t.out_features(), nb = w.w_b.out_features();
  std::vector<double> hidden(static_cast<size_t>(batch) * (nt + nb));
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < nt; ++i)
      hidden[b * (nt + nb) + i] = std::max(0.0, ht[b * nt + i]);
    for (int i = 0; i < nb; ++i)
      hidden[b * (nt + nb) + nt + i] = std::max(0.0, hb[b * nb + i]);
  }
  return naive_linear(hidden, batch, nt + nb, w.w_s);
}

// channel scaling with sigmoid(S), spatial map from the raw searchlight
inline Tensor<double> naive_att(const Tensor<double>& bottom,
                                const std::vector<double>& s) {
  const int batch = bottom.shape[0], c = bottom.shape[1], h = bottom.shape[2],
            w = bottom.shape[3];
  Tensor<double> xc(bottom.shape);
  for (int b = 0; b < batch; ++b)
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          xc.at(b, ci, i, j) = bottom.at(b, ci, i, j) * sig(s[b * c + ci]);
  Tensor<double> out(bottom.shape);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double a = 0;
        for (int ci = 0; ci < c; ++ci) a += s[b * c + ci] * xc.at(b, ci, i, j);
        for (int ci = 0; ci < c; ++ci) out.at(b, ci, i, j) = xc.at(b, ci, i, j) * sig(a);
      }
  return out;
}

}  // namespace tdam::naiveref
