#pragma once

// Thin parameter-owning wrappers around the ops. Weight init is
// Kaiming-uniform over fan-in (bound sqrt(6/fan_in)), biases zero.

#include "tdam/ops.hpp"
#include "tdam/rng.hpp"

namespace tdam {

template <typename T>
void kaiming_uniform(Tensor<T>& w, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (int64_t i = 0, n = w.numel(); i < n; ++i)
    w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> w;  // out_c x in_c x k x k
  Tensor<T> b;
  bool has_bias = false;
  int stride = 1, pad = 0;

  void init(int in_c, int out_c, int k, int stride_, int pad_, bool bias, Rng& rng) {
    w = Tensor<T>(Shape{out_c, in_c, k, k});
    kaiming_uniform(w, in_c * k * k, rng);
    w.set_requires_grad(true);
    stride = stride_;
    pad = pad_;
    has_bias = bias;
    if (bias) {
      b = Tensor<T>(Shape{out_c}, T(0));
      b.set_requires_grad(true);
    }
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return conv2d(tape, x, w, has_bias ? &b : nullptr, stride, pad);
  }

  int in_channels() const { return w.shape[1]; }
  int out_channels() const { return w.shape[0]; }
  int kernel() const { return w.shape[2]; }
  int64_t param_count() const { return w.numel() + (has_bias ? b.numel() : 0); }
};

template <typename T>
struct LinearLayer {
  Tensor<T> w;  // out x in
  Tensor<T> b;
  bool has_bias = false;

  void init(int in, int out, bool bias, Rng& rng) {
    w = Tensor<T>(Shape{out, in});
    kaiming_uniform(w, in, rng);
    w.set_requires_grad(true);
    has_bias = bias;
    if (bias) {
      b = Tensor<T>(Shape{out}, T(0));
      b.set_requires_grad(true);
    }
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return linear(tape, x, w, has_bias ? &b : nullptr);
  }

  int in_features() const { return w.shape[1]; }
  int out_features() const { return w.shape[0]; }
};

template <typename T>
using BatchNorm2d = BatchNormState<T>;

}  // namespace tdam
