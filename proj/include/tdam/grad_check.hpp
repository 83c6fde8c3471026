#pragma once

// Central-difference gradient oracle. Test-only: it evaluates the forward
// function repeatedly and never touches the tape machinery it is used to
// verify. Relative error convention matches the usual gradient-check form
// |a - n| / max(1, |a|, |n|).

#include <functional>

#include "tdam/tensor.hpp"

namespace tdam {

template <typename T>
constexpr T default_fd_step() {
  if constexpr (sizeof(T) == 8)
    return T(1e-5);
  else
    return T(1e-3);
}

template <typename T, typename F>
std::vector<T> finite_diff_grad(F f, Tensor<T>& x, T h = default_fd_step<T>()) {
  std::vector<T> g(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T orig = x[i];
    x[i] = orig + h;
    const T fp = f(x);
    x[i] = orig - h;
    const T fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

template <typename T>
T rel_err(T analytic, T numeric) {
  const T denom = std::max(T(1), std::max(std::abs(analytic), std::abs(numeric)));
  return std::abs(analytic - numeric) / denom;
}

template <typename T>
T max_rel_err(const std::vector<T>& analytic, const std::vector<T>& numeric) {
  T worst = T(0);
  for (size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, rel_err(analytic[i], numeric[i]));
  return worst;
}

}  // namespace tdam
