#pragma once

// Dense row-major tensors (rank 1-4) with a reverse-mode autodiff tape.
// A Tensor is a value-type handle onto a shared implementation record that
// owns the data and gradient buffers, so every copy of a tensor observes the
// same storage and the same gradient. A Tape records backward closures in
// execution order; Tape::backward replays them in reverse exactly once.

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdam {

template <class... A>
std::string cat(A&&... a) {
  std::ostringstream o;
  (o << ... << a);
  return o.str();
}

enum class Mode { kTrain, kEval };

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    if (dims.size() > 4) throw std::invalid_argument("Shape: rank > 4");
    for (int d : dims) d_[rank_++] = d;
  }

  int rank() const { return rank_; }
  int operator[](int i) const { return d_[i]; }
  int& operator[](int i) { return d_[i]; }

  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= d_[i];
    return rank_ ? n : 0;
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (d_[i] != o.d_[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s;
    for (int i = 0; i < rank_; ++i) s += (i ? "x" : "") + std::to_string(d_[i]);
    return s.empty() ? "scalar" : s;
  }

 private:
  std::array<int, 4> d_ = {0, 0, 0, 0};
  int rank_ = 0;
};

namespace detail {
template <typename T>
struct TensorImpl {
  std::vector<T> data;
  std::vector<T> grad;  // empty until first needed
  bool requires_grad = false;
};
}  // namespace detail

template <typename T>
class Tensor {
 public:
  Shape shape;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0))
      : shape(s), impl_(std::make_shared<detail::TensorImpl<T>>()) {
    impl_->data.assign(static_cast<size_t>(s.numel()), fill);
  }

  static Tensor from(Shape s, std::initializer_list<T> vals) {
    Tensor t(s);
    if (static_cast<int64_t>(vals.size()) != s.numel())
      throw std::invalid_argument("Tensor::from: value count != numel");
    std::copy(vals.begin(), vals.end(), t.impl_->data.begin());
    return t;
  }

  bool defined() const { return static_cast<bool>(impl_); }
  int64_t numel() const { return shape.numel(); }

  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T& operator[](int64_t i) { return impl_->data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }

  // 4D accessor (b, c, h, w)
  T& at(int b, int c, int h, int w) {
    return impl_->data[static_cast<size_t>(
        ((static_cast<int64_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  const T& at(int b, int c, int h, int w) const {
    return impl_->data[static_cast<size_t>(
        ((static_cast<int64_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  }
  void zero_grad() {
    if (impl_ && !impl_->grad.empty())
      std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  std::vector<T>& grad() { return impl_->grad; }
  const std::vector<T>& grad() const { return impl_->grad; }
  T* grad_data() { return impl_->grad.data(); }
  const T* grad_data() const { return impl_->grad.data(); }

  // same storage under a different shape; gradients flow through untouched
  Tensor view(Shape s) const {
    if (s.numel() != shape.numel())
      throw std::invalid_argument(
          cat("view: numel mismatch ", shape.str(), " -> ", s.str()));
    Tensor t = *this;
    t.shape = s;
    return t;
  }

  // deep copy of values; no grad, no requires_grad
  Tensor clone_detached() const {
    Tensor t;
    t.shape = shape;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->data = impl_->data;
    return t;
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

template <typename T>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = 1 and replays every node once, newest first.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument(
          cat("backward: loss must be scalar, got shape ", loss.shape.str()));
    if (consumed_) throw std::runtime_error("backward: tape already consumed");
    consumed_ = true;
    loss.ensure_grad();
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

}  // namespace tdam
