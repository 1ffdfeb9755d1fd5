#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvmseg/parallel.hpp"

namespace mvmseg {

/// std::allocator whose value-less construct() default-initializes instead
/// of zeroing; buffers that are fully overwritten skip one memory pass.
template <typename T>
struct default_init_allocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = default_init_allocator<U>;
  };
  template <typename U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense numeric array of rank <= 4, row-major. Image data uses the
/// batch x channel x height x width layout. Copies are shallow: a Tensor
/// is a handle onto shared storage, which is what lets tape closures and
/// callers observe the same gradient buffer.
template <typename T>
class Tensor {
 public:
  using Storage = std::vector<T, default_init_allocator<T>>;

 private:
  struct Impl {
    std::vector<int> shape;
    Storage data;
    Storage grad;  // sized like data iff requires_grad
    bool requires_grad = false;
  };

  struct uninit_tag {};

  Tensor(std::vector<int> shape, uninit_tag) : impl_(std::make_shared<Impl>()) {
    impl_->shape = std::move(shape);
    impl_->data.resize(checked_count(impl_->shape));  // deliberately not zeroed
  }

  static std::size_t checked_count(const std::vector<int>& shape) {
    if (shape.size() > 4) throw std::invalid_argument("Tensor: rank " + std::to_string(shape.size()) + " exceeds 4");
    std::size_t n = 1;
    for (int e : shape) {
      if (e < 0) throw std::invalid_argument("Tensor: negative extent in " + shape_string(shape));
      n *= std::size_t(e);
    }
    return n;
  }

 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    const std::size_t n = checked_count(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(n, T(0));
    impl_->requires_grad = requires_grad;
    if (requires_grad) impl_->grad.assign(n, T(0));
  }

  /// Storage left uninitialized; for op outputs that are fully overwritten.
  static Tensor uninit(std::vector<int> shape) { return Tensor(std::move(shape), uninit_tag{}); }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    for (auto& x : t.impl_->data) x = value;
    return t;
  }

  static Tensor from(std::vector<int> shape, const std::vector<T>& values) {
    Tensor t(std::move(shape), uninit_tag{});
    if (values.size() != t.impl_->data.size())
      throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                                  shape_string(t.shape()));
    std::copy(values.begin(), values.end(), t.impl_->data.begin());
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  int rank() const { return int(impl_->shape.size()); }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[std::size_t(i)]; }
  std::size_t size() const { return impl_->data.size(); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  Storage& vec() { return impl_->data; }
  const Storage& vec() const { return impl_->data; }

  // rank-4 accessor (b, c, i, j)
  T& operator()(int b, int c, int i, int j) {
    auto& s = impl_->shape;
    return impl_->data[((std::size_t(b) * s[1] + c) * s[2] + i) * s[3] + j];
  }
  T operator()(int b, int c, int i, int j) const {
    auto& s = impl_->shape;
    return impl_->data[((std::size_t(b) * s[1] + c) * s[2] + i) * s[3] + j];
  }
  // rank-3 accessor (c, i, j)
  T& operator()(int c, int i, int j) {
    auto& s = impl_->shape;
    return impl_->data[(std::size_t(c) * s[1] + i) * s[2] + j];
  }
  T operator()(int c, int i, int j) const {
    auto& s = impl_->shape;
    return impl_->data[(std::size_t(c) * s[1] + i) * s[2] + j];
  }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  /// Value of a single-element tensor.
  T item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: size " + std::to_string(size()) + " != 1");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
      impl_->grad.resize(impl_->data.size());
      T* g = impl_->grad.data();
      parallel_chunks(impl_->grad.size(), [&](std::size_t lo, std::size_t hi) { std::fill(g + lo, g + hi, T(0)); });
    } else {
      impl_->grad.clear();
    }
  }

  T* grad() { return impl_->grad.data(); }
  const T* grad() const { return impl_->grad.data(); }
  Storage& grad_vec() { return impl_->grad; }
  const Storage& grad_vec() const { return impl_->grad; }

  void zero_grad() {
    T* g = impl_->grad.data();
    parallel_chunks(impl_->grad.size(), [&](std::size_t lo, std::size_t hi) { std::fill(g + lo, g + hi, T(0)); });
  }

  bool all_finite() const {
    for (T x : impl_->data)
      if (!std::isfinite(double(x))) return false;
    return true;
  }

  /// Deep copy (fresh storage, gradient not copied).
  Tensor clone() const {
    Tensor t(impl_->shape, impl_->requires_grad);
    t.impl_->data = impl_->data;
    return t;
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

/// Ordered log of executed differentiable ops. Each record is a closure
/// that propagates the output gradient of one op into its operands;
/// backward() replays records in exact reverse execution order, and
/// operand gradients accumulate additively across consumers.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_step) { steps_.push_back(std::move(backward_step)); }

  std::size_t size() const { return steps_.size(); }

  /// Seeds d(root)/d(root) = 1 and runs every recorded backward step in
  /// reverse. A second call without re-running the forward pass is an error.
  void backward(Tensor<T>& root) {
    if (root.size() != 1) throw std::invalid_argument("Tape::backward: root is not a scalar (size " + std::to_string(root.size()) + ")");
    if (!root.requires_grad()) throw std::invalid_argument("Tape::backward: root does not require grad (not produced through this tape?)");
    if (consumed_) throw std::logic_error("Tape::backward: tape already consumed; re-run the forward pass first");
    consumed_ = true;
    root.grad()[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  bool consumed() const { return consumed_; }

  /// Drops all records; the tape is ready for a fresh forward pass.
  void reset() {
    steps_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
};

}  // namespace mvmseg
