#pragma once

// Dense row-major tensor with a reverse-mode autodiff tape.
//
// A Tensor is a shared handle: copying it aliases the same storage, the way
// framework tensors behave. Every op that consumes a tensor with
// requires_grad records a Node holding its inputs and a backward closure;
// backward() walks those nodes in reverse topological order.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace erfcond {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d < 1) throw ShapeError("tensor dims must be >= 1, got " + shape_str(shape));
  }
}

template <typename T>
struct Node;

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <typename T>
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Receives d(loss)/d(output) and accumulates into the inputs' grads.
  std::function<void(const std::vector<T>&)> backward;
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables tape recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorImpl<T>>()) {
    check_shape(shape);
    impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<TensorImpl<T>>()) {
    check_shape(shape);
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  static Tensor from_impl(std::shared_ptr<TensorImpl<T>> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& storage() { return impl_->data; }
  const std::vector<T>& storage() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return std::span<T>(impl_->grad_buffer(), impl_->data.size()); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return !impl_->grad_fn; }

  T item() const {
    if (impl_->data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  T& operator[](std::int64_t i) { return impl_->data[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  // New storage, no tape history.
  Tensor clone() const { return Tensor(impl_->shape, impl_->data); }
  Tensor detach() const { return clone(); }

  Tensor reshape(Shape shape) const {
    check_shape(shape);
    if (shape_numel(shape) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
    }
    // Reshape shares storage only for tape-free tensors.
    if (requires_grad()) throw Error("reshape of a tracked tensor is not supported");
    auto out = std::make_shared<TensorImpl<T>>();
    out->shape = std::move(shape);
    out->data = impl_->data;
    return from_impl(std::move(out));
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(impl_->shape, std::vector<U>(impl_->data.begin(), impl_->data.end()));
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
bool all_finite(std::span<const T> v) {
  for (T x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Wraps a freshly computed result and, when any input is tracked, records the
// tape node that will route gradients back to those inputs.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                      std::function<void(const std::vector<T>&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || (in && in->requires_grad);
  }
  if (track) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node<T>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    impl->grad_fn = std::move(node);
  }
  return Tensor<T>::from_impl(std::move(impl));
}

// Reverse accumulation from a scalar. Leaf gradients accumulate across calls;
// intermediate gradients are released once propagated.
template <typename T>
void backward(const Tensor<T>& output) {
  if (!output.defined() || output.numel() != 1) {
    throw ShapeError("backward() needs a single-element output, got " +
                     (output.defined() ? shape_str(output.shape()) : std::string("undefined")));
  }
  if (!output.requires_grad()) {
    throw Error("backward(): output is not connected to any tensor that requires grad");
  }
  if (!std::isfinite(output.item())) throw NumericError("backward(): output is not finite");

  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> visited;
  // Iterative post-order DFS; `order` ends up topologically sorted (inputs first).
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(output.impl().get(), 0);
  visited.insert(output.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      TensorImpl<T>* child = fn->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  output.impl()->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* node = *it;
    if (!node->grad_fn) continue;
    if (!node->grad.empty()) node->grad_fn->backward(node->grad);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

}  // namespace erfcond
