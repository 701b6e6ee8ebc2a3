#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vat/errors.hpp"
#include "vat/memory.hpp"

namespace vat {

using Shape = std::vector<std::size_t>;

template <typename T>
using Buffer = std::vector<T, memory::TrackingAllocator<T>>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
// Row-major strides, in elements.
std::vector<std::size_t> strides(const Shape& shape);

template <typename T>
struct TensorImpl;

// One recorded operation. `backward` reads the output's gradient and
// accumulates into the gradients of `inputs` that require them.
template <typename T>
struct GradNode {
  using Inputs = std::vector<std::shared_ptr<TensorImpl<T>>>;
  using BackwardFn = std::function<void(const TensorImpl<T>& out, const Inputs& inputs)>;

  std::string op;
  Inputs inputs;
  BackwardFn backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;

  // Returns the gradient buffer, allocating zeros on first use.
  Buffer<T>& grad_buffer();
};

// Shared handle to a dense row-major tensor. Copies alias the same storage;
// use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  Tensor();
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad_buffer(); }
  bool has_grad() const { return !impl_->grad.empty(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  void zero_grad();
  bool is_leaf() const { return impl_->node == nullptr; }

  T item() const;
  std::vector<T> to_vector() const { return {impl_->data.begin(), impl_->data.end()}; }
  // Deep copy of values only; the copy is a leaf.
  Tensor clone() const;
  // Shares nothing with the graph; values are copied.
  Tensor detach() const { return clone(); }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Graph recording switch (thread-local). Inference runs under NoGradGuard.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Reverse-mode pass from a scalar root. Each reachable node runs exactly once
// in reverse topological order.
template <typename T>
void backward(const Tensor<T>& root);

// Throws NumericError naming `what` if any value is NaN or Inf.
template <typename T>
void check_finite(std::span<const T> values, const std::string& what);

namespace detail {

// Wraps a freshly computed buffer as the output of `op`. Records a graph
// node when grad mode is on and any input requires a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> data,
                      std::initializer_list<Tensor<T>> inputs,
                      typename GradNode<T>::BackwardFn backward_fn);

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> data,
                      const std::vector<Tensor<T>>& inputs,
                      typename GradNode<T>::BackwardFn backward_fn);

// Gradient buffer of `input` or nullptr if it does not take gradients.
template <typename T>
Buffer<T>* grad_sink(const std::shared_ptr<TensorImpl<T>>& input) {
  return input->requires_grad ? &input->grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace vat
