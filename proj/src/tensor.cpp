#include "vat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace vat {

namespace memory {
namespace {
std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

std::size_t live_bytes() noexcept { return g_live.load(); }
std::size_t peak_bytes() noexcept { return g_peak.load(); }
void reset_peak() noexcept { g_peak.store(g_live.load()); }

namespace detail {
void on_alloc(std::size_t bytes) noexcept {
  const std::size_t now = g_live.fetch_add(bytes) + bytes;
  std::size_t peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}
void on_free(std::size_t bytes) noexcept { g_live.fetch_sub(bytes); }
}  // namespace detail
}  // namespace memory

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  if (shape.empty()) os << "scalar";
  return os.str();
}

std::vector<std::size_t> strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

template <typename T>
Buffer<T>& TensorImpl<T>::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  return grad;
}

template <typename T>
Tensor<T>::Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {
  impl_->data.assign(1, T(0));
}

template <typename T>
Tensor<T>::Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape;
  impl->data.assign(vat::numel(shape), value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values, bool requires_grad) {
  if (vat::numel(shape) != values.size()) {
    throw ShapeError("from: shape " + to_string(shape) + " needs " + std::to_string(vat::numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  Tensor t = zeros(shape, requires_grad);
  std::copy(values.begin(), values.end(), t.impl_->data.begin());
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return impl_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
void check_finite(std::span<const T> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(what + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got shape " + to_string(root.shape()));
  }
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<const TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* node = impl->node.get();
    if (node && next < node->inputs.size()) {
      const ImplPtr& in = node->inputs[next++];
      if (in->requires_grad && visited.insert(in.get()).second) stack.emplace_back(in.get(), 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  root.impl()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* impl = *it;
    if (!impl->node) continue;
    impl->grad_buffer();
    impl->node->backward(*impl, impl->node->inputs);
  }
  for (TensorImpl<T>* impl : order) {
    if (!impl->node) {
      check_finite<T>(impl->grad, "backward (leaf gradient)");
    }
  }
}

namespace detail {

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> data,
                      const std::vector<Tensor<T>>& inputs,
                      typename GradNode<T>::BackwardFn backward_fn) {
  check_finite<T>(data, op);
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      auto node = std::make_shared<GradNode<T>>();
      node->op = op;
      node->inputs.reserve(inputs.size());
      for (const auto& in : inputs) node->inputs.push_back(in.impl());
      node->backward = std::move(backward_fn);
      impl->node = std::move(node);
      impl->requires_grad = true;
    }
  }
  return Tensor<T>(std::move(impl));
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> data,
                      std::initializer_list<Tensor<T>> inputs,
                      typename GradNode<T>::BackwardFn backward_fn) {
  return make_result<T>(op, std::move(shape), std::move(data), std::vector<Tensor<T>>(inputs),
                        std::move(backward_fn));
}

}  // namespace detail

#define VAT_INSTANTIATE(T)                                                                       \
  template struct TensorImpl<T>;                                                                 \
  template class Tensor<T>;                                                                      \
  template void backward<T>(const Tensor<T>&);                                                   \
  template void check_finite<T>(std::span<const T>, const std::string&);                         \
  template Tensor<T> detail::make_result<T>(const char*, Shape, Buffer<T>,                       \
                                            std::initializer_list<Tensor<T>>,                    \
                                            typename GradNode<T>::BackwardFn);                   \
  template Tensor<T> detail::make_result<T>(const char*, Shape, Buffer<T>,                       \
                                            const std::vector<Tensor<T>>&,                       \
                                            typename GradNode<T>::BackwardFn);

VAT_INSTANTIATE(float)
VAT_INSTANTIATE(double)

}  // namespace vat
