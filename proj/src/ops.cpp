#include "vat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace vat::ops {

namespace {

using detail::grad_sink;
using detail::make_result;

void require(bool ok, const std::string& op, const std::string& message) {
  if (!ok) throw ShapeError(op + ": " + message);
}

void require_same(const std::string& op, const Shape& a, const Shape& b) {
  require(a == b, op, "shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T, typename F, typename G>
Tensor<T> unary(const char* op, const Tensor<T>& x, F forward, G derivative) {
  Buffer<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xs[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x},
                        [derivative](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* gx = grad_sink(ins[0])) {
                            const auto& xd = ins[0]->data;
                            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                              (*gx)[i] += o.grad[i] * derivative(xd[i], o.data[i]);
                            }
                          }
                        });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("add", a.shape(), b.shape());
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b},
                        [](const TensorImpl<T>& o, const auto& ins) {
                          for (int k = 0; k < 2; ++k) {
                            if (auto* g = grad_sink(ins[k])) {
                              for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("sub", a.shape(), b.shape());
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b},
                        [](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* g = grad_sink(ins[0])) {
                            for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
                          }
                          if (auto* g = grad_sink(ins[1])) {
                            for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] -= o.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("mul", a.shape(), b.shape());
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b},
                        [](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* g = grad_sink(ins[0])) {
                            for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * ins[1]->data[i];
                          }
                          if (auto* g = grad_sink(ins[1])) {
                            for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * ins[0]->data[i];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a},
                        [factor](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* g = grad_sink(ins[0])) {
                            for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * factor;
                          }
                        });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  const bool trailing = bias.rank() <= a.rank() &&
                        std::equal(bias.shape().begin(), bias.shape().end(), a.shape().end() - static_cast<std::ptrdiff_t>(bias.rank()));
  require(trailing, "add_bias",
          "bias " + to_string(bias.shape()) + " does not match trailing axes of " + to_string(a.shape()));
  const std::size_t c = bias.numel();
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + bias.data()[i % c];
  return make_result<T>("add_bias", a.shape(), std::move(out), {a, bias},
                        [c](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* g = grad_sink(ins[0])) {
                            for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
                          }
                          if (auto* g = grad_sink(ins[1])) {
                            for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i % c] += o.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

namespace {

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul",
          "cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(m * n, T(0));
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b},
                        [m, k, n](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* ga = grad_sink(ins[0])) gemm_nt(o.grad.data(), ins[1]->data.data(), ga->data(), m, n, k);
                          if (auto* gb = grad_sink(ins[1])) gemm_tn(ins[0]->data.data(), o.grad.data(), gb->data(), m, k, n);
                        });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  require(ok, "bmm", "cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()) +
                         (transpose_b ? " (transposed)" : ""));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  Buffer<T> out(batch * m * n, T(0));
  for (std::size_t s = 0; s < batch; ++s) {
    const T* ap = a.data().data() + s * m * k;
    const T* bp = b.data().data() + s * k * n;
    T* cp = out.data() + s * m * n;
    if (transpose_b) gemm_nt(ap, bp, cp, m, k, n);
    else gemm_nn(ap, bp, cp, m, k, n);
  }
  return make_result<T>(
      "bmm", {batch, m, n}, std::move(out), {a, b},
      [batch, m, k, n, transpose_b](const TensorImpl<T>& o, const auto& ins) {
        auto* ga = grad_sink(ins[0]);
        auto* gb = grad_sink(ins[1]);
        for (std::size_t s = 0; s < batch; ++s) {
          const T* g = o.grad.data() + s * m * n;
          const T* ap = ins[0]->data.data() + s * m * k;
          const T* bp = ins[1]->data.data() + s * k * n;
          if (ga) {
            T* gap = ga->data() + s * m * k;
            if (transpose_b) gemm_nn(g, bp, gap, m, n, k);  // b is [n,k]
            else gemm_nt(g, bp, gap, m, n, k);
          }
          if (gb) {
            T* gbp = gb->data() + s * k * n;
            if (transpose_b) gemm_tn(g, ap, gbp, m, n, k);  // [n,k] += g^T a
            else gemm_tn(ap, g, gbp, m, k, n);
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  require(weight.rank() == 2 && x.shape().back() == weight.dim(0), "linear",
          "input " + to_string(x.shape()) + " incompatible with weight " + to_string(weight.shape()));
  const std::size_t in = weight.dim(0), outc = weight.dim(1), rows = x.numel() / in;
  if (bias) {
    require(bias->rank() == 1 && bias->dim(0) == outc, "linear",
            "bias " + to_string(bias->shape()) + " does not match weight " + to_string(weight.shape()));
  }
  Shape shape = x.shape();
  shape.back() = outc;
  Buffer<T> out(rows * outc, T(0));
  if (bias) {
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias->data().begin(), bias->data().end(), out.begin() + r * outc);
  }
  gemm_nn(x.data().data(), weight.data().data(), out.data(), rows, in, outc);
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<T>("linear", std::move(shape), std::move(out), inputs,
                        [rows, in, outc](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* gx = grad_sink(ins[0])) gemm_nt(o.grad.data(), ins[1]->data.data(), gx->data(), rows, outc, in);
                          if (auto* gw = grad_sink(ins[1])) gemm_tn(ins[0]->data.data(), o.grad.data(), gw->data(), rows, in, outc);
                          if (ins.size() > 2) {
                            if (auto* gb = grad_sink(ins[2])) {
                              for (std::size_t r = 0; r < rows; ++r) {
                                for (std::size_t j = 0; j < outc; ++j) (*gb)[j] += o.grad[r * outc + j];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  require(numel(shape) == x.numel(), "reshape", "cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  for (std::size_t e : shape) require(e > 0, "reshape", "zero extent in " + to_string(shape));
  Buffer<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", shape, std::move(out), {x}, [](const TensorImpl<T>& o, const auto& ins) {
    if (auto* g = grad_sink(ins[0])) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  std::vector<bool> seen(rank, false);
  bool valid = order.size() == rank;
  for (std::size_t a : order) {
    valid = valid && a < rank && !seen[a];
    if (a < rank) seen[a] = true;
  }
  require(valid, "permute", "invalid axis order for shape " + to_string(x.shape()));
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) shape[i] = x.dim(order[i]);
  const auto in_strides = strides(x.shape());
  // source offset for every destination element, walked with an odometer
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    src[flat] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      const std::size_t s = in_strides[order[ax]];
      if (++idx[ax] < shape[ax]) {
        offset += s;
        break;
      }
      offset -= s * (shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  Buffer<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x.data()[src[i]];
  return make_result<T>("permute", std::move(shape), std::move(out), {x},
                        [src = std::move(src)](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* g = grad_sink(ins[0])) {
                            for (std::size_t i = 0; i < src.size(); ++i) (*g)[src[i]] += o.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> pad(const Tensor<T>& x, const std::vector<std::pair<std::size_t, std::size_t>>& pads) {
  require(pads.size() == x.rank(), "pad", "need one (before, after) pair per axis of " + to_string(x.shape()));
  Shape shape = x.shape();
  for (std::size_t i = 0; i < shape.size(); ++i) shape[i] += pads[i].first + pads[i].second;
  const auto out_strides = strides(shape);
  std::vector<std::size_t> dst(x.numel());
  std::vector<std::size_t> idx(x.rank(), 0);
  for (std::size_t flat = 0; flat < dst.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t ax = 0; ax < idx.size(); ++ax) off += (idx[ax] + pads[ax].first) * out_strides[ax];
    dst[flat] = off;
    for (std::size_t ax = idx.size(); ax-- > 0;) {
      if (++idx[ax] < x.dim(ax)) break;
      idx[ax] = 0;
    }
  }
  Buffer<T> out(numel(shape), T(0));
  for (std::size_t i = 0; i < dst.size(); ++i) out[dst[i]] = x.data()[i];
  return make_result<T>("pad", std::move(shape), std::move(out), {x},
                        [dst = std::move(dst)](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* g = grad_sink(ins[0])) {
                            for (std::size_t i = 0; i < dst.size(); ++i) (*g)[i] += o.grad[dst[i]];
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  require(axis < x.rank() && length > 0 && start + length <= x.dim(axis), "slice",
          "range [" + std::to_string(start) + ", +" + std::to_string(length) + ") on axis " + std::to_string(axis) +
              " out of bounds for " + to_string(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  Buffer<T> out(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const T* src = x.data().data() + (o * s.extent + start) * s.inner;
    std::copy(src, src + length * s.inner, out.begin() + o * length * s.inner);
  }
  return make_result<T>("slice", std::move(shape), std::move(out), {x},
                        [s, start, length](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* g = grad_sink(ins[0])) {
                            for (std::size_t q = 0; q < s.outer; ++q) {
                              T* dst = g->data() + (q * s.extent + start) * s.inner;
                              const T* src = o.grad.data() + q * length * s.inner;
                              for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  require(!xs.empty(), "concat", "no inputs");
  const Shape& first = xs.front().shape();
  require(axis < first.size(), "concat", "axis out of range for " + to_string(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = first;
    require(a.size() == b.size(), "concat", "rank mismatch " + to_string(a) + " vs " + to_string(b));
    shape[axis] += a[axis];
    a[axis] = b[axis] = 0;
    require(a == b, "concat", "shape mismatch " + to_string(x.shape()) + " vs " + to_string(first));
  }
  const AxisSplit s = split_at(shape, axis);
  std::vector<std::size_t> offsets;
  Buffer<T> out(numel(shape));
  std::size_t offset = 0;
  for (const auto& x : xs) {
    offsets.push_back(offset);
    const std::size_t ext = x.dim(axis);
    for (std::size_t q = 0; q < s.outer; ++q) {
      const T* src = x.data().data() + q * ext * s.inner;
      std::copy(src, src + ext * s.inner, out.begin() + (q * s.extent + offset) * s.inner);
    }
    offset += ext;
  }
  return make_result<T>("concat", std::move(shape), std::move(out), xs,
                        [s, offsets](const TensorImpl<T>& o, const auto& ins) {
                          for (std::size_t k = 0; k < ins.size(); ++k) {
                            auto* g = grad_sink(ins[k]);
                            if (!g) continue;
                            const std::size_t ext = g->size() / (s.outer * s.inner);
                            for (std::size_t q = 0; q < s.outer; ++q) {
                              const T* src = o.grad.data() + (q * s.extent + offsets[k]) * s.inner;
                              T* dst = g->data() + q * ext * s.inner;
                              for (std::size_t i = 0; i < ext * s.inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return make_result<T>("sum", {1}, Buffer<T>{acc}, {x}, [](const TensorImpl<T>& o, const auto& ins) {
    if (auto* g = grad_sink(ins[0])) {
      for (auto& v : *g) v += o.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), "sum", "axis out of range for " + to_string(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  Buffer<T> out(s.outer * s.inner, T(0));
  for (std::size_t q = 0; q < s.outer; ++q) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      const T* src = x.data().data() + (q * s.extent + e) * s.inner;
      T* dst = out.data() + q * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return make_result<T>("sum_axis", std::move(shape), std::move(out), {x}, [s](const TensorImpl<T>& o, const auto& ins) {
    if (auto* g = grad_sink(ins[0])) {
      for (std::size_t q = 0; q < s.outer; ++q) {
        for (std::size_t e = 0; e < s.extent; ++e) {
          T* dst = g->data() + (q * s.extent + e) * s.inner;
          const T* src = o.grad.data() + q * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), "mean", "axis out of range for " + to_string(x.shape()));
  return scale(sum(x, axis), T(1) / static_cast<T>(x.dim(axis)));
}

template <typename T>
Tensor<T> max(const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), "max", "axis out of range for " + to_string(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  Buffer<T> out(s.outer * s.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t q = 0; q < s.outer; ++q) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (q * s.extent) * s.inner + i;
      for (std::size_t e = 1; e < s.extent; ++e) {
        const std::size_t at = (q * s.extent + e) * s.inner + i;
        if (x.data()[at] > x.data()[best]) best = at;
      }
      out[q * s.inner + i] = x.data()[best];
      arg[q * s.inner + i] = best;
    }
  }
  return make_result<T>("max_axis", std::move(shape), std::move(out), {x},
                        [arg = std::move(arg)](const TensorImpl<T>& o, const auto& ins) {
                          if (auto* g = grad_sink(ins[0])) {
                            for (std::size_t i = 0; i < arg.size(); ++i) (*g)[arg[i]] += o.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  Buffer<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * c;
    T* y = out.data() + r * c;
    T m = in[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, in[j]);
    T z = T(0);
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [rows, c](const TensorImpl<T>& o, const auto& ins) {
    if (auto* g = grad_sink(ins[0])) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = o.data.data() + r * c;
        const T* gy = o.grad.data() + r * c;
        T dot = T(0);
        for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += y[j] * (gy[j] - dot);
      }
    }
  });
}

namespace {

// Shared normalization kernel: `members(group)` enumerates flat offsets of a
// group; each group is normalized to zero mean / unit variance and then
// scaled per channel.
struct NormLayout {
  std::size_t rows;       // leading positions
  std::size_t channels;   // last extent
  std::size_t groups;     // per row (layer norm: 1 group per row)
  bool per_row;           // layer norm: statistics per row; group norm: across rows
};

template <typename T>
Tensor<T> normalize(const char* op, const Tensor<T>& x, NormLayout layout, const Tensor<T>* gamma,
                    const Tensor<T>* beta, T eps) {
  const std::size_t c = layout.channels, cg = c / layout.groups;
  const std::size_t nstats = layout.per_row ? layout.rows : layout.groups;
  const std::size_t count = layout.per_row ? c : layout.rows * cg;
  std::vector<T> mean(nstats, T(0)), rstd(nstats, T(0));
  auto stat_of = [&](std::size_t r, std::size_t ch) { return layout.per_row ? r : ch / cg; };

  const auto xs = x.data();
  for (std::size_t r = 0; r < layout.rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) mean[stat_of(r, ch)] += xs[r * c + ch];
  }
  for (auto& m : mean) m /= static_cast<T>(count);
  std::vector<T> var(nstats, T(0));
  for (std::size_t r = 0; r < layout.rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T d = xs[r * c + ch] - mean[stat_of(r, ch)];
      var[stat_of(r, ch)] += d * d;
    }
  }
  for (std::size_t s = 0; s < nstats; ++s) rstd[s] = T(1) / std::sqrt(var[s] / static_cast<T>(count) + eps);

  Buffer<T> xhat(x.numel());
  Buffer<T> out(x.numel());
  for (std::size_t r = 0; r < layout.rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch, s = stat_of(r, ch);
      xhat[i] = (xs[i] - mean[s]) * rstd[s];
      out[i] = gamma ? xhat[i] * gamma->data()[ch] + beta->data()[ch] : xhat[i];
    }
  }
  std::vector<Tensor<T>> inputs{x};
  if (gamma) {
    inputs.push_back(*gamma);
    inputs.push_back(*beta);
  }
  return make_result<T>(
      op, x.shape(), std::move(out), inputs,
      [layout, cg, nstats, count, rstd = std::move(rstd), xhat = std::move(xhat)](const TensorImpl<T>& o,
                                                                                    const auto& ins) {
        const std::size_t c = layout.channels;
        const bool affine = ins.size() > 1;
        auto stat_of = [&](std::size_t r, std::size_t ch) { return layout.per_row ? r : ch / cg; };
        if (affine) {
          auto* gg = grad_sink(ins[1]);
          auto* gb = grad_sink(ins[2]);
          for (std::size_t r = 0; r < layout.rows; ++r) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t i = r * c + ch;
              if (gg) (*gg)[ch] += o.grad[i] * xhat[i];
              if (gb) (*gb)[ch] += o.grad[i];
            }
          }
        }
        auto* gx = grad_sink(ins[0]);
        if (!gx) return;
        std::vector<T> dxhat(o.grad.size());
        for (std::size_t i = 0; i < dxhat.size(); ++i) {
          dxhat[i] = affine ? o.grad[i] * ins[1]->data[i % c] : o.grad[i];
        }
        std::vector<T> m1(nstats, T(0)), m2(nstats, T(0));
        for (std::size_t r = 0; r < layout.rows; ++r) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t i = r * c + ch, s = stat_of(r, ch);
            m1[s] += dxhat[i];
            m2[s] += dxhat[i] * xhat[i];
          }
        }
        for (std::size_t s = 0; s < nstats; ++s) {
          m1[s] /= static_cast<T>(count);
          m2[s] /= static_cast<T>(count);
        }
        for (std::size_t r = 0; r < layout.rows; ++r) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t i = r * c + ch, s = stat_of(r, ch);
            (*gx)[i] += rstd[s] * (dxhat[i] - m1[s] - xhat[i] * m2[s]);
          }
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t c = x.shape().back();
  require(gamma.numel() == c && beta.numel() == c, "layer_norm",
          "affine " + to_string(gamma.shape()) + " does not match " + to_string(x.shape()));
  return normalize<T>("layer_norm", x, {x.numel() / c, c, 1, true}, &gamma, &beta, eps);
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>* gamma, const Tensor<T>* beta, T eps) {
  const std::size_t c = x.shape().back();
  require(groups > 0 && c % groups == 0, "group_norm",
          std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " groups");
  require((gamma == nullptr) == (beta == nullptr), "group_norm", "gamma and beta must both be given or both omitted");
  if (gamma) {
    require(gamma->numel() == c && beta->numel() == c, "group_norm",
            "affine " + to_string(gamma->shape()) + " does not match " + to_string(x.shape()));
  }
  return normalize<T>("group_norm", x, {x.numel() / c, c, groups, false}, gamma, beta, eps);
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index, const Shape& shape) {
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  require(!shape.empty() && shape.back() == c && numel(shape) == index.size() * c, "gather_rows",
          "output " + to_string(shape) + " inconsistent with " + std::to_string(index.size()) + " rows of " +
              to_string(x.shape()));
  Buffer<T> out(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < rows, "gather_rows", "row " + std::to_string(index[i]) + " out of range for " + to_string(x.shape()));
    std::copy_n(x.data().data() + index[i] * c, c, out.data() + i * c);
  }
  return make_result<T>("gather_rows", shape, std::move(out), {x},
                        [idx = std::vector<std::size_t>(index.begin(), index.end()), c](const TensorImpl<T>& o,
                                                                                         const auto& ins) {
                          if (auto* g = grad_sink(ins[0])) {
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                              T* dst = g->data() + idx[i] * c;
                              const T* src = o.grad.data() + i * c;
                              for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  Buffer<T> out(x.numel());
  std::vector<T> denom(rows);
  std::vector<bool> clamped(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * c;
    T ss = T(0);
    for (std::size_t j = 0; j < c; ++j) ss += in[j] * in[j];
    const T norm = std::sqrt(ss);
    clamped[r] = norm <= eps;
    denom[r] = clamped[r] ? eps : norm;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = in[j] / denom[r];
  }
  return make_result<T>("l2_normalize", x.shape(), std::move(out), {x},
                        [c, rows, denom = std::move(denom), clamped = std::move(clamped)](const TensorImpl<T>& o,
                                                                                         const auto& ins) {
                          auto* g = grad_sink(ins[0]);
                          if (!g) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* y = o.data.data() + r * c;
                            const T* gy = o.grad.data() + r * c;
                            T dot = T(0);
                            if (!clamped[r]) {
                              for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
                            }
                            for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += (gy[j] - y[j] * dot) / denom[r];
                          }
                        });
}

template <typename T>
Tensor<T> row_norm(const Tensor<T>& x) {
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Buffer<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = T(0);
    for (std::size_t j = 0; j < c; ++j) ss += x.data()[r * c + j] * x.data()[r * c + j];
    out[r] = std::sqrt(ss);
  }
  return make_result<T>("row_norm", std::move(shape), std::move(out), {x}, [c, rows](const TensorImpl<T>& o, const auto& ins) {
    auto* g = grad_sink(ins[0]);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      if (o.data[r] == T(0)) continue;
      for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += o.grad[r] * ins[0]->data[r * c + j] / o.data[r];
    }
  });
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

// Half-pixel-centre source taps for a 1D resize.
std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
    const std::size_t lo = std::min(static_cast<std::size_t>(src), in - 1);
    const std::size_t hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    taps[o] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  require(x.rank() >= 2 && out_h > 0 && out_w > 0, "resize_bilinear",
          "need at least two leading axes and positive targets, got " + to_string(x.shape()));
  const std::size_t in_h = x.dim(0), in_w = x.dim(1), inner = x.numel() / (in_h * in_w);
  const auto th = bilinear_taps(in_h, out_h), tw = bilinear_taps(in_w, out_w);
  Shape shape = x.shape();
  shape[0] = out_h;
  shape[1] = out_w;
  Buffer<T> out(out_h * out_w * inner, T(0));
  const T* xs = x.data().data();
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      T* dst = out.data() + (oy * out_w + ox) * inner;
      const std::size_t ys[2] = {th[oy].lo, th[oy].hi};
      const std::size_t xs_[2] = {tw[ox].lo, tw[ox].hi};
      const T wy[2] = {T(th[oy].w_lo), T(th[oy].w_hi)};
      const T wx[2] = {T(tw[ox].w_lo), T(tw[ox].w_hi)};
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          const T w = wy[a] * wx[b];
          const T* src = xs + (ys[a] * in_w + xs_[b]) * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
        }
      }
    }
  }
  return make_result<T>("resize_bilinear", std::move(shape), std::move(out), {x},
                        [th, tw, in_w, out_h, out_w, inner](const TensorImpl<T>& o, const auto& ins) {
                          auto* g = grad_sink(ins[0]);
                          if (!g) return;
                          for (std::size_t oy = 0; oy < out_h; ++oy) {
                            for (std::size_t ox = 0; ox < out_w; ++ox) {
                              const T* src = o.grad.data() + (oy * out_w + ox) * inner;
                              const std::size_t ys[2] = {th[oy].lo, th[oy].hi};
                              const std::size_t xs_[2] = {tw[ox].lo, tw[ox].hi};
                              const T wy[2] = {T(th[oy].w_lo), T(th[oy].w_hi)};
                              const T wx[2] = {T(tw[ox].w_lo), T(tw[ox].w_hi)};
                              for (int a = 0; a < 2; ++a) {
                                for (int b = 0; b < 2; ++b) {
                                  const T w = wy[a] * wx[b];
                                  T* dst = g->data() + (ys[a] * in_w + xs_[b]) * inner;
                                  for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
                                }
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(), "softmax_cross_entropy",
          "logits " + to_string(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<T> prob(n * k);
  T loss = T(0);
  for (std::size_t r = 0; r < n; ++r) {
    require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < k, "softmax_cross_entropy",
            "label " + std::to_string(labels[r]) + " out of range");
    const T* in = logits.data().data() + r * k;
    T m = in[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, in[j]);
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) z += std::exp(in[j] - m);
    for (std::size_t j = 0; j < k; ++j) prob[r * k + j] = std::exp(in[j] - m) / z;
    loss += std::log(z) + m - in[labels[r]];
  }
  loss /= static_cast<T>(n);
  return make_result<T>("softmax_cross_entropy", {1}, Buffer<T>{loss}, {logits},
                        [n, k, prob = std::move(prob), lab = std::vector<int>(labels.begin(), labels.end())](
                            const TensorImpl<T>& o, const auto& ins) {
                          auto* g = grad_sink(ins[0]);
                          if (!g) return;
                          const T s = o.grad[0] / static_cast<T>(n);
                          for (std::size_t r = 0; r < n; ++r) {
                            for (std::size_t j = 0; j < k; ++j) {
                              const T target = static_cast<int>(j) == lab[r] ? T(1) : T(0);
                              (*g)[r * k + j] += s * (prob[r * k + j] - target);
                            }
                          }
                        });
}

#define VAT_OPS_INSTANTIATE(T)                                                                          \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                     \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                         \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                      \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                         \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> bmm<T>(const Tensor<T>&, const Tensor<T>&, bool);                                  \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                   \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                        \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);                     \
  template Tensor<T> pad<T>(const Tensor<T>&, const std::vector<std::pair<std::size_t, std::size_t>>&); \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                 \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                             \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                          \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                         \
  template Tensor<T> sum<T>(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> mean<T>(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> max<T>(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                      \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);            \
  template Tensor<T> group_norm<T>(const Tensor<T>&, std::size_t, const Tensor<T>*, const Tensor<T>*, T); \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const std::size_t>, const Shape&);      \
  template Tensor<T> l2_normalize<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> row_norm<T>(const Tensor<T>&);                                                     \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&, std::span<const int>);

VAT_OPS_INSTANTIATE(float)
VAT_OPS_INSTANTIATE(double)

}  // namespace vat::ops
