#include "vat/vem.hpp"

#include <cmath>
#include <limits>

#include "vat/ops.hpp"

namespace vat {

std::string to_string(const Extents4& e) {
  return to_string(Shape(e.begin(), e.end()));
}

template <typename T>
Conv4dKernel<T> Conv4dKernel<T>::make(std::size_t k, std::size_t in, std::size_t out, Rng& rng) {
  if (k % 2 == 0) throw ConfigError("conv4d kernel size must be odd, got " + std::to_string(k));
  Conv4dKernel<T> kernel;
  const double fan_in = static_cast<double>(k * k * k * k * in);
  kernel.weight = uniform_param<T>({k, k, k, k, in, out}, 1.0 / std::sqrt(fan_in), rng);
  kernel.bias = constant_param<T>({out}, T(0));
  const std::size_t p = k / 2;
  kernel.padding = {p, p, p, p};
  return kernel;
}

Extents4 conv4d_extents(const Extents4& in, std::size_t k, const Extents4& stride, const Extents4& padding) {
  Extents4 out{};
  for (int a = 0; a < 4; ++a) {
    if (stride[a] == 0 || in[a] + 2 * padding[a] < k) {
      throw ShapeError("conv4d: axis " + std::to_string(a) + " extent " + std::to_string(in[a]) + " with padding " +
                       std::to_string(padding[a]) + " cannot fit window " + std::to_string(k) +
                       " (non-positive output extent)");
    }
    out[a] = (in[a] + 2 * padding[a] - k) / stride[a] + 1;
  }
  return out;
}

namespace {

Extents4 spatial_of(const Shape& s) { return {s[0], s[1], s[2], s[3]}; }

std::size_t flat4(const Extents4& e, std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) {
  return ((i0 * e[1] + i1) * e[2] + i2) * e[3] + i3;
}

// Calls fn(out_pos, in_pos, tap) for every in-bounds (output, tap) pair, in a
// fixed order.
template <typename F>
void for_each_tap(const Extents4& in, const Extents4& out, std::size_t k, const Extents4& stride,
                  const Extents4& padding, F&& fn) {
  const std::ptrdiff_t kk = static_cast<std::ptrdiff_t>(k);
  auto start = [&](int a, std::size_t o) {
    return static_cast<std::ptrdiff_t>(o * stride[a]) - static_cast<std::ptrdiff_t>(padding[a]);
  };
  auto inside = [&](int a, std::ptrdiff_t i) { return i >= 0 && i < static_cast<std::ptrdiff_t>(in[a]); };
  std::size_t opos = 0;
  for (std::size_t o0 = 0; o0 < out[0]; ++o0)
    for (std::size_t o1 = 0; o1 < out[1]; ++o1)
      for (std::size_t o2 = 0; o2 < out[2]; ++o2)
        for (std::size_t o3 = 0; o3 < out[3]; ++o3, ++opos) {
          const std::ptrdiff_t b0 = start(0, o0), b1 = start(1, o1), b2 = start(2, o2), b3 = start(3, o3);
          for (std::ptrdiff_t t0 = 0; t0 < kk; ++t0) {
            if (!inside(0, b0 + t0)) continue;
            for (std::ptrdiff_t t1 = 0; t1 < kk; ++t1) {
              if (!inside(1, b1 + t1)) continue;
              for (std::ptrdiff_t t2 = 0; t2 < kk; ++t2) {
                if (!inside(2, b2 + t2)) continue;
                for (std::ptrdiff_t t3 = 0; t3 < kk; ++t3) {
                  if (!inside(3, b3 + t3)) continue;
                  const std::size_t ipos = flat4(in, b0 + t0, b1 + t1, b2 + t2, b3 + t3);
                  const std::size_t tap = static_cast<std::size_t>(((t0 * kk + t1) * kk + t2) * kk + t3);
                  fn(opos, ipos, tap);
                }
              }
            }
          }
        }
}

}  // namespace

template <typename T>
Tensor<T> conv4d(const Tensor<T>& x, const Conv4dKernel<T>& kernel) {
  const auto& w = kernel.weight;
  if (x.rank() != 5 || w.rank() != 6 || x.dim(4) != w.dim(4) || kernel.bias.numel() != w.dim(5)) {
    throw ShapeError("conv4d: input " + to_string(x.shape()) + " incompatible with kernel " + to_string(w.shape()));
  }
  const std::size_t k = w.dim(0), cin = w.dim(4), cout = w.dim(5);
  const Extents4 in = spatial_of(x.shape());
  const Extents4 out = conv4d_extents(in, k, kernel.stride, kernel.padding);
  const std::size_t npos = out[0] * out[1] * out[2] * out[3];
  Buffer<T> result(npos * cout);
  for (std::size_t p = 0; p < npos; ++p) {
    std::copy(kernel.bias.data().begin(), kernel.bias.data().end(), result.begin() + static_cast<std::ptrdiff_t>(p * cout));
  }
  const T* xs = x.data().data();
  const T* ws = w.data().data();
  for_each_tap(in, out, k, kernel.stride, kernel.padding, [&](std::size_t opos, std::size_t ipos, std::size_t tap) {
    T* acc = result.data() + opos * cout;
    const T* xi = xs + ipos * cin;
    const T* wt = ws + tap * cin * cout;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T xv = xi[ci];
      const T* wr = wt + ci * cout;
      for (std::size_t co = 0; co < cout; ++co) acc[co] += xv * wr[co];
    }
  });
  const Extents4 stride = kernel.stride, padding = kernel.padding;
  return detail::make_result<T>(
      "conv4d", {out[0], out[1], out[2], out[3], cout}, std::move(result), {x, kernel.weight, kernel.bias},
      [in, out, k, cin, cout, stride, padding, npos](const TensorImpl<T>& o, const auto& ins) {
        auto* gx = detail::grad_sink(ins[0]);
        auto* gw = detail::grad_sink(ins[1]);
        auto* gb = detail::grad_sink(ins[2]);
        const T* xs = ins[0]->data.data();
        const T* ws = ins[1]->data.data();
        const T* g = o.grad.data();
        if (gb) {
          for (std::size_t p = 0; p < npos; ++p) {
            for (std::size_t co = 0; co < cout; ++co) (*gb)[co] += g[p * cout + co];
          }
        }
        if (!gx && !gw) return;
        for_each_tap(in, out, k, stride, padding, [&](std::size_t opos, std::size_t ipos, std::size_t tap) {
          const T* go = g + opos * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const std::size_t wrow = (tap * cin + ci) * cout;
            if (gx) {
              const T* wr = ws + wrow;
              T acc = T(0);
              for (std::size_t co = 0; co < cout; ++co) acc += go[co] * wr[co];
              (*gx)[ipos * cin + ci] += acc;
            }
            if (gw) {
              const T xv = xs[ipos * cin + ci];
              T* gwr = gw->data() + wrow;
              for (std::size_t co = 0; co < cout; ++co) gwr[co] += xv * go[co];
            }
          }
        });
      });
}

template <typename T>
Tensor<T> maxpool4d(const Tensor<T>& x, const Extents4& window, const Extents4& stride) {
  if (x.rank() != 5) throw ShapeError("maxpool4d: input must be [a, b, c, d, C], got " + to_string(x.shape()));
  const Extents4 in = spatial_of(x.shape());
  Extents4 out{};
  for (int a = 0; a < 4; ++a) {
    if (window[a] == 0 || stride[a] == 0 || window[a] > in[a]) {
      throw ShapeError("maxpool4d: window " + to_string(window) + " larger than extent " + to_string(in) +
                       " on axis " + std::to_string(a));
    }
    out[a] = (in[a] - window[a]) / stride[a] + 1;
  }
  const std::size_t c = x.dim(4), npos = out[0] * out[1] * out[2] * out[3];
  Buffer<T> result(npos * c);
  std::vector<std::size_t> arg(npos * c);
  const T* xs = x.data().data();
  std::size_t opos = 0;
  for (std::size_t o0 = 0; o0 < out[0]; ++o0)
    for (std::size_t o1 = 0; o1 < out[1]; ++o1)
      for (std::size_t o2 = 0; o2 < out[2]; ++o2)
        for (std::size_t o3 = 0; o3 < out[3]; ++o3, ++opos) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_at = 0;
            for (std::size_t t0 = 0; t0 < window[0]; ++t0)
              for (std::size_t t1 = 0; t1 < window[1]; ++t1)
                for (std::size_t t2 = 0; t2 < window[2]; ++t2)
                  for (std::size_t t3 = 0; t3 < window[3]; ++t3) {
                    const std::size_t at =
                        flat4(in, o0 * stride[0] + t0, o1 * stride[1] + t1, o2 * stride[2] + t2, o3 * stride[3] + t3) * c + ch;
                    if (xs[at] > best) {
                      best = xs[at];
                      best_at = at;
                    }
                  }
            result[opos * c + ch] = best;
            arg[opos * c + ch] = best_at;
          }
        }
  return detail::make_result<T>("maxpool4d", {out[0], out[1], out[2], out[3], c}, std::move(result), {x},
                                [arg = std::move(arg)](const TensorImpl<T>& o, const auto& ins) {
                                  if (auto* g = detail::grad_sink(ins[0])) {
                                    for (std::size_t i = 0; i < arg.size(); ++i) (*g)[arg[i]] += o.grad[i];
                                  }
                                });
}

template <typename T>
Extents4 Vem<T>::pool_window(const Config& config) {
  Extents4 window{};
  for (int a = 0; a < 4; ++a) {
    if (config.target[a] == 0 || config.input[a] % config.target[a] != 0) {
      throw ConfigError("VEM: input extents " + to_string(config.input) + " cannot be pooled to target " +
                        to_string(config.target) + " (axis " + std::to_string(a) + ")");
    }
    window[a] = config.input[a] / config.target[a];
  }
  return window;
}

template <typename T>
void Vem<T>::check(const Config& config) {
  pool_window(config);
  if (config.blocks == 0) throw ConfigError("VEM needs at least one conv block");
  if (config.in_channels == 0 || config.dim == 0) throw ConfigError("VEM channel counts must be positive");
  if (config.kernel % 2 == 0) throw ConfigError("VEM kernel size must be odd");
  if (config.normalize && (config.groups == 0 || config.dim % config.groups != 0)) {
    throw ConfigError("VEM: dim " + std::to_string(config.dim) + " not divisible into " +
                      std::to_string(config.groups) + " groups");
  }
}

template <typename T>
Vem<T>::Vem(const Config& config, Rng& rng) : config_(config) {
  check(config_);
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    convs_.push_back(Conv4dKernel<T>::make(config_.kernel, b == 0 ? config_.in_channels : config_.dim, config_.dim, rng));
    gamma_.push_back(constant_param<T>({config_.dim}, T(1)));
    beta_.push_back(constant_param<T>({config_.dim}, T(0)));
  }
}

template <typename T>
Tensor<T> Vem<T>::forward(const Tensor<T>& hypercorrelation) const {
  const Shape expected{config_.input[0], config_.input[1], config_.input[2], config_.input[3], config_.in_channels};
  if (hypercorrelation.shape() != expected) {
    throw ShapeError("VEM: expected hypercorrelation " + to_string(expected) + ", got " +
                     to_string(hypercorrelation.shape()));
  }
  const Extents4 window = pool_window(config_);
  Tensor<T> x = window == Extents4{1, 1, 1, 1} ? hypercorrelation : maxpool4d(hypercorrelation, window, window);
  for (std::size_t b = 0; b < convs_.size(); ++b) {
    x = ops::relu(conv4d(x, convs_[b]));
    if (config_.normalize) x = ops::group_norm(x, config_.groups, &gamma_[b], &beta_[b]);
  }
  return x;
}

template <typename T>
void Vem<T>::collect(ParamSet<T>& params, const std::string& prefix) const {
  for (std::size_t b = 0; b < convs_.size(); ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    params.add(p + ".conv.weight", convs_[b].weight);
    params.add(p + ".conv.bias", convs_[b].bias);
    if (config_.normalize) {
      params.add(p + ".norm.gamma", gamma_[b]);
      params.add(p + ".norm.beta", beta_[b]);
    }
  }
}

#define VAT_VEM_INSTANTIATE(T)                                                             \
  template struct Conv4dKernel<T>;                                                         \
  template Tensor<T> conv4d<T>(const Tensor<T>&, const Conv4dKernel<T>&);                  \
  template Tensor<T> maxpool4d<T>(const Tensor<T>&, const Extents4&, const Extents4&);     \
  template class Vem<T>;

VAT_VEM_INSTANTIATE(float)
VAT_VEM_INSTANTIATE(double)

}  // namespace vat
