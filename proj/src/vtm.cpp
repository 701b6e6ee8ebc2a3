#include "vat/vtm.hpp"

#include <cmath>

#include "vat/ops.hpp"

namespace vat {

WindowLayout::WindowLayout(std::vector<std::size_t> extents, std::size_t window)
    : extents_(std::move(extents)), window_(window) {
  if (extents_.empty()) throw ConfigError("window layout needs at least one spatial axis");
  if (window_ == 0) throw ConfigError("window size must be positive");
  for (std::size_t a = 0; a < extents_.size(); ++a) {
    if (extents_[a] % window_ != 0) {
      throw ConfigError("window size " + std::to_string(window_) + " does not divide extent " +
                        std::to_string(extents_[a]) + " of grid " + to_string(Shape(extents_)));
    }
  }
}

std::size_t WindowLayout::num_windows() const {
  std::size_t n = 1;
  for (std::size_t e : extents_) n *= e / window_;
  return n;
}

std::size_t WindowLayout::tokens_per_window() const {
  std::size_t n = 1;
  for (std::size_t a = 0; a < extents_.size(); ++a) n *= window_;
  return n;
}

std::size_t WindowLayout::num_tokens() const { return numel(Shape(extents_)); }

std::vector<std::size_t> WindowLayout::partition_index(std::size_t shift) const {
  const std::size_t r = rank(), tokens = tokens_per_window(), windows = num_windows();
  std::vector<std::size_t> grid_windows(r);
  for (std::size_t a = 0; a < r; ++a) grid_windows[a] = extents_[a] / window_;
  std::vector<std::size_t> index(windows * tokens);
  std::vector<std::size_t> w(r), t(r);
  for (std::size_t wi = 0; wi < windows; ++wi) {
    std::size_t rem = wi;
    for (std::size_t a = r; a-- > 0;) {
      w[a] = rem % grid_windows[a];
      rem /= grid_windows[a];
    }
    for (std::size_t ti = 0; ti < tokens; ++ti) {
      std::size_t trem = ti;
      for (std::size_t a = r; a-- > 0;) {
        t[a] = trem % window_;
        trem /= window_;
      }
      std::size_t flat = 0;
      for (std::size_t a = 0; a < r; ++a) {
        flat = flat * extents_[a] + (w[a] * window_ + t[a] + shift) % extents_[a];
      }
      index[wi * tokens + ti] = flat;
    }
  }
  return index;
}

std::vector<std::size_t> WindowLayout::merge_index(std::size_t shift) const {
  const auto forward = partition_index(shift);
  std::vector<std::size_t> inverse(forward.size());
  for (std::size_t r = 0; r < forward.size(); ++r) inverse[forward[r]] = r;
  return inverse;
}

namespace {

std::vector<std::size_t> spatial_extents(const Shape& shape) {
  return {shape.begin(), shape.end() - 1};
}

void check_grid(const char* op, const Shape& shape, const WindowLayout& layout) {
  if (shape.size() != layout.rank() + 1 || spatial_extents(shape) != layout.extents()) {
    throw ShapeError(std::string(op) + ": tensor " + to_string(shape) + " does not match window grid " +
                     to_string(Shape(layout.extents())));
  }
}

}  // namespace

template <typename T>
Tensor<T> partition_windows(const Tensor<T>& x, const WindowLayout& layout) {
  check_grid("partition_windows", x.shape(), layout);
  const auto index = layout.partition_index(0);
  return ops::gather_rows(x, std::span<const std::size_t>(index),
                          {layout.num_windows(), layout.tokens_per_window(), x.shape().back()});
}

template <typename T>
Tensor<T> merge_windows(const Tensor<T>& windows, const WindowLayout& layout) {
  if (windows.rank() != 3 || windows.dim(0) != layout.num_windows() || windows.dim(1) != layout.tokens_per_window()) {
    throw ShapeError("merge_windows: " + to_string(windows.shape()) + " is not a partition of grid " +
                     to_string(Shape(layout.extents())) + " with window " + std::to_string(layout.window()));
  }
  const auto index = layout.merge_index(0);
  Shape shape(layout.extents());
  shape.push_back(windows.dim(2));
  return ops::gather_rows(windows, std::span<const std::size_t>(index), shape);
}

template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, const std::vector<std::ptrdiff_t>& displacement) {
  const auto extents = spatial_extents(x.shape());
  if (displacement.size() != extents.size()) {
    throw ShapeError("cyclic_shift: " + std::to_string(displacement.size()) + " displacements for tensor " +
                     to_string(x.shape()));
  }
  const std::size_t positions = numel(Shape(extents));
  std::vector<std::size_t> index(positions);
  std::vector<std::size_t> coord(extents.size(), 0);
  for (std::size_t p = 0; p < positions; ++p) {
    std::size_t flat = 0;
    for (std::size_t a = 0; a < extents.size(); ++a) {
      const auto e = static_cast<std::ptrdiff_t>(extents[a]);
      const std::ptrdiff_t src = ((static_cast<std::ptrdiff_t>(coord[a]) + displacement[a]) % e + e) % e;
      flat = flat * extents[a] + static_cast<std::size_t>(src);
    }
    index[p] = flat;
    for (std::size_t a = extents.size(); a-- > 0;) {
      if (++coord[a] < extents[a]) break;
      coord[a] = 0;
    }
  }
  return ops::gather_rows(x, std::span<const std::size_t>(index), x.shape());
}

std::vector<std::size_t> relative_position_index(std::size_t window, std::size_t rank) {
  std::size_t tokens = 1;
  for (std::size_t a = 0; a < rank; ++a) tokens *= window;
  const std::size_t span = 2 * window - 1;
  auto coords = [&](std::size_t t) {
    std::vector<std::size_t> c(rank);
    for (std::size_t a = rank; a-- > 0;) {
      c[a] = t % window;
      t /= window;
    }
    return c;
  };
  std::vector<std::size_t> index(tokens * tokens);
  for (std::size_t i = 0; i < tokens; ++i) {
    const auto ci = coords(i);
    for (std::size_t j = 0; j < tokens; ++j) {
      const auto cj = coords(j);
      std::size_t flat = 0;
      for (std::size_t a = 0; a < rank; ++a) flat = flat * span + (ci[a] + window - 1 - cj[a]);
      index[i * tokens + j] = flat;
    }
  }
  return index;
}

template <typename T>
Tensor<T> window_attention(const Tensor<T>& windows, const AttentionParams<T>& params, Tensor<T>* weights) {
  if (windows.rank() != 3 || windows.dim(2) != params.qkv_weight.dim(0)) {
    throw ShapeError("window_attention: windows " + to_string(windows.shape()) + " do not match token dim of qkv " +
                     to_string(params.qkv_weight.shape()));
  }
  const std::size_t nw = windows.dim(0), tokens = windows.dim(1), dim = windows.dim(2), heads = params.heads;
  if (heads == 0 || dim % heads != 0) throw ConfigError("window_attention: dim not divisible by heads");
  if (params.bias_index.size() != tokens * tokens) {
    throw ShapeError("window_attention: bias index covers " + std::to_string(params.bias_index.size()) +
                     " pairs, window has " + std::to_string(tokens) + " tokens");
  }
  const std::size_t dh = dim / heads;

  auto qkv = ops::linear(windows, params.qkv_weight, &params.qkv_bias);
  qkv = ops::permute(ops::reshape(qkv, {nw, tokens, 3, heads, dh}), {2, 0, 3, 1, 4});
  auto part = [&](std::size_t i) { return ops::reshape(ops::slice(qkv, 0, i, 1), {nw * heads, tokens, dh}); };
  const auto q = part(0), k = part(1), v = part(2);

  auto logits = ops::scale(ops::bmm(q, k, /*transpose_b=*/true), T(1) / std::sqrt(static_cast<T>(dh)));
  auto bias = ops::gather_rows(params.bias_table, std::span<const std::size_t>(params.bias_index), {tokens, tokens, heads});
  bias = ops::permute(bias, {2, 0, 1});
  logits = ops::add_bias(ops::reshape(logits, {nw, heads, tokens, tokens}), bias);
  auto attn = ops::softmax(logits);
  if (weights) *weights = attn;

  auto out = ops::bmm(ops::reshape(attn, {nw * heads, tokens, tokens}), v);
  out = ops::reshape(ops::permute(ops::reshape(out, {nw, heads, tokens, dh}), {0, 2, 1, 3}), {nw, tokens, dim});
  return ops::linear(out, params.proj_weight, &params.proj_bias);
}

template <typename T>
void SwinBlock<T>::check(const Config& config) {
  WindowLayout layout(config.extents, config.window);
  if (config.heads == 0 || config.dim % config.heads != 0) {
    throw ConfigError("swin block: dim " + std::to_string(config.dim) + " not divisible by " +
                      std::to_string(config.heads) + " heads");
  }
  if (config.mlp_ratio == 0) throw ConfigError("swin block: mlp ratio must be positive");
}

template <typename T>
SwinBlock<T>::SwinBlock(const Config& config, Rng& rng)
    : config_(config), layout_(config.extents, config.window) {
  check(config_);
  const std::size_t shift = config_.shifted ? layout_.half_shift() : 0;
  to_windows_ = layout_.partition_index(shift);
  from_windows_ = layout_.merge_index(shift);

  const std::size_t d = config_.dim, hidden = d * config_.mlp_ratio;
  const double bound_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double bound_h = 1.0 / std::sqrt(static_cast<double>(hidden));
  ln1_g_ = constant_param<T>({d}, T(1));
  ln1_b_ = constant_param<T>({d}, T(0));
  ln2_g_ = constant_param<T>({d}, T(1));
  ln2_b_ = constant_param<T>({d}, T(0));

  attn_.heads = config_.heads;
  attn_.qkv_weight = uniform_param<T>({d, 3 * d}, bound_d, rng);
  attn_.qkv_bias = constant_param<T>({3 * d}, T(0));
  attn_.proj_weight = config_.zero_init_branches ? constant_param<T>({d, d}, T(0)) : uniform_param<T>({d, d}, bound_d, rng);
  attn_.proj_bias = constant_param<T>({d}, T(0));
  std::size_t table = 1;
  for (std::size_t a = 0; a < layout_.rank(); ++a) table *= 2 * config_.window - 1;
  attn_.bias_table = constant_param<T>({table, config_.heads}, T(0));
  attn_.bias_index = relative_position_index(config_.window, layout_.rank());

  fc1_w_ = uniform_param<T>({d, hidden}, bound_d, rng);
  fc1_b_ = constant_param<T>({hidden}, T(0));
  fc2_w_ = config_.zero_init_branches ? constant_param<T>({hidden, d}, T(0)) : uniform_param<T>({hidden, d}, bound_h, rng);
  fc2_b_ = constant_param<T>({d}, T(0));
}

template <typename T>
Tensor<T> SwinBlock<T>::forward(const Tensor<T>& x) const {
  Shape expected(config_.extents);
  expected.push_back(config_.dim);
  if (x.shape() != expected) {
    throw ShapeError("swin block: expected " + to_string(expected) + ", got " + to_string(x.shape()));
  }
  const std::size_t d = config_.dim;
  auto h = ops::layer_norm(x, ln1_g_, ln1_b_);
  auto windows = ops::gather_rows(h, std::span<const std::size_t>(to_windows_),
                                  {layout_.num_windows(), layout_.tokens_per_window(), d});
  auto attended = window_attention(windows, attn_);
  auto merged = ops::gather_rows(attended, std::span<const std::size_t>(from_windows_), x.shape());
  auto y = ops::add(x, merged);
  auto mlp = ops::linear(ops::gelu(ops::linear(ops::layer_norm(y, ln2_g_, ln2_b_), fc1_w_, &fc1_b_)), fc2_w_, &fc2_b_);
  return ops::add(y, mlp);
}

template <typename T>
void SwinBlock<T>::collect(ParamSet<T>& params, const std::string& prefix) const {
  params.add(prefix + ".norm1.gamma", ln1_g_);
  params.add(prefix + ".norm1.beta", ln1_b_);
  params.add(prefix + ".attn.qkv.weight", attn_.qkv_weight);
  params.add(prefix + ".attn.qkv.bias", attn_.qkv_bias);
  params.add(prefix + ".attn.proj.weight", attn_.proj_weight);
  params.add(prefix + ".attn.proj.bias", attn_.proj_bias);
  params.add(prefix + ".attn.relative_bias", attn_.bias_table);
  params.add(prefix + ".norm2.gamma", ln2_g_);
  params.add(prefix + ".norm2.beta", ln2_b_);
  params.add(prefix + ".mlp.fc1.weight", fc1_w_);
  params.add(prefix + ".mlp.fc1.bias", fc1_b_);
  params.add(prefix + ".mlp.fc2.weight", fc2_w_);
  params.add(prefix + ".mlp.fc2.bias", fc2_b_);
}

template <typename T>
void Vtm<T>::check(const Config& config) {
  if (config.extents.size() != 4) throw ConfigError("VTM operates on 4 spatial axes");
  if (config.depth == 0) throw ConfigError("VTM depth must be at least 1");
  SwinBlock<T>::check({config.extents, config.dim, config.heads, config.window, false, 4, true});
}

template <typename T>
Vtm<T>::Vtm(const Config& config, Rng& rng) : config_(config) {
  check(config_);
  for (std::size_t b = 0; b < config_.depth; ++b) {
    typename SwinBlock<T>::Config bc;
    bc.extents = config_.extents;
    bc.dim = config_.dim;
    bc.heads = config_.heads;
    bc.window = config_.window;
    bc.shifted = (b % 2) == 1;
    bc.zero_init_branches = true;
    blocks_.emplace_back(bc, rng);
  }
}

template <typename T>
Tensor<T> Vtm<T>::forward(const Tensor<T>& x) const {
  Tensor<T> stream = x;
  for (const auto& block : blocks_) stream = block.forward(stream);
  return stream;
}

template <typename T>
void Vtm<T>::collect(ParamSet<T>& params, const std::string& prefix) const {
  for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(params, prefix + ".block" + std::to_string(b));
}

#define VAT_VTM_INSTANTIATE(T)                                                                          \
  template Tensor<T> partition_windows<T>(const Tensor<T>&, const WindowLayout&);                       \
  template Tensor<T> merge_windows<T>(const Tensor<T>&, const WindowLayout&);                           \
  template Tensor<T> cyclic_shift<T>(const Tensor<T>&, const std::vector<std::ptrdiff_t>&);             \
  template Tensor<T> window_attention<T>(const Tensor<T>&, const AttentionParams<T>&, Tensor<T>*);      \
  template class SwinBlock<T>;                                                                          \
  template class Vtm<T>;

VAT_VTM_INSTANTIATE(float)
VAT_VTM_INSTANTIATE(double)

}  // namespace vat
