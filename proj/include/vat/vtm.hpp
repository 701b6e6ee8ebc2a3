#pragma once

#include <vector>

#include "vat/params.hpp"
#include "vat/tensor.hpp"

namespace vat {

// Non-overlapping cubic windows of side `window` over a grid of any rank
// (4 for correlation volumes, 2 for decoder feature maps). Windows are
// ordered row-major over the window grid, tokens row-major inside a window.
class WindowLayout {
 public:
  WindowLayout(std::vector<std::size_t> extents, std::size_t window);

  const std::vector<std::size_t>& extents() const { return extents_; }
  std::size_t window() const { return window_; }
  std::size_t rank() const { return extents_.size(); }
  std::size_t num_windows() const;
  std::size_t tokens_per_window() const;
  std::size_t num_tokens() const;
  // Displacement used by shifted blocks: floor(window / 2) on every axis.
  std::size_t half_shift() const { return window_ / 2; }

  // Row r of the partitioned tensor reads grid position index[r] of the grid
  // cyclically shifted by `shift` (shifted[i] = x[(i + shift) mod extent]).
  std::vector<std::size_t> partition_index(std::size_t shift) const;
  // Inverse permutation of partition_index(shift).
  std::vector<std::size_t> merge_index(std::size_t shift) const;

 private:
  std::vector<std::size_t> extents_;
  std::size_t window_;
};

// x: [extents..., C] -> [num_windows, window^rank, C].
template <typename T>
Tensor<T> partition_windows(const Tensor<T>& x, const WindowLayout& layout);
// Inverse of partition_windows.
template <typename T>
Tensor<T> merge_windows(const Tensor<T>& windows, const WindowLayout& layout);
// Circular roll of every spatial axis (all but the last):
// out[i] = x[(i + displacement[a]) mod extent[a]].
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, const std::vector<std::ptrdiff_t>& displacement);

// Flattened relative offset of every ordered token pair in a window:
// index[i * T + j] addresses a (2n-1)^rank table.
std::vector<std::size_t> relative_position_index(std::size_t window, std::size_t rank);

template <typename T>
struct AttentionParams {
  std::size_t heads = 1;
  Tensor<T> qkv_weight;  // [D, 3D]
  Tensor<T> qkv_bias;    // [3D]
  Tensor<T> proj_weight;  // [D, D]
  Tensor<T> proj_bias;    // [D]
  Tensor<T> bias_table;  // [(2n-1)^rank, heads]
  std::vector<std::size_t> bias_index;  // tokens^2 entries into bias_table
};

// Multi-head self-attention inside each window:
// softmax(Q K^T / sqrt(d_head) + B) V per head, heads concatenated, then the
// output projection. windows: [num_windows, tokens, D].
// If `weights` is given it receives the attention matrix
// [num_windows, heads, tokens, tokens].
template <typename T>
Tensor<T> window_attention(const Tensor<T>& windows, const AttentionParams<T>& params, Tensor<T>* weights = nullptr);

// Pre-norm transformer block on windowed attention:
//   y = x + merge(attn(partition(shift(LN(x)))))
//   z = y + fc2(gelu(fc1(LN(y))))
template <typename T>
class SwinBlock {
 public:
  struct Config {
    std::vector<std::size_t> extents;  // spatial grid
    std::size_t dim = 16;
    std::size_t heads = 1;
    std::size_t window = 2;
    bool shifted = false;
    std::size_t mlp_ratio = 4;
    bool zero_init_branches = false;  // zero output projection and fc2
  };

  SwinBlock(const Config& config, Rng& rng);
  static void check(const Config& config);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamSet<T>& params, const std::string& prefix) const;

  const Config& config() const { return config_; }
  AttentionParams<T>& attention() { return attn_; }
  Tensor<T>& fc2_weight() { return fc2_w_; }
  Tensor<T>& fc2_bias() { return fc2_b_; }

 private:
  Config config_;
  WindowLayout layout_;
  std::vector<std::size_t> to_windows_, from_windows_;
  Tensor<T> ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  AttentionParams<T> attn_;
  Tensor<T> fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

// Volumetric transformer: `depth` swin blocks over a [hq, wq, hs, ws, D]
// volume, alternating unshifted/shifted windows. The residual stream starts
// at the input, so the result is input + sum of block branch outputs; with
// zero-initialized branches the module is the identity.
template <typename T>
class Vtm {
 public:
  struct Config {
    std::vector<std::size_t> extents;  // 4 spatial axes
    std::size_t dim = 16;
    std::size_t heads = 1;
    std::size_t window = 2;
    std::size_t depth = 2;
  };

  Vtm(const Config& config, Rng& rng);
  static void check(const Config& config);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamSet<T>& params, const std::string& prefix) const;
  std::vector<SwinBlock<T>>& blocks() { return blocks_; }

 private:
  Config config_;
  std::vector<SwinBlock<T>> blocks_;
};

}  // namespace vat
