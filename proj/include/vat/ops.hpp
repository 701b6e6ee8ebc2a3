#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "vat/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes and throws
// ShapeError naming the op and the offending shapes.
namespace vat::ops {

// Elementwise, identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
// Broadcast add of a tensor whose shape equals the trailing axes of `a`.
template <typename T> Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
// Exact (erf) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

// [M,K] x [K,N] -> [M,N].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// [B,M,K] x [B,K,N] -> [B,M,N]. With transpose_b, b is read as [B,N,K].
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
// x[..., in] * weight[in, out] (+ bias[out]).
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
// Zero padding; pads[axis] = {before, after}.
template <typename T>
Tensor<T> pad(const Tensor<T>& x, const std::vector<std::pair<std::size_t, std::size_t>>& pads);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::size_t axis);
// Gradient routes to the first maximal element along the axis.
template <typename T> Tensor<T> max(const Tensor<T>& x, std::size_t axis);

// Over the last axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);

inline constexpr double kNormEps = 1e-5;

// Normalizes over the last axis with affine gamma/beta of that extent.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(kNormEps));
// Channels-last group norm: statistics per group over every leading position
// and the group's channels. gamma/beta may be null for the plain normalization.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>* gamma, const Tensor<T>* beta,
                     T eps = T(kNormEps));

// Treats x as rows of its last extent; out row i = x row index[i].
// `shape` is the output shape (its last extent must match x's).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index, const Shape& shape);

// x / max(||x||, eps) over the last axis.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, T eps);
// ||row|| over the last axis; output drops that axis.
template <typename T> Tensor<T> row_norm(const Tensor<T>& x);

// Bilinear resize of the two leading axes of [H, W, ...] with half-pixel
// centres (align_corners = false); trailing axes pass through.
template <typename T> Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

// Mean cross-entropy of softmax(logits[N,K]) against class labels.
template <typename T> Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace vat::ops
