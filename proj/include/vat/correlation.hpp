#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "vat/tensor.hpp"

namespace vat {

// Query and support feature maps of one backbone layer, both [h, w, c].
template <typename T>
struct FeatureLayer {
  int layer = 0;
  Tensor<T> query;
  Tensor<T> support;
};

template <typename T>
struct FeaturePyramid {
  std::vector<FeatureLayer<T>> layers;
  Tensor<T> support_mask;                 // [H, W], values in {0, 1}
  std::map<int, std::vector<int>> groups;  // pyramid level -> layer indices of equal spatial size

  const FeatureLayer<T>& layer(int index) const;
  // Throws ShapeError/ConfigError when an invariant is violated.
  void validate() const;
};

// Nearest-neighbour resize of a binary [H, W] mask to [h, w]
// (source index floor(i * H / h)).
template <typename T>
Tensor<T> resize_mask_nearest(const Tensor<T>& mask, std::size_t h, std::size_t w);

// Support features with background positions zeroed by the resized mask.
template <typename T>
Tensor<T> mask_support(const Tensor<T>& support, const Tensor<T>& mask);

inline constexpr double kCosineEps = 1e-8;

// ReLU-clamped cosine similarity between every query and support position:
// [hq, wq, c] x [hs, ws, c] -> [hq, wq, hs, ws]. All-zero vectors give 0.
template <typename T>
Tensor<T> correlate(const Tensor<T>& query, const Tensor<T>& masked_support);

// Stacks the correlation maps of the layers in group `level` along a new
// trailing axis, ascending by layer index: [hq, wq, hs, ws, |group|].
template <typename T>
Tensor<T> build_hypercorrelation(const FeaturePyramid<T>& pyramid, int level);

// Directory layout: manifest.json plus one tensor record per feature map and
// one for the support mask. Loading checks each blob against the manifest.
template <typename T>
void save_pyramid(const std::filesystem::path& dir, const FeaturePyramid<T>& pyramid);
template <typename T>
FeaturePyramid<T> load_pyramid(const std::filesystem::path& dir);

}  // namespace vat
