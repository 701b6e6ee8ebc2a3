#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vat/vem.hpp"
#include "vat/vtm.hpp"

namespace vat {

// What aggregates each level's embedded volume.
enum class Aggregator { kVtm, kConv4d, kIdentity };

std::string to_string(Aggregator aggregator);
Aggregator parse_aggregator(const std::string& name);

struct EncoderLevel {
  int level = 0;            // pyramid level id (informational)
  Extents4 input{};          // hypercorrelation spatial extents
  Extents4 target{};         // embedded volume extents
  std::size_t channels = 1;  // |L_p|
  std::size_t depth = 2;     // transformer blocks
};

struct EncoderConfig {
  std::vector<EncoderLevel> levels;  // coarsest first
  std::size_t dim = 16;
  std::size_t heads = 2;
  std::size_t window = 2;
  std::size_t vem_blocks = 2;
  std::size_t vem_groups = 4;
  Aggregator aggregator = Aggregator::kVtm;
};

// Bilinear (half-pixel) resize of the two query axes of a [hq, wq, hs, ws, D]
// volume so it matches `like`; support axes and channels must already agree.
template <typename T>
Tensor<T> upsample_guidance(const Tensor<T>& coarse, const Shape& like);

// Residual dense 4D-convolution aggregator used as an ablation baseline:
// x + conv(relu(conv(x))), second conv zero-initialized.
template <typename T>
class Conv4dAggregator {
 public:
  Conv4dAggregator(std::size_t dim, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamSet<T>& params, const std::string& prefix) const;

 private:
  Conv4dKernel<T> first_, second_;
};

// Coarse-to-fine pyramid: A = agg(VEM(C)) at the coarsest level, then
// A_p = agg(VEM(C_p) + up(A_{p+1})) for each finer level.
template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& config, Rng& rng);
  static void check(const EncoderConfig& config);

  // hypercorrelations ordered like config.levels; returns the finest A.
  Tensor<T> forward(const std::vector<Tensor<T>>& hypercorrelations) const;
  void collect(ParamSet<T>& params, const std::string& prefix) const;

  const EncoderConfig& config() const { return config_; }
  Vem<T>& vem(std::size_t level) { return vems_.at(level); }
  Vtm<T>& vtm(std::size_t level) { return *vtms_.at(level); }

 private:
  Tensor<T> aggregate(std::size_t level, const Tensor<T>& x) const;

  EncoderConfig config_;
  std::vector<Vem<T>> vems_;
  std::vector<std::optional<Vtm<T>>> vtms_;
  std::vector<std::optional<Conv4dAggregator<T>>> convs_;
};

}  // namespace vat
