#pragma once

#include <cstdint>
#include <vector>

#include "vat/config.hpp"
#include "vat/correlation.hpp"
#include "vat/decoder.hpp"
#include "vat/encoder.hpp"

namespace vat {

// Full pipeline: hypercorrelations -> pyramid encoder -> affinity decoder.
template <typename T>
class VatModel {
 public:
  VatModel(const ModelConfig& config, std::uint64_t seed);

  // One hypercorrelation per configured level, coarsest first. They carry no
  // parameters, so callers may compute them once and reuse them.
  std::vector<Tensor<T>> hypercorrelations(const FeaturePyramid<T>& pyramid) const;
  // Query feature maps feeding the decoder stages.
  std::vector<Tensor<T>> stage_features(const FeaturePyramid<T>& pyramid) const;

  Tensor<T> forward(const std::vector<Tensor<T>>& hypercorrelations, const std::vector<Tensor<T>>& features) const;
  Tensor<T> forward(const FeaturePyramid<T>& pyramid) const;

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const ModelConfig& config() const { return config_; }
  Encoder<T>& encoder() { return encoder_; }
  Decoder<T>& decoder() { return decoder_; }

 private:
  ModelConfig config_;
  Rng rng_;
  Encoder<T> encoder_;
  Decoder<T> decoder_;
  ParamSet<T> params_;
};

}  // namespace vat
