#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "vat/vtm.hpp"

namespace vat {

enum class HeadKind { kMask, kFlow };

struct DecoderStage {
  int layer = 0;               // query feature layer feeding the affinity path
  std::size_t channels = 1;    // its channel count
  std::size_t projection = 8;  // projected channels h
};

struct DecoderConfig {
  std::size_t dim = 16;
  std::size_t heads = 2;
  std::size_t window = 4;
  std::size_t blocks = 2;                  // swin blocks per stage, alternating shift
  std::array<std::size_t, 2> extent{8, 8};  // query extents of the aggregated volume
  std::vector<DecoderStage> stages;
  bool upsample = true;      // x2 bilinear before every stage after the first
  bool use_affinity = true;  // concatenate projected query features
  HeadKind head = HeadKind::kMask;
};

// Mean over both support axes: [hq, wq, hs, ws, D] -> [hq, wq, D].
template <typename T>
Tensor<T> pool_support(const Tensor<T>& aggregated);

// Hard mask from [H, W, 2] logits (channel 0 background, 1 foreground):
// foreground iff the foreground logit is strictly larger.
template <typename T>
std::vector<std::uint8_t> hard_mask(const Tensor<T>& logits);

struct Keypoint {
  double x = 0.0;  // column, in query-grid cells
  double y = 0.0;  // row
};

// Moves every keypoint by the flow vector of its nearest grid cell.
// flow: [H, W, 2] with (dx, dy) per cell.
template <typename T>
std::vector<Keypoint> transfer_keypoints(const Tensor<T>& flow, const std::vector<Keypoint>& keypoints);

// Affinity-aware decoder. Each stage: optional x2 upsample, concat with the
// projected query features of that stage, merge back to D channels, then
// a pair of 2D swin blocks. The head maps D to 2 channels (mask logits or
// flow).
template <typename T>
class Decoder {
 public:
  Decoder(const DecoderConfig& config, Rng& rng);
  static void check(const DecoderConfig& config);

  std::array<std::size_t, 2> stage_extent(std::size_t stage) const;
  std::array<std::size_t, 2> output_extent() const { return stage_extent(config_.stages.size() - 1); }

  // x: [h, w, D] at the stage's input resolution; features: [h', w', c].
  Tensor<T> decode_stage(std::size_t stage, const Tensor<T>& x, const Tensor<T>& features) const;
  // Pools the support axes and runs every stage; returns [H, W, D].
  Tensor<T> decode(const Tensor<T>& aggregated, const std::vector<Tensor<T>>& stage_features) const;
  Tensor<T> predict_mask(const Tensor<T>& decoded) const;
  Tensor<T> predict_flow(const Tensor<T>& decoded) const;
  // decode + the configured head.
  Tensor<T> forward(const Tensor<T>& aggregated, const std::vector<Tensor<T>>& stage_features) const;

  void collect(ParamSet<T>& params, const std::string& prefix) const;
  const DecoderConfig& config() const { return config_; }
  Tensor<T>& merge_weight(std::size_t stage) { return merge_w_.at(stage); }

 private:
  Tensor<T> head(const Tensor<T>& decoded) const;

  DecoderConfig config_;
  std::vector<Tensor<T>> proj_w_, proj_b_, merge_w_, merge_b_;
  std::vector<std::vector<SwinBlock<T>>> blocks_;
  Tensor<T> head_w_, head_b_;
};

}  // namespace vat
