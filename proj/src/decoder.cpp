#include "vat/decoder.hpp"

#include <cmath>

#include "vat/ops.hpp"

namespace vat {

template <typename T>
Tensor<T> pool_support(const Tensor<T>& aggregated) {
  if (aggregated.rank() != 5) {
    throw ShapeError("pool_support: expected [hq, wq, hs, ws, D], got " + to_string(aggregated.shape()));
  }
  const auto& s = aggregated.shape();
  auto flat = ops::reshape(aggregated, {s[0] * s[1], s[2] * s[3], s[4]});
  return ops::reshape(ops::mean(flat, 1), {s[0], s[1], s[4]});
}

template <typename T>
std::vector<std::uint8_t> hard_mask(const Tensor<T>& logits) {
  if (logits.rank() != 3 || logits.dim(2) != 2) {
    throw ShapeError("hard_mask: expected [H, W, 2] logits, got " + to_string(logits.shape()));
  }
  std::vector<std::uint8_t> mask(logits.dim(0) * logits.dim(1));
  for (std::size_t p = 0; p < mask.size(); ++p) {
    mask[p] = logits.data()[2 * p + 1] > logits.data()[2 * p] ? 1 : 0;
  }
  return mask;
}

template <typename T>
std::vector<Keypoint> transfer_keypoints(const Tensor<T>& flow, const std::vector<Keypoint>& keypoints) {
  if (flow.rank() != 3 || flow.dim(2) != 2) {
    throw ShapeError("transfer_keypoints: expected [H, W, 2] flow, got " + to_string(flow.shape()));
  }
  const auto h = static_cast<long>(flow.dim(0)), w = static_cast<long>(flow.dim(1));
  std::vector<Keypoint> moved;
  moved.reserve(keypoints.size());
  for (const auto& kp : keypoints) {
    const long row = std::clamp(std::lround(kp.y), 0L, h - 1);
    const long col = std::clamp(std::lround(kp.x), 0L, w - 1);
    const std::size_t at = static_cast<std::size_t>(row * w + col) * 2;
    moved.push_back({kp.x + static_cast<double>(flow.data()[at]), kp.y + static_cast<double>(flow.data()[at + 1])});
  }
  return moved;
}

template <typename T>
void Decoder<T>::check(const DecoderConfig& config) {
  if (config.stages.empty()) throw ConfigError("decoder needs at least one stage");
  if (config.blocks == 0) throw ConfigError("decoder needs at least one swin block per stage");
  if (config.head == HeadKind::kFlow && config.upsample) {
    throw ConfigError("flow head requires upsampling to be disabled");
  }
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const std::size_t factor = config.upsample ? (std::size_t{1} << s) : 1;
    SwinBlock<double>::check({{config.extent[0] * factor, config.extent[1] * factor}, config.dim, config.heads,
                              config.window, false, 4, false});
    if (config.use_affinity && (config.stages[s].channels == 0 || config.stages[s].projection == 0)) {
      throw ConfigError("decoder stage " + std::to_string(s) + ": channel counts must be positive");
    }
  }
}

template <typename T>
Decoder<T>::Decoder(const DecoderConfig& config, Rng& rng) : config_(config) {
  check(config_);
  const std::size_t d = config_.dim;
  for (std::size_t s = 0; s < config_.stages.size(); ++s) {
    const auto& st = config_.stages[s];
    const std::size_t extra = config_.use_affinity ? st.projection : 0;
    if (config_.use_affinity) {
      proj_w_.push_back(uniform_param<T>({st.channels, st.projection}, 1.0 / std::sqrt(double(st.channels)), rng));
      proj_b_.push_back(constant_param<T>({st.projection}, T(0)));
    }
    merge_w_.push_back(uniform_param<T>({d + extra, d}, 1.0 / std::sqrt(double(d + extra)), rng));
    merge_b_.push_back(constant_param<T>({d}, T(0)));
    const auto extent = stage_extent(s);
    std::vector<SwinBlock<T>> stage_blocks;
    for (std::size_t b = 0; b < config_.blocks; ++b) {
      typename SwinBlock<T>::Config bc;
      bc.extents = {extent[0], extent[1]};
      bc.dim = d;
      bc.heads = config_.heads;
      bc.window = config_.window;
      bc.shifted = (b % 2) == 1;
      stage_blocks.emplace_back(bc, rng);
    }
    blocks_.push_back(std::move(stage_blocks));
  }
  head_w_ = uniform_param<T>({d, 2}, 1.0 / std::sqrt(double(d)), rng);
  head_b_ = constant_param<T>({2}, T(0));
}

template <typename T>
std::array<std::size_t, 2> Decoder<T>::stage_extent(std::size_t stage) const {
  const std::size_t factor = config_.upsample ? (std::size_t{1} << stage) : 1;
  return {config_.extent[0] * factor, config_.extent[1] * factor};
}

template <typename T>
Tensor<T> Decoder<T>::decode_stage(std::size_t stage, const Tensor<T>& x, const Tensor<T>& features) const {
  const auto extent = stage_extent(stage);
  Tensor<T> h = x;
  if (h.rank() != 3 || h.dim(2) != config_.dim) {
    throw ShapeError("decoder stage " + std::to_string(stage) + ": expected [h, w, " + std::to_string(config_.dim) +
                     "], got " + to_string(h.shape()));
  }
  if (h.dim(0) != extent[0] || h.dim(1) != extent[1]) {
    if (!config_.upsample || stage == 0 || h.dim(0) * 2 != extent[0] || h.dim(1) * 2 != extent[1]) {
      throw ShapeError("decoder stage " + std::to_string(stage) + ": input " + to_string(h.shape()) +
                       " does not reach stage extent " + std::to_string(extent[0]) + "x" + std::to_string(extent[1]));
    }
    h = ops::resize_bilinear(h, extent[0], extent[1]);
  }
  if (config_.use_affinity) {
    const auto& st = config_.stages[stage];
    if (features.rank() != 3 || features.dim(2) != st.channels) {
      throw ShapeError("decoder stage " + std::to_string(stage) + ": features " + to_string(features.shape()) +
                       " do not have " + std::to_string(st.channels) + " channels");
    }
    Tensor<T> f = features;
    if (f.dim(0) != extent[0] || f.dim(1) != extent[1]) f = ops::resize_bilinear(f, extent[0], extent[1]);
    auto projected = ops::linear(f, proj_w_[stage], &proj_b_[stage]);
    h = ops::concat<T>({h, projected}, 2);
  }
  h = ops::linear(h, merge_w_[stage], &merge_b_[stage]);
  for (const auto& block : blocks_[stage]) h = block.forward(h);
  return h;
}

template <typename T>
Tensor<T> Decoder<T>::decode(const Tensor<T>& aggregated, const std::vector<Tensor<T>>& stage_features) const {
  if (config_.use_affinity && stage_features.size() != config_.stages.size()) {
    throw ShapeError("decoder: " + std::to_string(stage_features.size()) + " feature maps for " +
                     std::to_string(config_.stages.size()) + " stages");
  }
  Tensor<T> x = pool_support(aggregated);
  for (std::size_t s = 0; s < config_.stages.size(); ++s) {
    x = decode_stage(s, x, config_.use_affinity ? stage_features[s] : Tensor<T>());
  }
  return x;
}

template <typename T>
Tensor<T> Decoder<T>::head(const Tensor<T>& decoded) const {
  return ops::linear(decoded, head_w_, &head_b_);
}

template <typename T>
Tensor<T> Decoder<T>::predict_mask(const Tensor<T>& decoded) const {
  if (config_.head != HeadKind::kMask) throw ConfigError("predict_mask called on a flow-mode decoder");
  return head(decoded);
}

template <typename T>
Tensor<T> Decoder<T>::predict_flow(const Tensor<T>& decoded) const {
  if (config_.head != HeadKind::kFlow) throw ConfigError("predict_flow called on a mask-mode decoder");
  return head(decoded);
}

template <typename T>
Tensor<T> Decoder<T>::forward(const Tensor<T>& aggregated, const std::vector<Tensor<T>>& stage_features) const {
  const auto decoded = decode(aggregated, stage_features);
  return config_.head == HeadKind::kMask ? predict_mask(decoded) : predict_flow(decoded);
}

template <typename T>
void Decoder<T>::collect(ParamSet<T>& params, const std::string& prefix) const {
  for (std::size_t s = 0; s < config_.stages.size(); ++s) {
    const std::string p = prefix + ".stage" + std::to_string(s);
    if (config_.use_affinity) {
      params.add(p + ".proj.weight", proj_w_[s]);
      params.add(p + ".proj.bias", proj_b_[s]);
    }
    params.add(p + ".merge.weight", merge_w_[s]);
    params.add(p + ".merge.bias", merge_b_[s]);
    for (std::size_t b = 0; b < blocks_[s].size(); ++b) blocks_[s][b].collect(params, p + ".block" + std::to_string(b));
  }
  params.add(prefix + ".head.weight", head_w_);
  params.add(prefix + ".head.bias", head_b_);
}

#define VAT_DECODER_INSTANTIATE(T)                                                                  \
  template Tensor<T> pool_support<T>(const Tensor<T>&);                                             \
  template std::vector<std::uint8_t> hard_mask<T>(const Tensor<T>&);                                \
  template std::vector<Keypoint> transfer_keypoints<T>(const Tensor<T>&, const std::vector<Keypoint>&); \
  template class Decoder<T>;

VAT_DECODER_INSTANTIATE(float)
VAT_DECODER_INSTANTIATE(double)

}  // namespace vat
