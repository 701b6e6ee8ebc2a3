#include "vat/model.hpp"

namespace vat {

template <typename T>
VatModel<T>::VatModel(const ModelConfig& config, std::uint64_t seed)
    : config_((validate(config), config)),
      rng_(seed),
      encoder_(config_.encoder(), rng_),
      decoder_(config_.decoder(), rng_) {
  encoder_.collect(params_, "encoder");
  decoder_.collect(params_, "decoder");
}

template <typename T>
std::vector<Tensor<T>> VatModel<T>::hypercorrelations(const FeaturePyramid<T>& pyramid) const {
  pyramid.validate();
  std::vector<Tensor<T>> out;
  for (const auto& lv : config_.levels) {
    auto it = pyramid.groups.find(lv.level);
    if (it == pyramid.groups.end() || it->second != lv.layers) {
      throw ConfigError("pyramid groups do not match the configured layers of level " + std::to_string(lv.level));
    }
    out.push_back(build_hypercorrelation(pyramid, lv.level));
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> VatModel<T>::stage_features(const FeaturePyramid<T>& pyramid) const {
  std::vector<Tensor<T>> out;
  if (!config_.use_affinity) return out;
  for (const auto& st : config_.decoder_stages) out.push_back(pyramid.layer(st.layer).query);
  return out;
}

template <typename T>
Tensor<T> VatModel<T>::forward(const std::vector<Tensor<T>>& hypercorrelations,
                               const std::vector<Tensor<T>>& features) const {
  return decoder_.forward(encoder_.forward(hypercorrelations), features);
}

template <typename T>
Tensor<T> VatModel<T>::forward(const FeaturePyramid<T>& pyramid) const {
  return forward(hypercorrelations(pyramid), stage_features(pyramid));
}

template class VatModel<float>;
template class VatModel<double>;

}  // namespace vat
