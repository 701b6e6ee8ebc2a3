#include "vat/encoder.hpp"

#include "vat/ops.hpp"

namespace vat {

std::string to_string(Aggregator aggregator) {
  switch (aggregator) {
    case Aggregator::kVtm: return "vtm";
    case Aggregator::kConv4d: return "conv4d-baseline";
    case Aggregator::kIdentity: return "identity";
  }
  return "?";
}

Aggregator parse_aggregator(const std::string& name) {
  if (name == "vtm") return Aggregator::kVtm;
  if (name == "conv4d-baseline") return Aggregator::kConv4d;
  if (name == "identity") return Aggregator::kIdentity;
  throw ConfigError("unknown aggregator '" + name + "' (expected vtm, conv4d-baseline or identity)");
}

template <typename T>
Tensor<T> upsample_guidance(const Tensor<T>& coarse, const Shape& like) {
  if (coarse.rank() != 5 || like.size() != 5 || coarse.dim(2) != like[2] || coarse.dim(3) != like[3] ||
      coarse.dim(4) != like[4]) {
    throw ShapeError("upsample_guidance: cannot resize " + to_string(coarse.shape()) + " to " + to_string(like) +
                     " (support extents and channels must match)");
  }
  if (coarse.dim(0) == like[0] && coarse.dim(1) == like[1]) return coarse;
  return ops::resize_bilinear(coarse, like[0], like[1]);
}

template <typename T>
Conv4dAggregator<T>::Conv4dAggregator(std::size_t dim, Rng& rng)
    : first_(Conv4dKernel<T>::make(3, dim, dim, rng)), second_(Conv4dKernel<T>::make(3, dim, dim, rng)) {
  for (auto& w : second_.weight.data()) w = T(0);
}

template <typename T>
Tensor<T> Conv4dAggregator<T>::forward(const Tensor<T>& x) const {
  return ops::add(x, conv4d(ops::relu(conv4d(x, first_)), second_));
}

template <typename T>
void Conv4dAggregator<T>::collect(ParamSet<T>& params, const std::string& prefix) const {
  params.add(prefix + ".conv0.weight", first_.weight);
  params.add(prefix + ".conv0.bias", first_.bias);
  params.add(prefix + ".conv1.weight", second_.weight);
  params.add(prefix + ".conv1.bias", second_.bias);
}

namespace {

typename Vem<double>::Config vem_config(const EncoderConfig& config, const EncoderLevel& level) {
  typename Vem<double>::Config vc;
  vc.input = level.input;
  vc.target = level.target;
  vc.in_channels = level.channels;
  vc.dim = config.dim;
  vc.blocks = config.vem_blocks;
  vc.groups = config.vem_groups;
  return vc;
}

}  // namespace

template <typename T>
void Encoder<T>::check(const EncoderConfig& config) {
  if (config.levels.empty()) throw ConfigError("encoder needs at least one pyramid level");
  for (std::size_t i = 0; i < config.levels.size(); ++i) {
    const auto& level = config.levels[i];
    const auto vc = vem_config(config, level);
    Vem<double>::check(vc);
    if (config.aggregator == Aggregator::kVtm) {
      Vtm<double>::check({Shape(level.target.begin(), level.target.end()), config.dim, config.heads, config.window,
                          level.depth});
    }
    if (i > 0) {
      const auto& coarser = config.levels[i - 1].target;
      if (coarser[2] != level.target[2] || coarser[3] != level.target[3]) {
        throw ConfigError("encoder level " + std::to_string(level.level) + ": support extents " +
                          to_string(level.target) + " differ from coarser level " + to_string(coarser));
      }
      if (coarser[0] > level.target[0] || coarser[1] > level.target[1]) {
        throw ConfigError("encoder levels must be ordered coarsest first");
      }
    }
  }
}

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
  check(config_);
  for (const auto& level : config_.levels) {
    const auto dc = vem_config(config_, level);
    typename Vem<T>::Config vc;
    vc.input = dc.input;
    vc.target = dc.target;
    vc.in_channels = dc.in_channels;
    vc.dim = dc.dim;
    vc.blocks = dc.blocks;
    vc.groups = dc.groups;
    vems_.emplace_back(vc, rng);
    vtms_.emplace_back();
    convs_.emplace_back();
    if (config_.aggregator == Aggregator::kVtm) {
      vtms_.back().emplace(typename Vtm<T>::Config{Shape(level.target.begin(), level.target.end()), config_.dim,
                                                   config_.heads, config_.window, level.depth},
                           rng);
    } else if (config_.aggregator == Aggregator::kConv4d) {
      convs_.back().emplace(config_.dim, rng);
    }
  }
}

template <typename T>
Tensor<T> Encoder<T>::aggregate(std::size_t level, const Tensor<T>& x) const {
  if (vtms_[level]) return vtms_[level]->forward(x);
  if (convs_[level]) return convs_[level]->forward(x);
  return x;
}

template <typename T>
Tensor<T> Encoder<T>::forward(const std::vector<Tensor<T>>& hypercorrelations) const {
  if (hypercorrelations.size() != vems_.size()) {
    throw ShapeError("encoder: got " + std::to_string(hypercorrelations.size()) + " hypercorrelations for " +
                     std::to_string(vems_.size()) + " levels");
  }
  Tensor<T> aggregated;
  for (std::size_t i = 0; i < vems_.size(); ++i) {
    auto embedded = vems_[i].forward(hypercorrelations[i]);
    if (i > 0) {
      embedded = ops::add(embedded, upsample_guidance(aggregated, embedded.shape()));
    }
    aggregated = aggregate(i, embedded);
  }
  return aggregated;
}

template <typename T>
void Encoder<T>::collect(ParamSet<T>& params, const std::string& prefix) const {
  for (std::size_t i = 0; i < vems_.size(); ++i) {
    const std::string p = prefix + ".level" + std::to_string(i);
    vems_[i].collect(params, p + ".vem");
    if (vtms_[i]) vtms_[i]->collect(params, p + ".vtm");
    if (convs_[i]) convs_[i]->collect(params, p + ".conv4d");
  }
}

template Tensor<float> upsample_guidance<float>(const Tensor<float>&, const Shape&);
template Tensor<double> upsample_guidance<double>(const Tensor<double>&, const Shape&);
template class Conv4dAggregator<float>;
template class Conv4dAggregator<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace vat
