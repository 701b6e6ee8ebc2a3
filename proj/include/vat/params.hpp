#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vat/tensor.hpp"

namespace vat {

// Named learnable tensors in registration order. Names are dotted paths,
// e.g. "encoder.level0.vtm.block1.qkv.weight".
template <typename T>
class ParamSet {
 public:
  void add(std::string name, const Tensor<T>& tensor) { entries_.emplace_back(std::move(name), tensor); }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

using Rng = std::mt19937_64;

// uniform(-bound, bound) leaf that requires a gradient.
template <typename T>
Tensor<T> uniform_param(const Shape& shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto t = Tensor<T>::zeros(shape, true);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> constant_param(const Shape& shape, T value) {
  return Tensor<T>::full(shape, value, true);
}

}  // namespace vat
