#pragma once

#include <array>
#include <vector>

#include "vat/params.hpp"
#include "vat/tensor.hpp"

namespace vat {

using Extents4 = std::array<std::size_t, 4>;

std::string to_string(const Extents4& e);

// Dense 4D convolution kernel over channels-last volumes.
template <typename T>
struct Conv4dKernel {
  Tensor<T> weight;  // [k, k, k, k, in, out]
  Tensor<T> bias;    // [out]
  Extents4 stride{1, 1, 1, 1};
  Extents4 padding{0, 0, 0, 0};

  std::size_t size() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(4); }
  std::size_t out_channels() const { return weight.dim(5); }

  // uniform(+-1/sqrt(fan_in)) weights, zero bias, "same" padding, stride 1.
  static Conv4dKernel make(std::size_t k, std::size_t in, std::size_t out, Rng& rng);
};

// Output extents of a conv/pool along each axis; throws ShapeError when an
// extent would be non-positive.
Extents4 conv4d_extents(const Extents4& in, std::size_t k, const Extents4& stride, const Extents4& padding);

// x: [a, b, c, d, in] -> [a', b', c', d', out], direct cross-correlation.
template <typename T>
Tensor<T> conv4d(const Tensor<T>& x, const Conv4dKernel<T>& kernel);

// Channel-independent max over 4D windows (no padding, floor mode).
// Gradient goes to the first maximal element of each window.
template <typename T>
Tensor<T> maxpool4d(const Tensor<T>& x, const Extents4& window, const Extents4& stride);

// Volume Embedding Module: one 4D max-pool that brings every axis to its
// target extent, then `blocks` x [conv4d 3^4 -> ReLU -> GroupNorm]. The first
// conv lifts in_channels to dim.
template <typename T>
class Vem {
 public:
  struct Config {
    Extents4 input{};
    Extents4 target{};
    std::size_t in_channels = 1;
    std::size_t dim = 16;
    std::size_t blocks = 2;
    std::size_t groups = 4;
    std::size_t kernel = 3;
    bool normalize = true;  // false skips GroupNorm (tests only)
  };

  Vem(const Config& config, Rng& rng);

  // Validates the schedule without allocating parameters.
  static void check(const Config& config);
  static Extents4 pool_window(const Config& config);

  Tensor<T> forward(const Tensor<T>& hypercorrelation) const;
  void collect(ParamSet<T>& params, const std::string& prefix) const;

  const Config& config() const { return config_; }
  std::vector<Conv4dKernel<T>>& convs() { return convs_; }

 private:
  Config config_;
  std::vector<Conv4dKernel<T>> convs_;
  std::vector<Tensor<T>> gamma_, beta_;
};

}  // namespace vat
