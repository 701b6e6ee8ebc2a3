#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "vat/ops.hpp"

namespace vat::testing {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  auto t = Tensor<double>::zeros(shape, requires_grad);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor<float> random_float(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  auto t = Tensor<float>::zeros(shape);
  for (auto& v : t.data()) v = static_cast<float>(dist(rng));
  return t;
}

using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Largest relative disagreement between the analytic gradient and central
// finite differences over all `inputs`, for the scalar sum(f(x) * R) with a
// fixed random R. Relative to the larger infinity norm of the two gradients.
inline double gradcheck(const Fn& f, std::vector<Tensor<double>> inputs, std::uint64_t seed = 1, double eps = 1e-4) {
  std::mt19937_64 rng(seed);
  const auto probe = [&] {
    NoGradGuard guard;
    return f(inputs);
  }();
  const auto weights = random_tensor(probe.shape(), rng, -1.0, 1.0, false);
  auto objective = [&](const std::vector<Tensor<double>>& xs) { return ops::sum(ops::mul(f(xs), weights)); };

  for (auto& x : inputs) x.zero_grad();
  backward(objective(inputs));

  double worst = 0.0;
  for (auto& x : inputs) {
    if (!x.requires_grad()) continue;
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    if (analytic.empty()) analytic.assign(x.numel(), 0.0);
    std::vector<double> numeric(x.numel());
    NoGradGuard guard;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double saved = x.data()[i];
      x.data()[i] = saved + eps;
      const double up = objective(inputs).item();
      x.data()[i] = saved - eps;
      const double down = objective(inputs).item();
      x.data()[i] = saved;
      numeric[i] = (up - down) / (2 * eps);
    }
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    worst = std::max(worst, scale > 0 ? diff / scale : diff);
  }
  return worst;
}

}  // namespace vat::testing
