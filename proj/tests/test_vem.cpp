#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "gradcheck.hpp"
#include "vat/config.hpp"
#include "vat/errors.hpp"
#include "vat/vem.hpp"

using namespace vat;
using vat::testing::gradcheck;
using vat::testing::random_float;
using vat::testing::random_tensor;

namespace {

// Straight 8-deep loop cross-correlation (plus channel loops) with zero padding.
std::vector<double> conv_oracle(const Tensor<float>& x, const Conv4dKernel<float>& k) {
  const auto& s = x.shape();
  const std::size_t ks = k.size(), cin = k.in_channels(), cout = k.out_channels();
  const Extents4 in{s[0], s[1], s[2], s[3]};
  const auto out = conv4d_extents(in, ks, k.stride, k.padding);
  std::vector<double> y(out[0] * out[1] * out[2] * out[3] * cout, 0.0);
  auto xi = [&](long a, long b, long c, long d, std::size_t ch) -> double {
    if (a < 0 || b < 0 || c < 0 || d < 0 || a >= long(in[0]) || b >= long(in[1]) || c >= long(in[2]) || d >= long(in[3])) return 0.0;
    return x.data()[(((a * in[1] + b) * in[2] + c) * in[3] + d) * cin + ch];
  };
  for (std::size_t o0 = 0; o0 < out[0]; ++o0)
    for (std::size_t o1 = 0; o1 < out[1]; ++o1)
      for (std::size_t o2 = 0; o2 < out[2]; ++o2)
        for (std::size_t o3 = 0; o3 < out[3]; ++o3)
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = k.bias.data()[co];
            for (std::size_t k0 = 0; k0 < ks; ++k0)
              for (std::size_t k1 = 0; k1 < ks; ++k1)
                for (std::size_t k2 = 0; k2 < ks; ++k2)
                  for (std::size_t k3 = 0; k3 < ks; ++k3)
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                      const long a = long(o0 * k.stride[0] + k0) - long(k.padding[0]);
                      const long b = long(o1 * k.stride[1] + k1) - long(k.padding[1]);
                      const long c = long(o2 * k.stride[2] + k2) - long(k.padding[2]);
                      const long d = long(o3 * k.stride[3] + k3) - long(k.padding[3]);
                      const double w = k.weight.data()[((((k0 * ks + k1) * ks + k2) * ks + k3) * cin + ci) * cout + co];
                      acc += w * xi(a, b, c, d, ci);
                    }
            y[(((o0 * out[1] + o1) * out[2] + o2) * out[3] + o3) * cout + co] = acc;
          }
  return y;
}

Conv4dKernel<float> delta_kernel(std::size_t channels) {
  Rng rng(0);
  auto k = Conv4dKernel<float>::make(3, channels, channels, rng);
  std::fill(k.weight.data().begin(), k.weight.data().end(), 0.0f);
  for (std::size_t c = 0; c < channels; ++c) k.weight.data()[40 * channels * channels + c * channels + c] = 1.0f;
  return k;
}

}  // namespace

TEST_CASE("maxpool4d examples") {
  auto constant = maxpool4d(Tensor<float>::full({4, 4, 2, 2, 3}, 1.5f), {2, 2, 2, 1}, {2, 2, 2, 1});
  CHECK(constant.shape() == Shape{2, 2, 1, 2, 3});
  for (float v : constant.data()) CHECK(v == 1.5f);

  std::mt19937_64 rng(1);
  auto x = random_float({2, 2, 2, 2, 1}, rng);
  CHECK(maxpool4d(x, {2, 2, 2, 2}, {2, 2, 2, 2}).item() == *std::max_element(x.data().begin(), x.data().end()));

  std::vector<float> ramp(16);
  std::iota(ramp.begin(), ramp.end(), 0.0f);
  auto r = maxpool4d(Tensor<float>::from({4, 4, 1, 1, 1}, ramp), {2, 2, 1, 1}, {2, 2, 1, 1});
  CHECK(r.to_vector() == std::vector<float>{5, 7, 13, 15});
}

TEST_CASE("maxpool4d rejects a window larger than the extent") {
  CHECK_THROWS_AS(maxpool4d(Tensor<float>::zeros({2, 2, 2, 2, 1}), {3, 1, 1, 1}, {1, 1, 1, 1}), ShapeError);
}

TEST_CASE("maxpool4d routes gradient only to argmax positions") {
  std::mt19937_64 rng(2);
  auto x = random_tensor({4, 4, 2, 2, 2}, rng);
  auto y = maxpool4d(x, {2, 2, 2, 1}, {2, 2, 2, 1});
  auto w = random_tensor(y.shape(), rng, -1, 1, false);
  backward(ops::sum(ops::mul(y, w)));
  std::size_t nonzero = 0;
  double routed = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (x.grad()[i] != 0) {
      ++nonzero;
      CHECK(std::find(y.data().begin(), y.data().end(), x.data()[i]) != y.data().end());
    }
    routed += x.grad()[i];
  }
  CHECK(nonzero == y.numel());
  CHECK(routed == doctest::Approx(std::accumulate(w.data().begin(), w.data().end(), 0.0)).epsilon(1e-12));
}

TEST_CASE("conv4d delta kernel with same padding is the identity") {
  std::mt19937_64 rng(3);
  auto x = random_float({3, 4, 3, 2, 1}, rng);
  CHECK(conv4d(x, delta_kernel(1)).to_vector() == x.to_vector());
}

TEST_CASE("conv4d all-ones kernel, valid padding") {
  Rng rng(0);
  auto k = Conv4dKernel<float>::make(3, 1, 1, rng);
  std::fill(k.weight.data().begin(), k.weight.data().end(), 1.0f);
  k.padding = {0, 0, 0, 0};
  auto y = conv4d(Tensor<float>::full({3, 3, 3, 3, 1}, 1.0f), k);
  CHECK(y.shape() == Shape{1, 1, 1, 1, 1});
  CHECK(y.item() == 81.0f);
}

TEST_CASE("conv4d matches the nested-loop oracle") {
  std::mt19937_64 data_rng(4);
  Rng rng(5);
  auto x = random_float({5, 5, 5, 5, 2}, data_rng);
  auto k = Conv4dKernel<float>::make(3, 2, 3, rng);
  for (auto& b : k.bias.data()) b = 0.25f;
  auto y = conv4d(x, k);
  const auto expected = conv_oracle(x, k);
  REQUIRE(y.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(y.data()[i] - expected[i]) <= 1e-5);

  k.stride = {2, 1, 2, 1};
  k.padding = {0, 1, 1, 0};
  y = conv4d(x, k);
  const auto strided = conv_oracle(x, k);
  REQUIRE(y.numel() == strided.size());
  for (std::size_t i = 0; i < strided.size(); ++i) CHECK(std::abs(y.data()[i] - strided[i]) <= 1e-5);
}

TEST_CASE("conv4d errors") {
  Rng rng(6);
  auto k = Conv4dKernel<float>::make(3, 2, 2, rng);
  CHECK_THROWS_AS(conv4d(Tensor<float>::zeros({3, 3, 3, 3, 1}), k), ShapeError);
  k.padding = {0, 0, 0, 0};
  CHECK_THROWS_AS(conv4d(Tensor<float>::zeros({2, 3, 3, 3, 2}), k), ShapeError);
  CHECK_THROWS_AS(Conv4dKernel<float>::make(2, 1, 1, rng), ConfigError);
}

TEST_CASE("gradcheck: conv4d input, weight and bias") {
  std::mt19937_64 rng(7);
  Rng init(8);
  auto made = Conv4dKernel<double>::make(3, 2, 2, init);
  auto x = random_tensor({3, 3, 3, 3, 2}, rng);
  auto w = random_tensor(made.weight.shape(), rng);
  auto b = random_tensor({2}, rng);
  auto f = [&](const std::vector<Tensor<double>>& v) {
    Conv4dKernel<double> k{v[1], v[2], {1, 1, 1, 1}, {1, 1, 1, 1}};
    return conv4d(v[0], k);
  };
  CHECK(gradcheck(f, {x, w, b}) <= 1e-5);
  auto strided = [&](const std::vector<Tensor<double>>& v) {
    Conv4dKernel<double> k{v[1], v[2], {2, 1, 1, 2}, {0, 1, 0, 1}};
    return conv4d(v[0], k);
  };
  CHECK(gradcheck(strided, {random_tensor({4, 3, 3, 4, 2}, rng), w, b}) <= 1e-5);
}

TEST_CASE("gradcheck: maxpool4d") {
  std::mt19937_64 rng(9);
  auto x = random_tensor({4, 2, 2, 4, 2}, rng);
  CHECK(gradcheck([](const auto& v) { return maxpool4d(v[0], {2, 2, 1, 2}, {2, 2, 1, 2}); }, {x}) <= 1e-5);
}

TEST_CASE("VEM with delta convolutions and no normalization returns the pooled input") {
  Rng rng(10);
  Vem<float>::Config cfg{{4, 4, 2, 2}, {2, 2, 2, 2}, 1, 1, 2, 1, 3, false};
  Vem<float> vem(cfg, rng);
  for (auto& k : vem.convs()) k = delta_kernel(1);
  std::mt19937_64 data(11);
  auto c = random_float({4, 4, 2, 2, 1}, data, 0.0, 1.0);
  CHECK(vem.forward(c).to_vector() == maxpool4d(c, {2, 2, 1, 1}, {2, 2, 1, 1}).to_vector());
}

TEST_CASE("VEM desk-scale shape") {
  Rng rng(12);
  Vem<float> vem({{16, 16, 4, 4}, {8, 8, 4, 4}, 2, 16}, rng);
  std::mt19937_64 data(13);
  CHECK(vem.forward(random_float({16, 16, 4, 4, 2}, data, 0, 1)).shape() == Shape{8, 8, 4, 4, 16});
  CHECK(Vem<float>::pool_window(vem.config()) == Extents4{2, 2, 1, 1});
}

TEST_CASE("VEM output matches every desk level target") {
  const auto model = desk_preset().model;
  const auto enc = model.encoder();
  std::mt19937_64 data(14);
  for (const auto& lv : enc.levels) {
    CAPTURE(lv.level);
    Rng rng(15);
    Vem<float> vem({lv.input, lv.target, lv.channels, model.dim}, rng);
    const auto& i = lv.input;
    const auto out = vem.forward(random_float({i[0], i[1], i[2], i[3], lv.channels}, data, 0, 1));
    CHECK(out.shape() == Shape{lv.target[0], lv.target[1], lv.target[2], lv.target[3], model.dim});
  }
}

TEST_CASE("VEM full-scale coarsest level is 8x8x8x8x128") {
  const auto model = full_preset().model;
  const auto enc = model.encoder();
  const auto& lv = enc.levels.front();
  CHECK(lv.level == 5);
  Vem<float>::check({lv.input, lv.target, lv.channels, model.dim});
  CHECK(lv.input == Extents4{8, 8, 8, 8});
  CHECK(lv.target == Extents4{8, 8, 8, 8});
  CHECK(model.dim == 128);
}

TEST_CASE("VEM rejects irreducible schedules before allocating") {
  CHECK_THROWS_AS(Vem<float>::check({{6, 6, 4, 4}, {4, 4, 4, 4}, 1, 16}), ConfigError);
  CHECK_THROWS_AS(Vem<float>::check({{4, 4, 4, 4}, {8, 8, 4, 4}, 1, 16}), ConfigError);
  CHECK_THROWS_AS(Vem<float>::check({{8, 8, 4, 4}, {4, 4, 4, 4}, 1, 6}), ConfigError);
}
