#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gradcheck.hpp"
#include "vat/config.hpp"
#include "vat/encoder.hpp"
#include "vat/errors.hpp"

using namespace vat;
using vat::testing::gradcheck;
using vat::testing::random_float;
using vat::testing::random_tensor;

namespace {

template <typename T>
void randomize(const ParamSet<T>& params, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (const auto& [_, t] : params.entries()) {
    Tensor<T> h = t;
    for (auto& v : h.data()) v = T(dist(rng));
  }
}

template <typename T>
std::vector<Tensor<T>> random_inputs(const EncoderConfig& config, std::mt19937_64& rng) {
  std::vector<Tensor<T>> out;
  for (const auto& level : config.levels) {
    Shape s(level.input.begin(), level.input.end());
    s.push_back(level.channels);
    auto t = Tensor<T>::zeros(s);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data()) v = T(dist(rng));
    out.push_back(t);
  }
  return out;
}

EncoderConfig small_config(Aggregator aggregator = Aggregator::kVtm) {
  EncoderConfig c;
  c.dim = 8;
  c.heads = 2;
  c.window = 2;
  c.aggregator = aggregator;
  c.levels = {{5, {4, 4, 4, 4}, {2, 2, 2, 2}, 1, 2}, {4, {4, 4, 4, 4}, {4, 4, 2, 2}, 2, 2}};
  return c;
}

}  // namespace

TEST_CASE("upsample of a constant volume stays constant") {
  auto x = Tensor<float>::full({2, 2, 3, 3, 4}, 0.7f);
  auto y = upsample_guidance(x, {4, 4, 3, 3, 4});
  CHECK(y.shape() == Shape{4, 4, 3, 3, 4});
  for (float v : y.data()) CHECK(v == doctest::Approx(0.7f));
}

TEST_CASE("upsample of a 2x2 ramp matches the half-pixel oracle") {
  auto x = Tensor<double>::from({2, 2, 1, 1, 1}, {0, 1, 1, 2});
  auto y = upsample_guidance(x, {4, 4, 1, 1, 1});
  const double s[4] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(y.data()[i * 4 + j] == doctest::Approx(s[i] + s[j]).epsilon(1e-12));
}

TEST_CASE("upsample leaves support axes untouched") {
  std::mt19937_64 rng(1);
  auto x = random_float({8, 8, 4, 4, 3}, rng);
  auto y = upsample_guidance(x, {16, 16, 4, 4, 3});
  CHECK(y.shape() == Shape{16, 16, 4, 4, 3});
  // Every query cell of y is a convex blend of query cells of x, so each
  // support slice stays within the per-slice range of x.
  for (std::size_t s = 0; s < 4 * 4 * 3; ++s) {
    float lo = 1e9f, hi = -1e9f;
    for (std::size_t q = 0; q < 64; ++q) {
      lo = std::min(lo, x.data()[q * 48 + s]);
      hi = std::max(hi, x.data()[q * 48 + s]);
    }
    for (std::size_t q = 0; q < 256; ++q) {
      CHECK(y.data()[q * 48 + s] >= lo - 1e-6f);
      CHECK(y.data()[q * 48 + s] <= hi + 1e-6f);
    }
  }
  CHECK(upsample_guidance(x, {8, 8, 4, 4, 3}).to_vector() == x.to_vector());
}

TEST_CASE("upsample rejects mismatched support extents or channels") {
  auto x = Tensor<float>::zeros({2, 2, 4, 4, 3});
  CHECK_THROWS_AS(upsample_guidance(x, {4, 4, 2, 4, 3}), ShapeError);
  CHECK_THROWS_AS(upsample_guidance(x, {4, 4, 4, 4, 5}), ShapeError);
}

TEST_CASE("gradcheck: guidance upsampling") {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 3, 2, 2, 2}, rng);
  CHECK(gradcheck([](const auto& v) { return upsample_guidance(v[0], {4, 5, 2, 2, 2}); }, {x}) <= 1e-6);
}

TEST_CASE("single-level encoder equals VTM of VEM") {
  EncoderConfig c = small_config();
  c.levels.resize(1);
  Rng rng(3);
  Encoder<double> enc(c, rng);
  ParamSet<double> params;
  enc.collect(params, "enc");
  randomize(params, 4, 0.3);
  std::mt19937_64 data(5);
  auto inputs = random_inputs<double>(c, data);
  const auto expected = enc.vtm(0).forward(enc.vem(0).forward(inputs[0]));
  CHECK(enc.forward(inputs).to_vector() == expected.to_vector());
}

TEST_CASE("coarse levels feed the finest output") {
  for (auto agg : {Aggregator::kVtm, Aggregator::kConv4d, Aggregator::kIdentity}) {
    CAPTURE(to_string(agg));
    auto c = small_config(agg);
    Rng rng(6);
    Encoder<double> enc(c, rng);
    ParamSet<double> params;
    enc.collect(params, "enc");
    randomize(params, 7, 0.3);
    std::mt19937_64 data(8);
    auto inputs = random_inputs<double>(c, data);
    auto base = enc.forward(inputs);
    CHECK(base.shape() == Shape{4, 4, 2, 2, 8});
    std::fill(inputs[0].data().begin(), inputs[0].data().end(), 0.0);
    CHECK(enc.forward(inputs).to_vector() != base.to_vector());
  }
}

TEST_CASE("every encoder parameter receives a gradient") {
  for (auto agg : {Aggregator::kVtm, Aggregator::kConv4d}) {
    CAPTURE(to_string(agg));
    auto c = small_config(agg);
    Rng rng(9);
    Encoder<double> enc(c, rng);
    ParamSet<double> params;
    enc.collect(params, "enc");
    randomize(params, 10, 0.3);
    std::mt19937_64 data(11);
    auto inputs = random_inputs<double>(c, data);
    auto out = enc.forward(inputs);
    auto weights = random_tensor(out.shape(), data, -1, 1, false);
    backward(ops::sum(ops::mul(out, weights)));
    for (const auto& [name, t] : params.entries()) {
      CAPTURE(name);
      const auto& g = t.grad();
      REQUIRE(g.size() == t.numel());
      CHECK(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; }));
    }
  }
}

TEST_CASE("identity aggregator has no transformer or convolution parameters") {
  Rng rng(12);
  Encoder<float> enc(small_config(Aggregator::kIdentity), rng);
  ParamSet<float> params;
  enc.collect(params, "enc");
  for (const auto& [name, _] : params.entries()) {
    CHECK(name.find(".vtm") == std::string::npos);
    CHECK(name.find(".conv4d") == std::string::npos);
  }
}

TEST_CASE("encoder is deterministic for a fixed seed") {
  auto c = small_config();
  Rng r1(13), r2(13);
  Encoder<float> a(c, r1), b(c, r2);
  std::mt19937_64 data(14);
  auto inputs = random_inputs<float>(c, data);
  CHECK(a.forward(inputs).to_vector() == b.forward(inputs).to_vector());
}

TEST_CASE("encoder rejects inconsistent level chains") {
  auto c = small_config();
  c.levels[1].target = {4, 4, 4, 4};  // support extents differ from the coarser level
  CHECK_THROWS(Encoder<float>::check(c));
  c = small_config();
  c.window = 3;
  CHECK_THROWS_AS(Encoder<float>::check(c), ConfigError);
  c = small_config();
  Rng rng(15);
  Encoder<float> enc(c, rng);
  std::mt19937_64 data(16);
  auto inputs = random_inputs<float>(c, data);
  inputs.pop_back();
  CHECK_THROWS(enc.forward(inputs));
}

TEST_CASE("desk encoder output shape") {
  const auto c = desk_preset().model.encoder();
  Rng rng(17);
  Encoder<float> enc(c, rng);
  std::mt19937_64 data(18);
  auto out = enc.forward(random_inputs<float>(c, data));
  const auto& last = c.levels.back();
  CHECK(out.shape() == Shape{last.target[0], last.target[1], last.target[2], last.target[3], c.dim});
  CHECK(out.shape() == Shape{8, 8, 4, 4, 16});
}

TEST_CASE("full-scale encoder shapes (symbolic)") {
  const auto model = full_preset().model;
  CHECK_NOTHROW(Encoder<float>::check(model.encoder()));
  const auto trace = shape_trace(model);
  auto find = [&](const std::string& name) {
    for (const auto& [n, s] : trace)
      if (n == name) return s;
    FAIL("missing " << name);
    return Shape{};
  };
  CHECK(find("level5.aggregated") == Shape{8, 8, 8, 8, 128});
  CHECK(find("level4.aggregated") == Shape{16, 16, 8, 8, 128});
  CHECK(find("level3.aggregated") == Shape{32, 32, 8, 8, 128});
  CHECK(find("level4.guidance") == Shape{16, 16, 8, 8, 128});
}
