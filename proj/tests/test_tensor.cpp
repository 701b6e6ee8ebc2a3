#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "vat/errors.hpp"
#include "vat/memory.hpp"

using namespace vat;
using vat::testing::gradcheck;
using vat::testing::random_tensor;

namespace {
constexpr double kOpTolerance = 1e-5;
}

TEST_CASE("relu and softmax basics") {
  auto x = Tensor<float>::from({3}, {-1, 0, 2});
  CHECK(ops::relu(x).to_vector() == std::vector<float>{0, 0, 2});
  CHECK(ops::softmax(Tensor<float>::from({1}, {3.5f})).item() == 1.0f);
}

TEST_CASE("matmul with identity returns the other operand") {
  std::mt19937_64 rng(3);
  auto a = random_tensor({3, 3}, rng, -1, 1, false);
  auto eye = Tensor<double>::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.data()[i * 4] = 1;
  CHECK(ops::matmul(eye, a).to_vector() == a.to_vector());
}

TEST_CASE("backward of simple reductions") {
  auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(ops::sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  auto y = Tensor<double>::from({3}, {1, 2, 3}, true);
  backward(ops::sum(ops::mul(y, y)));
  CHECK(y.to_vector() == std::vector<double>{1, 2, 3});
  CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{2, 4, 6});

  std::mt19937_64 rng(5);
  auto z = random_tensor({2, 5}, rng);
  backward(ops::sum(ops::softmax(z)));
  for (double g : z.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("gradients accumulate across backward calls") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  backward(ops::sum(x));
  backward(ops::sum(x));
  CHECK(x.grad()[0] == 2.0);
  x.zero_grad();
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("a node reused by several consumers is visited once") {
  auto x = Tensor<double>::from({1}, {3}, true);
  auto y = ops::mul(x, x);
  auto z = ops::add(y, y);  // 2x^2 -> 4x
  backward(ops::sum(z));
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("backward rejects a non-scalar root") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(ops::relu(x)), ShapeError);
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = ops::relu(x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("shape errors name the op and both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({3, 2});
  try {
    (void)ops::add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("3x2") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ops::reshape(a, {4, 2}), ShapeError);
  CHECK_THROWS_AS(ops::permute(a, {0, 0}), ShapeError);
  CHECK_THROWS_AS(ops::slice(a, 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(ops::concat<float>({a, b}, 0), ShapeError);
  CHECK_THROWS_AS(ops::softmax_cross_entropy(a, std::vector<int>{0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::zeros({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::from({2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("non-finite values are rejected") {
  auto x = Tensor<float>::from({2}, {1, std::numeric_limits<float>::infinity()});
  CHECK_THROWS_AS(ops::relu(x), NumericError);
  auto big = Tensor<float>::from({1}, {1e30f});
  CHECK_THROWS_AS(ops::mul(big, big), NumericError);
}

TEST_CASE("forward replay is bitwise deterministic") {
  std::mt19937_64 rng(9);
  auto x = vat::testing::random_float({4, 6}, rng);
  auto w = vat::testing::random_float({6, 5}, rng);
  auto run = [&] { return ops::softmax(ops::gelu(ops::matmul(x, w))).to_vector(); };
  CHECK(run() == run());
}

TEST_CASE("group norm statistics per group") {
  std::mt19937_64 rng(11);
  auto x = random_tensor({3, 4, 8}, rng, -3, 5, false);
  auto y = ops::group_norm<double>(x, 4, nullptr, nullptr);
  const std::size_t rows = 12, c = 8, per = 2;
  for (std::size_t g = 0; g < 4; ++g) {
    double sum = 0, sq = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = g * per; k < (g + 1) * per; ++k) sum += y.data()[r * c + k];
    }
    const double mean = sum / double(rows * per);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = g * per; k < (g + 1) * per; ++k) sq += std::pow(y.data()[r * c + k] - mean, 2);
    }
    CHECK(std::abs(mean) <= 1e-5);
    CHECK(std::abs(sq / double(rows * per) - 1.0) <= 1e-4);
  }
}

TEST_CASE("group norm rejects indivisible channel counts") {
  auto x = Tensor<double>::zeros({2, 6});
  CHECK_THROWS_AS(ops::group_norm<double>(x, 4, nullptr, nullptr), ShapeError);
}

TEST_CASE("bilinear resize matches the half-pixel oracle") {
  auto x = Tensor<double>::from({2, 2}, {0, 1, 1, 2});
  auto y = ops::resize_bilinear(x, 4, 4);
  const std::vector<double> expected{0, .25, .75, 1, .25, .5, 1, 1.25, .75, 1, 1.5, 1.75, 1, 1.25, 1.75, 2};
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(y.data()[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  auto c = ops::resize_bilinear(Tensor<double>::full({3, 5, 2}, 0.7), 6, 10);
  for (double v : c.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("cross entropy of uniform logits is log K") {
  auto logits = Tensor<double>::zeros({4, 2});
  std::vector<int> labels{0, 1, 1, 0};
  CHECK(ops::softmax_cross_entropy(logits, labels).item() == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(ops::softmax_cross_entropy(logits, std::vector<int>{0, 1, 2, 0}), ShapeError);
}

TEST_CASE("allocator shim accounts every tensor buffer") {
  const std::size_t before = memory::live_bytes();
  {
    auto a = Tensor<float>::zeros({100, 10});
    auto b = Tensor<double>::zeros({7, 3});
    const std::size_t expected = 1000 * sizeof(float) + 21 * sizeof(double);
    const double delta = double(memory::live_bytes() - before);
    CHECK(std::abs(delta - double(expected)) <= 0.01 * double(expected));
  }
  CHECK(memory::live_bytes() == before);
}

// ---- finite-difference checks, every op, several ranks ----

TEST_CASE("gradcheck: elementwise ops over ranks 1-5") {
  std::mt19937_64 rng(21);
  const std::vector<Shape> shapes{{5}, {3, 4}, {2, 3, 2}, {2, 2, 2, 3}, {2, 1, 2, 2, 3}};
  for (const auto& s : shapes) {
    CAPTURE(to_string(s));
    auto a = random_tensor(s, rng);
    auto b = random_tensor(s, rng);
    CHECK(gradcheck([](const auto& x) { return ops::add(x[0], x[1]); }, {a, b}) <= kOpTolerance);
    CHECK(gradcheck([](const auto& x) { return ops::sub(x[0], x[1]); }, {a, b}) <= kOpTolerance);
    CHECK(gradcheck([](const auto& x) { return ops::mul(x[0], x[1]); }, {a, b}) <= kOpTolerance);
    CHECK(gradcheck([](const auto& x) { return ops::scale(x[0], 2.5); }, {a}) <= kOpTolerance);
    CHECK(gradcheck([](const auto& x) { return ops::sigmoid(x[0]); }, {a}) <= kOpTolerance);
    CHECK(gradcheck([](const auto& x) { return ops::gelu(x[0]); }, {a}) <= kOpTolerance);
    CHECK(gradcheck([](const auto& x) { return ops::softmax(x[0]); }, {a}) <= kOpTolerance);
    CHECK(gradcheck([](const auto& x) { return ops::sum(x[0]); }, {a}) <= kOpTolerance);
    CHECK(gradcheck([](const auto& x) { return ops::mean(x[0]); }, {a}) <= kOpTolerance);
    auto bias = random_tensor({s.back()}, rng);
    CHECK(gradcheck([](const auto& x) { return ops::add_bias(x[0], x[1]); }, {a, bias}) <= kOpTolerance);
  }
}

TEST_CASE("gradcheck: relu away from the kink") {
  std::mt19937_64 rng(22);
  auto a = random_tensor({4, 5}, rng);
  for (auto& v : a.data()) v += v > 0 ? 0.1 : -0.1;
  CHECK(gradcheck([](const auto& x) { return ops::relu(x[0]); }, {a}) <= kOpTolerance);
}

TEST_CASE("gradcheck: products") {
  std::mt19937_64 rng(23);
  CHECK(gradcheck([](const auto& x) { return ops::matmul(x[0], x[1]); }, {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}) <=
        kOpTolerance);
  CHECK(gradcheck([](const auto& x) { return ops::bmm(x[0], x[1]); },
                  {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)}) <= kOpTolerance);
  CHECK(gradcheck([](const auto& x) { return ops::bmm(x[0], x[1], true); },
                  {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)}) <= kOpTolerance);
  CHECK(gradcheck([](const auto& x) { return ops::linear(x[0], x[1], &x[2]); },
                  {random_tensor({2, 3, 4}, rng), random_tensor({4, 3}, rng), random_tensor({3}, rng)}) <= kOpTolerance);
}

TEST_CASE("gradcheck: shape ops") {
  std::mt19937_64 rng(24);
  auto a = random_tensor({2, 3, 4}, rng);
  CHECK(gradcheck([](const auto& x) { return ops::reshape(x[0], {4, 6}); }, {a}) <= kOpTolerance);
  CHECK(gradcheck([](const auto& x) { return ops::permute(x[0], {2, 0, 1}); }, {a}) <= kOpTolerance);
  CHECK(gradcheck([](const auto& x) { return ops::pad(x[0], {{1, 0}, {0, 2}, {1, 1}}); }, {a}) <= kOpTolerance);
  CHECK(gradcheck([](const auto& x) { return ops::slice(x[0], 1, 1, 2); }, {a}) <= kOpTolerance);
  auto b = random_tensor({2, 2, 4}, rng);
  CHECK(gradcheck([](const auto& x) { return ops::concat<double>({x[0], x[1]}, 1); }, {a, b}) <= kOpTolerance);
  const std::vector<std::size_t> index{5, 0, 0, 3};
  CHECK(gradcheck([&](const auto& x) { return ops::gather_rows(x[0], index, {2, 2, 4}); }, {a}) <= kOpTolerance);
}

TEST_CASE("gradcheck: axis reductions") {
  std::mt19937_64 rng(25);
  auto a = random_tensor({3, 4, 5}, rng);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    CAPTURE(axis);
    CHECK(gradcheck([axis](const auto& x) { return ops::sum(x[0], axis); }, {a}) <= kOpTolerance);
    CHECK(gradcheck([axis](const auto& x) { return ops::mean(x[0], axis); }, {a}) <= kOpTolerance);
    CHECK(gradcheck([axis](const auto& x) { return ops::max(x[0], axis); }, {a}) <= kOpTolerance);
  }
}

TEST_CASE("gradcheck: normalization") {
  std::mt19937_64 rng(26);
  auto x = random_tensor({3, 4, 8}, rng, -2, 2);
  auto g = random_tensor({8}, rng, 0.5, 1.5);
  auto b = random_tensor({8}, rng);
  CHECK(gradcheck([](const auto& v) { return ops::layer_norm(v[0], v[1], v[2]); }, {x, g, b}) <= kOpTolerance);
  CHECK(gradcheck([](const auto& v) { return ops::group_norm(v[0], 4, &v[1], &v[2]); }, {x, g, b}) <= kOpTolerance);
  CHECK(gradcheck([](const auto& v) { return ops::group_norm<double>(v[0], 2, nullptr, nullptr); }, {x}) <= kOpTolerance);
  CHECK(gradcheck([](const auto& v) { return ops::l2_normalize(v[0], 1e-8); }, {x}) <= kOpTolerance);
  CHECK(gradcheck([](const auto& v) { return ops::row_norm(v[0]); }, {x}) <= kOpTolerance);
}

TEST_CASE("gradcheck: bilinear resize and cross entropy") {
  std::mt19937_64 rng(27);
  CHECK(gradcheck([](const auto& x) { return ops::resize_bilinear(x[0], 6, 4); }, {random_tensor({3, 2, 2}, rng)}) <=
        kOpTolerance);
  CHECK(gradcheck([](const auto& x) { return ops::resize_bilinear(x[0], 2, 3); }, {random_tensor({5, 7}, rng)}) <=
        kOpTolerance);
  const std::vector<int> labels{1, 0, 2};
  CHECK(gradcheck([&](const auto& x) { return ops::softmax_cross_entropy(x[0], labels); }, {random_tensor({3, 3}, rng)}) <=
        kOpTolerance);
}
