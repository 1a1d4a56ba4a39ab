#include <gtest/gtest.h>

#include <cmath>

#include "maskforge/gradcheck.hpp"
#include "maskforge/ops.hpp"
#include "test_support.hpp"

using namespace maskforge;
using maskforge::testing::gradient_error;
using maskforge::testing::probe;
using maskforge::testing::random_tensor;
using dt = basic_tensor<double>;

TEST(Primitives, MatmulByIdentity) {
  tensor eye({2, 2}, {1, 0, 0, 1});
  tensor m({2, 2}, {1, 2, 3, 4});
  auto out = matmul(eye, m);
  EXPECT_EQ(out.values(), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Primitives, SoftmaxOfUniformLogits) {
  auto out = softmax(tensor::zeros({4}));
  for (float v : out.values()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Primitives, LayerNormOfConstantIsZero) {
  auto out = layer_norm(tensor::full({1, 5}, 3.0f), tensor::ones({5}), tensor::zeros({5}));
  for (float v : out.values()) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(Primitives, DepthwiseConvSamePadding) {
  // one channel, kernel [1, 2, 3]: out[t] = x[t-1] + 2 x[t] + 3 x[t+1]
  tensor x({1, 3, 1}, {1, 2, 3});
  tensor w({1, 3}, {1, 2, 3});
  auto y = depthwise_conv1d(x, w);
  EXPECT_EQ(y.values(), (std::vector<float>{0 + 2 + 6, 1 + 4 + 9, 2 + 6 + 0}));
}

TEST(Primitives, GluAndClamp) {
  tensor x({1, 2}, {2.0f, 0.0f});
  EXPECT_FLOAT_EQ(glu(x).item(), 1.0f);
  auto c = clamp(tensor({3}, {-2, 0.5, 7}), 0.0, 1.0);
  EXPECT_EQ(c.values(), (std::vector<float>{0, 0.5, 1}));
}

TEST(Primitives, ShapeMismatchNamesOpAndShapes) {
  try {
    matmul(tensor::zeros({2, 3}), tensor::zeros({4, 5}));
    FAIL() << "expected shape_error";
  } catch (const shape_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,5]"), std::string::npos);
  }
  EXPECT_THROW(add(tensor::zeros({2, 3}), tensor::zeros({2})), shape_error);
  EXPECT_THROW(glu(tensor::zeros({3})), shape_error);
}

TEST(Primitives, DebugModeRejectsNonFinite) {
  set_debug_checks(true);
  EXPECT_THROW(sigmoid(tensor({1}, {std::nanf("")})), numeric_error);
  set_debug_checks(false);
  EXPECT_NO_THROW(sigmoid(tensor({1}, {std::nanf("")})));
}

TEST(Primitives, ZeroExtentsFlowThrough) {
  auto x = tensor::ones({2, 3, 0}, true);
  auto w = tensor::ones({0, 4}, true);
  auto y = add(matmul(x, w), tensor::ones({4}));
  ASSERT_EQ(y.shape(), (shape_t{2, 3, 4}));
  for (float v : y.values()) EXPECT_EQ(v, 1.0f);
  backward(sum(y));
  EXPECT_EQ(x.grad().size(), 0u);
}

TEST(Backward, SumGivesOnes) {
  auto x = tensor({3}, {1, 2, 3}, true);
  backward(sum(x));
  EXPECT_EQ(std::vector<float>(x.grad().begin(), x.grad().end()), (std::vector<float>{1, 1, 1}));
}

TEST(Backward, SquareAtThree) {
  auto x = tensor::scalar(3.0f, true);
  backward(mul(x, x));
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
}

TEST(Backward, RejectsNonScalarRoot) {
  auto x = tensor::ones({2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), shape_error);
}

TEST(Backward, FanOutAccumulates) {
  auto x = tensor::scalar(2.0f, true);
  auto y = add(mul(x, x), scale(x, 3.0));  // x^2 + 3x
  backward(y);
  EXPECT_FLOAT_EQ(x.grad()[0], 7.0f);
}

TEST(Backward, SecondSweepDoublesLeafGradients) {
  auto g = make_rng(5, stream::benchmark);
  auto x = random_tensor<double>({3, 4}, g);
  auto w = random_tensor<double>({4, 2}, g);
  auto loss = sum(swish(matmul(x, w)));
  backward(loss);
  std::vector<double> first(w.grad().begin(), w.grad().end());
  backward(loss);
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 2.0 * first[i]);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = tensor::ones({2}, true);
  no_grad_guard guard;
  auto y = sum(x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteDifference, SumIsOnes) {
  auto g = make_rng(1, stream::benchmark);
  auto x = random_tensor<double>({5}, g);
  auto fd = finite_difference_gradient([&] { return sum(x).item(); }, x, 1e-3);
  for (double v : fd.values()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, QuadraticIsExact) {
  dt x({2}, {1.0, 2.0});
  auto fd = finite_difference_gradient([&] { return sum(mul(x, x)).item(); }, x, 1e-3);
  EXPECT_NEAR(fd.values()[0], 2.0, 1e-6);
  EXPECT_NEAR(fd.values()[1], 4.0, 1e-6);
}

// Randomized shapes (<= 16 per axis) per primitive, double precision.
class PrimitiveGradients : public ::testing::TestWithParam<int> {
 protected:
  rng g = make_rng(static_cast<std::uint64_t>(GetParam()), stream::benchmark);
  std::size_t extent() { return 1 + static_cast<std::size_t>(uniform01(g) * 16); }
  static constexpr double step = 1e-5;
  static constexpr double tol = 1e-5;
};

TEST_P(PrimitiveGradients, Elementwise) {
  const shape_t s{extent(), extent()};
  auto a = random_tensor<double>(s, g);
  auto b = random_tensor<double>(s, g);
  auto row = random_tensor<double>({s[1]}, g);
  auto c = random_tensor<double>({1}, g);
  EXPECT_LT(gradient_error<double>([&] { return probe(add(a, row)); }, {a, row}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(sub(a, b)); }, {a, b}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(mul(a, row)); }, {a, row}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(mul(a, c)); }, {a, c}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(shift(scale(a, -1.7), 0.3)); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(sigmoid(a)); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(swish(a)); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(relu(a)); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(clamp(a, -0.5, 0.5)); }, {a}, step), tol);
}

TEST_P(PrimitiveGradients, ShapeOps) {
  const std::size_t n0 = extent(), n1 = extent(), n2 = extent();
  auto a = random_tensor<double>({n0, n1, n2}, g);
  auto b = random_tensor<double>({n0, extent(), n2}, g);
  auto v = random_tensor<double>({n1, 1}, g);
  const std::size_t lo = n1 / 3, hi = std::max(lo + 1, n1);
  EXPECT_LT(gradient_error<double>([&] { return probe(concat<double>({a, b}, 1)); }, {a, b}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(slice(a, 1, lo, hi)); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(transpose(a, {2, 0, 1})); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(transpose(a)); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(reshape(a, {n0 * n1, n2})); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(broadcast(v, {n0, n1, n2})); }, {v}, step), tol);
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < n2; j += 2) idx.push_back(j);
  EXPECT_LT(gradient_error<double>([&] { return probe(gather_last(a, idx)); }, {a}, step), tol);
  auto narrow = random_tensor<double>({n0, n1, idx.size()}, g);
  EXPECT_LT(gradient_error<double>([&] { return probe(scatter_last(narrow, idx, n2)); }, {narrow}, step), tol);
}

TEST_P(PrimitiveGradients, LinearAlgebraAndNorms) {
  const std::size_t B = extent() % 4 + 1, m = extent(), k = extent(), n = extent();
  auto a = random_tensor<double>({B, m, k}, g);
  auto w = random_tensor<double>({k, n}, g);
  auto bb = random_tensor<double>({B, k, n}, g);
  EXPECT_LT(gradient_error<double>([&] { return probe(matmul(a, w)); }, {a, w}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(matmul(a, bb)); }, {a, bb}, step), tol);

  const std::size_t C = extent(), K = 2 * (extent() % 3) + 1;
  auto x = random_tensor<double>({B, m, C}, g);
  auto dw = random_tensor<double>({C, K}, g);
  EXPECT_LT(gradient_error<double>([&] { return probe(depthwise_conv1d(x, dw)); }, {x, dw}, step), tol);

  auto gamma = random_tensor<double>({C}, g, 0.5, 1.5);
  auto beta = random_tensor<double>({C}, g);
  EXPECT_LT(gradient_error<double>([&] { return probe(layer_norm(x, gamma, beta)); }, {x, gamma, beta}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(layer_norm(x, gamma, beta, 1e-5, C + 3)); }, {x, gamma, beta}, step), tol);

  auto s = random_tensor<double>({B, m, 2 * C}, g, -2, 2);
  EXPECT_LT(gradient_error<double>([&] { return probe(glu(s)); }, {s}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(softmax(s, -1)); }, {s}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return probe(softmax(s, 1)); }, {s}, step), tol);
}

TEST_P(PrimitiveGradients, ReductionsAndLosses) {
  const std::size_t rows = extent(), K = extent() + 1;
  auto a = random_tensor<double>({rows, K}, g);
  auto b = random_tensor<double>({rows, K}, g);
  std::vector<int> labels(rows);
  for (auto& y : labels) y = static_cast<int>(uniform01(g) * static_cast<double>(K));
  EXPECT_LT(gradient_error<double>([&] { return sum(a); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return mean(a); }, {a}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return mse(a, b); }, {a, b}, step), tol);
  EXPECT_LT(gradient_error<double>([&] { return cross_entropy_with_logits(a, std::span<const int>(labels)); }, {a}, step), tol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range(0, 6));

TEST(CompositeGraph, ThreeLayerMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto g = make_rng(seed, stream::benchmark);
    auto x = random_tensor<double>({2, 5, 6}, g);
    auto w1 = random_tensor<double>({6, 8}, g);
    auto w2 = random_tensor<double>({8, 8}, g);
    auto w3 = random_tensor<double>({4, 3}, g);
    auto gamma = random_tensor<double>({8}, g, 0.5, 1.5);
    auto beta = random_tensor<double>({8}, g);
    auto target = random_tensor<double>({2, 5, 3}, g, 0, 1, false);
    auto loss = [&] {
      auto h = swish(matmul(x, w1));
      h = layer_norm(matmul(h, w2), gamma, beta);
      auto y = softmax(matmul(glu(h), w3));
      return mse(y, target);
    };
    EXPECT_LT(gradient_error<double>(loss, {x, w1, w2, w3, gamma, beta}, 1e-3), 1e-3) << "seed " << seed;
  }
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  auto run = [] {
    auto g = make_rng(11, stream::benchmark);
    auto x = random_tensor<float>({4, 16, 16}, g);
    auto w = random_tensor<float>({16, 16}, g);
    auto y = softmax(layer_norm(matmul(x, w), tensor::ones({16}), tensor::zeros({16})));
    backward(sum(mul(y, y)));
    return std::make_pair(y.values(), std::vector<float>(w.grad().begin(), w.grad().end()));
  };
  EXPECT_EQ(run(), run());
}

TEST(FlopCounter, CountsMatmulAndDepthwise) {
  flop_counter counter;
  matmul(tensor::zeros({3, 4}), tensor::zeros({4, 5}));
  depthwise_conv1d(tensor::zeros({2, 7, 3}), tensor::zeros({3, 5}));
  EXPECT_EQ(counter.count(), 2u * 3 * 4 * 5 + 2u * 2 * 7 * 3 * 5);
}
