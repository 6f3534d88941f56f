#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "metaphor/tensor.hpp"
#include "support.hpp"

using namespace metaphor;
using testing_support::random_tensor;

TEST(Tensor, ShallowCopiesShareStorageAndCloneDoesNot) {
  Tensor<double> a = Tensor<double>::vector({1, 2, 3});
  Tensor<double> b = a;
  Tensor<double> c = a.clone();
  b[0] = 10;
  EXPECT_EQ(a[0], 10);
  EXPECT_EQ(c[0], 1);
}

TEST(Tensor, RejectsMismatchedValueCount) {
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor<double>::matrix({{1, 2}, {3}}), DimensionError);
}

TEST(Tensor, ItemNeedsOneValue) {
  EXPECT_EQ(Tensor<double>::scalar(4.5).item(), 4.5);
  EXPECT_THROW(Tensor<double>::vector({1, 2}).item(), ContractError);
}

TEST(Ops, MatmulMatchesTripleLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.index(6), k = 1 + rng.index(6), n = 1 + rng.index(6);
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    Graph<double> g;
    auto c = matmul(g, a, b);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
        EXPECT_NEAR(c.at(i, j), s, 1e-12);
      }
    }
  }
}

TEST(Ops, MatmulShapeErrors) {
  Graph<double> g;
  EXPECT_THROW(matmul(g, Tensor<double>({2, 3}), Tensor<double>({2, 3})), DimensionError);
}

TEST(Ops, ElementwiseBroadcastsScalars) {
  Graph<double> g;
  auto a = Tensor<double>::vector({1, 2, 3});
  auto s = Tensor<double>::scalar(2);
  auto y = mul(g, a, s);
  EXPECT_EQ(y[2], 6);
  EXPECT_THROW(add(g, a, Tensor<double>::vector({1, 2})), DimensionError);
}

TEST(Ops, ActivationsMatchClosedForms) {
  Graph<double> g;
  auto x = Tensor<double>::vector({-3, -0.5, 0, 0.5, 3});
  auto t = tanh(g, x), s = sigmoid(g, x), r = relu(g, x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(t[i], std::tanh(x[i]), 1e-15);
    EXPECT_NEAR(s[i], 1.0 / (1.0 + std::exp(-x[i])), 1e-15);
    EXPECT_EQ(r[i], std::max(0.0, x[i]));
  }
}

TEST(Ops, SigmoidStaysFiniteForLargeInputs) {
  // saturates inside the open interval, so probabilities never reach 0 or 1
  EXPECT_EQ(stable_sigmoid(1000.0), std::nextafter(1.0, 0.0));
  EXPECT_EQ(stable_sigmoid(-1000.0), std::numeric_limits<double>::min());
  EXPECT_LT(stable_sigmoid(40.0), 1.0);
  EXPECT_GT(stable_sigmoid(-40.0), 0.0);
}

TEST(Ops, ConcatAndSliceAreInverse) {
  Rng rng(5);
  auto a = random_tensor({3, 2}, rng), b = random_tensor({3, 4}, rng);
  Graph<double> g;
  auto c = concat(g, {a, b}, 1);
  ASSERT_EQ(c.shape(), (Shape{3, 6}));
  auto a2 = slice(g, c, 1, 0, 2), b2 = slice(g, c, 1, 2, 6);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a2[i], a[i]);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(b2[i], b[i]);
}

TEST(Ops, ShiftRowsFillsWithZeros) {
  Graph<double> g;
  auto x = Tensor<double>::matrix({{1, 2}, {3, 4}, {5, 6}});
  auto down = shift_rows(g, x, 1);
  auto up = shift_rows(g, x, -1);
  EXPECT_EQ(down.at(0, 0), 0);
  EXPECT_EQ(down.at(1, 0), 1);
  EXPECT_EQ(down.at(2, 1), 4);
  EXPECT_EQ(up.at(0, 0), 3);
  EXPECT_EQ(up.at(2, 0), 0);
}

TEST(Autograd, GradientOfWeightedSumIsTheWeights) {
  Rng rng(9);
  auto x = random_tensor({4, 3}, rng, -1, 1, true);
  auto w = random_tensor({4, 3}, rng);
  Graph<double> g;
  auto loss = sum(g, mul(g, x, w));
  g.backward(loss);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x.grad()[i], w[i]);
}

TEST(Autograd, SharedInputAccumulatesBothPaths) {
  auto x = Tensor<double>::vector({2.0});
  x.set_requires_grad(true);
  Graph<double> g;
  auto y = add(g, mul(g, x, x), scale(g, x, 3.0));  // x² + 3x
  g.backward(sum(g, y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 2.0 + 3);
}

TEST(Autograd, InferenceGraphRecordsNothing) {
  auto x = Tensor<double>::vector({1, 2});
  x.set_requires_grad(true);
  Graph<double> g = Graph<double>::inference();
  auto y = sum(g, tanh(g, x));
  EXPECT_EQ(g.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, TapeIsTopologicallyOrderedAndFullyVisited) {
  Rng rng(1);
  auto x = random_tensor({2, 3}, rng, -1, 1, true);
  auto w = random_tensor({3, 2}, rng, -1, 1, true);
  Graph<double> g;
  auto loss = sum(g, tanh(g, matmul(g, x, w)));
  EXPECT_TRUE(g.topologically_ordered());
  g.backward(loss);
  EXPECT_EQ(g.last_visit_count(), g.size());
}

TEST(Autograd, BackwardNeedsAScalar) {
  Graph<double> g;
  auto x = Tensor<double>::vector({1, 2});
  x.set_requires_grad(true);
  auto y = tanh(g, x);
  EXPECT_THROW(g.backward(y), ContractError);
}

TEST(GradCheck, RelativeErrorMetric) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1.0, 3.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
}

TEST(GradCheck, AcceptsCorrectGradientsOnRandomCompositions) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({3, 4}, rng, -1, 1);
    auto b = random_tensor({4, 2}, rng, -1, 1);
    auto r = grad_check(
        [&](Graph<double>& g) { return sum(g, mul(g, sigmoid(g, matmul(g, a, b)), tanh(g, matmul(g, a, b)))); },
        std::vector<Tensor<double>>{a, b}, 1e-5);
    EXPECT_LT(r.max_relative_error, 1e-6);
    EXPECT_EQ(r.coordinates, a.size() + b.size());
  }
}

TEST(GradCheck, RejectsAWrongGradient) {
  // scale() by a constant, checked through a function that secretly changes
  // the constant between evaluations, cannot be matched by the tape.
  auto x = Tensor<double>::vector({0.3, -0.7});
  int calls = 0;
  auto r = grad_check(
      [&](Graph<double>& g, const Tensor<double>& v) {
        const double c = calls++ == 0 ? 1.0 : 2.0;
        return sum(g, scale(g, v, c));
      },
      x);
  EXPECT_GT(r.max_relative_error, 0.1);
}

TEST(GradCheck, RestoresInputs) {
  auto x = Tensor<double>::vector({0.25, 0.5});
  grad_check([](Graph<double>& g, const Tensor<double>& v) { return sum(g, tanh(g, v)); }, x);
  EXPECT_EQ(x[0], 0.25);
  EXPECT_EQ(x[1], 0.5);
  EXPECT_FALSE(x.requires_grad());
}
