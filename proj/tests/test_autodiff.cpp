#include <gtest/gtest.h>

#include <cmath>

#include "ardlab/autodiff.hpp"
#include "ardlab/grad_check.hpp"
#include "ardlab/random.hpp"

using namespace ardlab;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST(Tensor, RejectsMismatchedDataLength) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ContractError);
}

TEST(Tensor, ArgmaxBreaksTiesTowardLowestIndex) {
  const std::vector<double> v{1.0, 3.0, 3.0, 0.0};
  EXPECT_EQ(argmax(v), 1u);
}

TEST(Softmax, UniformLogits) {
  const Tensor p = softmax(Tensor::matrix(1, 4, {0, 0, 0, 0}));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, ShiftInvariance) {
  const Tensor a = softmax(Tensor::matrix(1, 2, {0, 1}));
  for (double c : {-50.0, -1.5, 3.0, 700.0}) {
    const Tensor b = softmax(Tensor::matrix(1, 2, {c, c + 1}));
    EXPECT_NEAR(a[0], b[0], 1e-15);
    EXPECT_NEAR(a[1], b[1], 1e-15);
  }
}

TEST(Softmax, KnownValues) {
  const Tensor p = softmax(Tensor::matrix(1, 3, {1, 2, 3}));
  // exp(k) / (e + e^2 + e^3) evaluated independently in long double.
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(p[k], static_cast<double>(std::exp(k + 1.0L) / z), 1e-15);
  EXPECT_NEAR(p[0], 0.09003057, 1e-8);
  EXPECT_NEAR(p[1], 0.24472847, 1e-8);
  EXPECT_NEAR(p[2], 0.66524096, 1e-8);
}

TEST(Softmax, NonFiniteInputIsNumericError) {
  EXPECT_THROW(softmax(Tensor::matrix(1, 2, {0, NAN})), NumericError);
  EXPECT_THROW(softmax(Tensor::matrix(1, 2, {INFINITY, 0})), NumericError);
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  Var x = g.leaf(Tensor({3, 2}, 1.7), true);
  g.backward(sum(x));
  for (double v : g.grad(x).data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquaredNormGivesInput) {
  Rng rng(1);
  const Tensor p = random_tensor({5}, rng);
  Graph g;
  Var x = g.leaf(p, true);
  g.backward(scale(l2_norm_sq(x), 0.5));
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_DOUBLE_EQ(g.grad(x)[i], p[i]);
}

TEST(Backward, CrossEntropyAtUniformLogits) {
  Graph g;
  Var z = g.leaf(Tensor({1, 4}, 0.0), true);
  g.backward(sum(cross_entropy(z, {0})));
  const double expected[] = {-0.75, 0.25, 0.25, 0.25};
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(g.grad(z)[k], expected[k], 1e-15);
}

TEST(Backward, NonScalarLossIsContractError) {
  Graph g;
  Var x = g.leaf(Tensor({2}, 1.0), true);
  EXPECT_THROW(g.backward(x), ContractError);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Graph g;
  Var c = g.constant(Tensor({2}, 3.0));
  Var x = g.leaf(Tensor({2}, 1.0), true);
  g.backward(sum(mul(c, x)));
  EXPECT_FALSE(g.requires_grad(c));
  for (double v : g.grad(x).data()) EXPECT_EQ(v, 3.0);
}

TEST(Backward, ReluSubgradientAtZeroIsZero) {
  Graph g;
  Var x = g.leaf(Tensor::vector({-1.0, 0.0, 2.0}), true);
  g.backward(sum(relu(x)));
  EXPECT_EQ(g.grad(x)[0], 0.0);
  EXPECT_EQ(g.grad(x)[1], 0.0);
  EXPECT_EQ(g.grad(x)[2], 1.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Graph g;
  Var x = g.leaf(Tensor::vector({2.0}), true);
  g.backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 4.0);
}

TEST(GradCheck, IdentityIsExact) {
  Rng rng(2);
  EXPECT_LT(grad_check([](Graph&, Var x) { return sum(x); }, random_tensor({7}, rng), 1e-5), 1e-9);
}

TEST(GradCheck, ReluAwayFromKink) {
  Rng rng(3);
  const double h = 1e-5;
  Tensor p({20});
  for (double& v : p.data()) {
    v = rng.uniform(-1.0, 1.0);
    if (std::abs(v) <= 10 * h) v = 0.5;
  }
  EXPECT_LE(grad_check([](Graph&, Var x) { return sum(square(relu(x))); }, p, h), 1e-6);
}

TEST(GradCheck, MatmulReluSoftmaxChain) {
  Rng rng(4);
  const Tensor w = random_tensor({4, 3}, rng);
  auto fn = [&](Graph& g, Var x) {
    Var z = relu(matmul(x, g.constant(w)));
    return sum(mul(softmax(z), g.constant(Tensor::matrix(2, 3, {1, -2, 0.5, 0.3, 0.7, -1}))));
  };
  EXPECT_LE(grad_check(fn, random_tensor({2, 4}, rng), 1e-5), 1e-6);
}

TEST(GradCheck, RejectsOutOfRangeStep) {
  EXPECT_THROW(grad_check([](Graph&, Var x) { return sum(x); }, Tensor({1}, 0.0), 1e-2), ContractError);
}

TEST(KlRows, GradientIsProbabilityDifference) {
  const Tensor s = Tensor::matrix(1, 3, {0.3, -1.0, 2.0});
  const Tensor t = Tensor::matrix(1, 3, {1.0, 0.0, -0.5});
  Graph g;
  Var sv = g.leaf(s, true);
  g.backward(sum(kl_rows(sv, t, 1.0, KlDirection::teacher_reference)));
  const Tensor ps = softmax(s), pt = softmax(t);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(g.grad(sv)[k], ps[k] - pt[k], 1e-15);
}

TEST(KlRows, TemperatureMatchesFiniteDifferences) {
  Rng rng(5);
  const Tensor t = random_tensor({3, 4}, rng, 2.0);
  for (auto dir : {KlDirection::teacher_reference, KlDirection::student_reference}) {
    for (double temp : {0.5, 1.0, 4.0}) {
      auto fn = [&](Graph&, Var x) { return sum(kl_rows(x, t, temp, dir)); };
      EXPECT_LE(grad_check(fn, random_tensor({3, 4}, rng, 2.0), 1e-5), 1e-6);
    }
  }
}

TEST(Ops, ShapeMismatchIsContractError) {
  Graph g;
  Var a = g.leaf(Tensor({2, 3}));
  Var b = g.leaf(Tensor({2, 2}));
  EXPECT_THROW(matmul(a, b), ContractError);
  EXPECT_THROW(add(a, b), ContractError);
}

TEST(Ops, NonFiniteResultIsNumericError) {
  Graph g;
  Var a = g.leaf(Tensor::vector({1e300}));
  EXPECT_THROW(square(a), NumericError);
}
