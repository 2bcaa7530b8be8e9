#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ardlab/saliency.hpp"

using namespace ardlab;

namespace {

SaliencyMap map_of(std::vector<double> v) {
  const std::size_t n = v.size();
  return {Tensor({n}, std::move(v)), "m", 0, 0};
}

}  // namespace

TEST(InputGradientMap, LinearModelGivesAbsoluteColumn) {
  MlpModel m;
  m.layer_dims = {3, 2};
  m.weights = {Tensor::matrix(3, 2, {1.0, -2.0, -0.5, 4.0, 0.0, 3.0})};
  m.biases = {Tensor({2}, 0.0)};
  for (const auto& x : {Tensor::vector({0, 0, 0}), Tensor::vector({5, -1, 2})}) {
    const SaliencyMap s = input_gradient_map(m, x, 1);
    EXPECT_EQ(s.values.shape(), x.shape());
    EXPECT_EQ(s.values[0], 2.0);
    EXPECT_EQ(s.values[1], 4.0);
    EXPECT_EQ(s.values[2], 3.0);
  }
}

TEST(InputGradientMap, ScalesWithOutputLayer) {
  MlpModel m = make_mlp({4, 6, 3}, ModelRole::student, 2);
  const Tensor x = Tensor::vector({0.3, -0.2, 0.5, 1.0});
  const SaliencyMap a = input_gradient_map(m, x, 2);
  for (double& w : m.weights.back().data()) w *= 2.0;
  const SaliencyMap b = input_gradient_map(m, x, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(b.values[i], 2.0 * a.values[i], 1e-15);
}

TEST(InputGradientMap, InactiveUnitContributesNothing) {
  // Hidden unit 1 has a large negative bias, so it is dead around x.
  MlpModel m;
  m.layer_dims = {2, 2, 1};
  m.weights = {Tensor::matrix(2, 2, {1.0, 3.0, 2.0, -1.0}), Tensor::matrix(2, 1, {1.0, 5.0})};
  m.biases = {Tensor::vector({0.0, -100.0}), Tensor::vector({0.0})};
  const Tensor x = Tensor::vector({0.4, 0.7});
  const SaliencyMap s = input_gradient_map(m, x, 0);
  // Only the live path through unit 0 remains: |W1[:,0]| * 1.
  EXPECT_EQ(s.values[0], 1.0);
  EXPECT_EQ(s.values[1], 2.0);
  const double h = 1e-6;
  for (std::size_t j = 0; j < 2; ++j) {
    Tensor up = x, down = x;
    up[j] += h;
    down[j] -= h;
    EXPECT_NEAR(std::fabs(forward(m, up)[0] - forward(m, down)[0]) / (2 * h), s.values[j], 1e-8);
  }
}

TEST(InputGradientMap, RejectsBadTarget) {
  const MlpModel m = make_mlp({2, 3}, ModelRole::student, 1);
  EXPECT_THROW(input_gradient_map(m, Tensor::vector({0, 0}), 3), ContractError);
}

TEST(SaliencyL2, Examples) {
  const SaliencyMap a = map_of({1, 0}), b = map_of({0, 1});
  EXPECT_EQ(saliency_l2(a, a), 0.0);
  EXPECT_DOUBLE_EQ(saliency_l2(a, b), std::sqrt(2.0));
  EXPECT_THROW(saliency_l2(a, map_of({1, 2, 3})), ContractError);
}

TEST(SaliencyL2, IsAMetric) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> va(6), vb(6), vc(6);
    for (double& v : va) v = rng.normal();
    for (double& v : vb) v = rng.normal();
    for (double& v : vc) v = rng.normal();
    const SaliencyMap a = map_of(va), b = map_of(vb), c = map_of(vc);
    EXPECT_EQ(saliency_l2(a, b), saliency_l2(b, a));
    EXPECT_LE(saliency_l2(a, c), saliency_l2(a, b) + saliency_l2(b, c) + 1e-12);
  }
}

TEST(Saliency, NormalizedHasUnitNorm) {
  const SaliencyMap n = normalized(map_of({3, 4}));
  EXPECT_DOUBLE_EQ(n.values[0], 0.6);
  EXPECT_DOUBLE_EQ(n.values[1], 0.8);
  EXPECT_EQ(normalized(map_of({0, 0})).values[0], 0.0);
}

TEST(Saliency, CsvExport) {
  std::vector<SaliencyMap> maps{{Tensor::vector({0.5, 1.0}), "teacher", 3, 1}};
  EXPECT_EQ(maps_to_csv(maps), "sample_id,model_id,target,v0,v1\n3,teacher,1,0.5,1\n");
}
