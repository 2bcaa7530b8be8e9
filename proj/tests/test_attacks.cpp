#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "ardlab/attacks.hpp"
#include "ardlab/model.hpp"

using namespace ardlab;

namespace {

Tensor random_batch(std::size_t n, std::size_t d, Rng& rng) {
  Tensor t({n, d});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

MlpModel identity_model(std::size_t d) {
  MlpModel m;
  m.layer_dims = {d, d};
  Tensor w({d, d}, 0.0);
  for (std::size_t i = 0; i < d; ++i) w.at(i, i) = 1.0;
  m.weights = {w};
  m.biases = {Tensor({d}, 0.0)};
  return m;
}

// ||x - c||^2 per row.
BatchLoss quadratic_loss(const Tensor& c) {
  return [c](Graph& g, Var x) { return row_sum(square(sub(x, g.constant(c)))); };
}

}  // namespace

TEST(AttackConfig, ValidationRejectsBadSettings) {
  AttackConfig c = AttackConfig::standard(Norm::l2, 0.1);
  c.steps = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = AttackConfig::standard(Norm::l2, -0.1);
  EXPECT_THROW(c.validate(), ContractError);
  c = AttackConfig::standard(Norm::linf, 0.1);
  c.restarts = 0;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Fgsm, ZeroEpsilonReturnsInputBitExact) {
  const MlpModel m = make_mlp({4, 6, 3}, ModelRole::student, 1);
  Rng rng(2);
  const Tensor x = random_batch(5, 4, rng);
  EXPECT_EQ(fgsm(m, x, {0, 1, 2, 0, 1}, 0.0), x);
}

TEST(Fgsm, LinearModelMovesAlongSignOfLossGradient) {
  // Two-class linear model: d CE / dx = p_1 (w_1 - w_0) for label 0.
  MlpModel m;
  m.layer_dims = {3, 2};
  m.weights = {Tensor::matrix(3, 2, {1.0, -1.0, 0.5, 2.0, 0.3, 0.3})};
  m.biases = {Tensor({2}, 0.0)};
  const Tensor x = Tensor::matrix(1, 3, {0.2, -0.4, 1.0});
  const Tensor adv = fgsm(m, x, {0}, 0.1);
  EXPECT_DOUBLE_EQ(adv[0] - x[0], -0.1);  // w_1 - w_0 = -2
  EXPECT_DOUBLE_EQ(adv[1] - x[1], 0.1);   // 1.5
  EXPECT_EQ(adv[2], x[2]);                // zero gradient coordinate does not move
}

TEST(Pgd, ZeroEpsilonReturnsInput) {
  const MlpModel m = make_mlp({4, 6, 3}, ModelRole::student, 1);
  Rng rng(3);
  const Tensor x = random_batch(5, 4, rng);
  EXPECT_EQ(pgd(m, x, {0, 1, 2, 0, 1}, AttackConfig::standard(Norm::linf, 0.0)).x_adv, x);
}

TEST(Pgd, PerturbationStaysInBall) {
  const MlpModel m = make_mlp({6, 12, 4}, ModelRole::student, 5);
  Rng rng(6);
  for (Norm norm : {Norm::linf, Norm::l2}) {
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor x = random_batch(8, 6, rng);
      std::vector<int> y(8);
      for (int& v : y) v = static_cast<int>(rng.below(4));
      AttackConfig c = AttackConfig::standard(norm, rng.uniform(0.01, 2.0), 5, true, rng.next());
      c.step_size *= 3.0;  // overshoot so projection is exercised
      const AttackResult r = pgd(m, x, y, c);
      for (std::size_t i = 0; i < 8; ++i) {
        const double size = norm == Norm::linf ? linf_norm(r.delta.row(i)) : l2_norm(r.delta.row(i));
        EXPECT_LE(size, c.epsilon + 1e-9);
      }
    }
  }
}

TEST(Pgd, BoxClampKeepsInputsInRange) {
  const MlpModel m = make_mlp({4, 6, 3}, ModelRole::student, 1);
  Rng rng(7);
  Tensor x({10, 4});
  for (double& v : x.data()) v = rng.uniform();
  AttackConfig c = AttackConfig::standard(Norm::linf, 0.3, 5, true, 1);
  c.box = std::pair{0.0, 1.0};
  const AttackResult r = pgd(m, x, std::vector<int>(10, 1), c);
  for (double v : r.x_adv.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Pgd, QuadraticReachesAnalyticMaximum) {
  // max over ||d|| <= eps of ||x + d - c||^2 is (||x - c|| + eps)^2.
  const Tensor x = Tensor::matrix(1, 3, {0.5, -0.2, 0.1});
  const Tensor c = Tensor::matrix(1, 3, {1.0, 1.0, -1.0});
  double dist = 0.0;
  for (int i = 0; i < 3; ++i) dist += (x[i] - c[i]) * (x[i] - c[i]);
  dist = std::sqrt(dist);
  const double eps = 0.4;
  AttackConfig cfg = AttackConfig::standard(Norm::l2, eps, 20, false);
  const AttackResult r = pgd(quadratic_loss(c), x, cfg);
  EXPECT_NEAR(r.loss[0], (dist + eps) * (dist + eps), 1e-9);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r.delta[i], -eps * (c[i] - x[i]) / dist, 1e-9);
}

TEST(Pgd, QuadraticLossIsNondecreasingPerStep) {
  Rng rng(9);
  for (Norm norm : {Norm::l2, Norm::linf}) {
    const Tensor x = random_batch(4, 5, rng);
    const Tensor c = random_batch(4, 5, rng);
    std::vector<double> trace;
    AttackOptions opt;
    opt.on_loss = [&](int, int, double s) { trace.push_back(s); };
    pgd(quadratic_loss(c), x, AttackConfig::standard(norm, 0.5, 15, true, 3), opt);
    ASSERT_EQ(trace.size(), 16u);
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i], trace[i - 1] - 1e-12);
  }
}

TEST(Pgd, RestartsKeepHighestLossPerSample) {
  const MlpModel m = make_mlp({4, 8, 3}, ModelRole::student, 2);
  Rng rng(10);
  const Tensor x = random_batch(6, 4, rng);
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  AttackConfig one = AttackConfig::standard(Norm::l2, 0.5, 3, true, 11);
  AttackConfig many = one;
  many.restarts = 5;
  const AttackResult a = pgd(m, x, y, one);
  const AttackResult b = pgd(m, x, y, many);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_GE(b.loss[i], a.loss[i]);
}

TEST(Pgd, FgsmEqualsOneStepPgd) {
  const MlpModel m = make_mlp({5, 8, 3}, ModelRole::student, 4);
  Rng rng(12);
  const Tensor x = random_batch(7, 5, rng);
  const std::vector<int> y{0, 1, 2, 2, 1, 0, 1};
  AttackConfig c = AttackConfig::standard(Norm::linf, 0.2, 1, false);
  c.step_size = 0.2;
  EXPECT_EQ(pgd(m, x, y, c).x_adv, fgsm(m, x, y, 0.2));
}

TEST(Pgd, FgsmEqualsOneStepPgdWithBoxAndOutOfRangeInputs) {
  // Inputs partly outside the box: x + (clamp(x + d) - x) need not round back
  // to clamp(x + d), so the iterate must be kept as a point.
  Rng rng(13);
  for (int t = 0; t < 200; ++t) {
    const MlpModel m = make_mlp({6, 8, 3}, ModelRole::student, 100 + t);
    Tensor x = random_batch(5, 6, rng);
    const std::vector<int> y{0, 1, 2, 0, 1};
    AttackConfig c = AttackConfig::standard(Norm::linf, 0.3, 1, false);
    c.step_size = 0.3;
    c.box = std::pair{-0.6, 0.6};
    const AttackResult r = pgd(m, x, y, c);
    ASSERT_EQ(r.x_adv, fgsm(m, x, y, 0.3, c.box)) << "trial " << t;
    for (double v : r.x_adv.data()) {
      ASSERT_GE(v, -0.6);
      ASSERT_LE(v, 0.6);
    }
  }
}

TEST(Pgd, NonFiniteLossNamesTheStep) {
  const Tensor x = Tensor::matrix(1, 1, {1.0});
  // log(x) turns non-finite once the ascent pushes x below zero.
  BatchLoss bad = [](Graph&, Var v) { return row_sum(scale(log(v), -1.0)); };
  AttackConfig c = AttackConfig::standard(Norm::linf, 5.0, 10, false);
  c.step_size = 0.6;
  try {
    pgd(bad, x, c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos) << e.what();
  }
}

TEST(FeatureAttack, IdenticalModelsZeroEpsilon) {
  const MlpModel m = make_mlp({3, 5, 2}, ModelRole::student, 8);
  Rng rng(13);
  const FeatureAttackResult r = feature_attack(m, m, random_batch(4, 3, rng), AttackConfig::standard(Norm::l2, 0.0));
  for (double v : r.value) EXPECT_EQ(v, 0.0);
}

TEST(FeatureAttack, IdentityModelsReachEpsilonSquared) {
  const MlpModel id = identity_model(4);
  Rng rng(14);
  const double eps = 0.3;
  const FeatureAttackResult r =
      feature_attack(id, id, random_batch(5, 4, rng), AttackConfig::standard(Norm::l2, eps, 10, true, 2));
  for (double v : r.value) EXPECT_NEAR(v, eps * eps, 1e-12);
}

TEST(FeatureAttack, ZeroEpsilonDistinctModelsGiveOutputDistance) {
  const MlpModel a = make_mlp({3, 5, 2}, ModelRole::student, 8);
  const MlpModel b = make_mlp({3, 5, 2}, ModelRole::student, 9);
  Rng rng(15);
  const Tensor x = random_batch(4, 3, rng);
  const FeatureAttackResult r = feature_attack(a, b, x, AttackConfig::standard(Norm::l2, 0.0));
  const Tensor za = forward(a, x), zb = forward(b, x);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 2; ++k) s += (za.at(i, k) - zb.at(i, k)) * (za.at(i, k) - zb.at(i, k));
    EXPECT_DOUBLE_EQ(r.value[i], s);
  }
}

TEST(FeatureAttack, NeverWorseThanStart) {
  const MlpModel a = make_mlp({3, 5, 2}, ModelRole::student, 8);
  const MlpModel b = make_mlp({3, 5, 2}, ModelRole::student, 9);
  Rng rng(16);
  const Tensor x = random_batch(6, 3, rng);
  const FeatureAttackResult zero = feature_attack(a, b, x, AttackConfig::standard(Norm::l2, 0.0));
  const FeatureAttackResult r = feature_attack(a, b, x, AttackConfig::standard(Norm::l2, 0.5, 10, false));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_GE(r.value[i], zero.value[i]);
}
