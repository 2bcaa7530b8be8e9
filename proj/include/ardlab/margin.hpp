#pragma once

// Certified margin transfer from a weighted teacher ensemble to a student.
//
// For weights w on the simplex, teacher margins gamma_m, ensemble logits
// z_ens = sum_m w_m z_m, student discrepancy D = ||z_S - z_ens||_inf and a
// student Lipschitz bound L, the student's margin at x + delta is at least
//   sum_m w_m gamma_m - 2 D - 2 L ||delta||_2,
// so its prediction cannot change for ||delta||_2 < (sum_m w_m gamma_m - 2 D) / (2 L).
// verify_bound() computes that radius per sample and then tries to break it
// with PGD just inside the radius.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ardlab/attacks.hpp"
#include "ardlab/data.hpp"
#include "ardlab/errors.hpp"
#include "ardlab/model.hpp"
#include "ardlab/parallel.hpp"

namespace ardlab {

/// z_y - max_{k != y} z_k.
inline double margin(std::span<const double> logits, std::size_t y) {
  if (logits.size() < 2) throw ContractError("margin: need at least 2 classes");
  if (y >= logits.size()) throw ContractError("margin: label out of range");
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (k != y) other = std::max(other, logits[k]);
  return logits[y] - other;
}

inline constexpr double kWeightSumTolerance = 1e-12;

inline void check_simplex(std::span<const double> weights) {
  double s = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ContractError("ensemble weights must be nonnegative");
    s += w;
  }
  if (std::abs(s - 1.0) > kWeightSumTolerance)
    throw ContractError("ensemble weights must sum to 1 (got " + std::to_string(s) + ")");
}

/// sum_m w_m z_m
inline std::vector<double> ensemble_logits(std::span<const std::vector<double>> teacher_logits,
                                           std::span<const double> weights) {
  if (teacher_logits.empty() || teacher_logits.size() != weights.size())
    throw ContractError("ensemble_logits: need one weight per teacher");
  check_simplex(weights);
  const std::size_t c = teacher_logits.front().size();
  std::vector<double> out(c, 0.0);
  for (std::size_t m = 0; m < teacher_logits.size(); ++m) {
    if (teacher_logits[m].size() != c) throw ContractError("ensemble_logits: class counts differ");
    for (std::size_t k = 0; k < c; ++k) out[k] += weights[m] * teacher_logits[m][k];
  }
  return out;
}

/// ||a - b||_inf
inline double discrepancy(std::span<const double> student_logits, std::span<const double> ens_logits) {
  if (student_logits.size() != ens_logits.size()) throw ContractError("discrepancy: class counts differ");
  double d = 0.0;
  for (std::size_t k = 0; k < student_logits.size(); ++k)
    d = std::max(d, std::abs(student_logits[k] - ens_logits[k]));
  return d;
}

/// max(0, (avg_margin - 2 delta) / (2 L)).
inline double certified_radius(double avg_margin, double delta, double lipschitz) {
  if (!(lipschitz > 0.0)) throw ContractError("certified_radius: Lipschitz constant must be > 0");
  return std::max(0.0, (avg_margin - 2.0 * delta) / (2.0 * lipschitz));
}

struct VerifyOptions {
  /// Subtract the per-sample mean from every logit vector first. Softmax
  /// distillation leaves logits free up to a constant shift, which the
  /// margins ignore but the l_inf discrepancy does not; centering is a linear
  /// map of operator norm 1, so the certificate stays valid.
  bool center_logits = true;
  /// Attack radius as a fraction of the certified radius.
  double radius_fraction = 0.99;
};

struct SampleCertificate {
  std::size_t index = 0;
  int label = 0;
  int prediction = 0;
  std::vector<double> teacher_margins;
  double avg_margin = 0.0;
  double ensemble_margin = 0.0;
  double discrepancy = 0.0;
  double radius = 0.0;
  bool certified = false;
  double attack_eps = 0.0;
  double adv_margin = 0.0;     // student margin at the attack point
  int adv_prediction = 0;
  bool violated = false;       // prediction flipped inside the certified ball
  bool bound_violated = false; // observed margin below the guaranteed one
};

struct MarginReport {
  double lipschitz = 0.0;
  std::vector<double> weights;
  bool center_logits = true;
  double radius_fraction = 0.99;
  std::vector<SampleCertificate> samples;
  std::size_t correct = 0;
  std::size_t certified = 0;
  std::size_t violations = 0;
  std::size_t bound_violations = 0;
};

namespace detail {
inline std::vector<double> row_vector(const Tensor& logits, bool center) {
  std::vector<double> v(logits.data().begin(), logits.data().end());
  if (center) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double& x : v) x -= m;
  }
  return v;
}
}  // namespace detail

/// Certifies every correctly predicted sample and attacks it with l2 PGD at
/// radius_fraction * r(x). `attack` supplies steps, restarts and seed; its
/// epsilon and step size are set per sample.
inline MarginReport verify_bound(const MlpModel& student, std::span<const MlpModel* const> teachers,
                                 std::span<const double> weights, const Dataset& data, const AttackConfig& attack,
                                 const VerifyOptions& opt = {}) {
  data.validate();
  if (attack.norm != Norm::l2) throw ContractError("verify_bound: the certificate is for l2 perturbations");
  if (teachers.size() != weights.size() || teachers.empty())
    throw ContractError("verify_bound: need one weight per teacher");
  check_simplex(weights);
  for (const MlpModel* t : teachers)
    if (t->input_dim() != student.input_dim() || t->num_classes() != student.num_classes())
      throw ContractError("verify_bound: teacher and student dimensions differ");

  MarginReport report;
  report.lipschitz = lipschitz_upper(student);
  report.weights.assign(weights.begin(), weights.end());
  report.center_logits = opt.center_logits;
  report.radius_fraction = opt.radius_fraction;
  report.samples.resize(data.size());

  parallel_for(data.size(), [&](std::size_t i) {
    SampleCertificate& s = report.samples[i];
    s.index = i;
    s.label = data.labels[i];
    const auto y = static_cast<std::size_t>(s.label);
    const Tensor x = slice_rows(data.features, i, i + 1);

    const std::vector<double> zs = detail::row_vector(forward(student, x), opt.center_logits);
    std::vector<std::vector<double>> zt;
    for (const MlpModel* t : teachers) zt.push_back(detail::row_vector(forward(*t, x), opt.center_logits));
    for (std::size_t m = 0; m < zt.size(); ++m) {
      s.teacher_margins.push_back(margin(zt[m], y));
      s.avg_margin += weights[m] * s.teacher_margins.back();
    }
    const std::vector<double> ens = ensemble_logits(zt, weights);
    s.ensemble_margin = margin(ens, y);
    s.discrepancy = discrepancy(zs, ens);
    s.prediction = static_cast<int>(argmax(zs));
    s.adv_prediction = s.prediction;
    s.adv_margin = margin(zs, y);
    if (s.prediction != s.label || report.lipschitz <= 0.0) return;
    s.radius = certified_radius(s.avg_margin, s.discrepancy, report.lipschitz);
    s.certified = s.radius > 0.0;
    if (!s.certified) return;

    AttackConfig a = attack;
    a.epsilon = opt.radius_fraction * s.radius;
    a.step_size = 2.5 * a.epsilon / a.steps;
    a.random_start = true;
    a.seed = mix_seed(attack.seed, i);
    a.box.reset();
    s.attack_eps = a.epsilon;
    const std::vector<int> label{s.label};
    const AttackResult r = pgd(student, x, label, a);
    const Tensor z_adv = forward(student, r.x_adv);
    s.adv_prediction = static_cast<int>(argmax(z_adv.row(0)));
    s.adv_margin = margin(z_adv.row(0), y);
    s.violated = s.adv_prediction != s.label;
    const double guaranteed = s.avg_margin - 2.0 * s.discrepancy - 2.0 * report.lipschitz * l2_norm(r.delta.row(0));
    s.bound_violated = s.adv_margin < guaranteed - 1e-9;
  });

  for (const SampleCertificate& s : report.samples) {
    report.correct += s.prediction == s.label;
    report.certified += s.certified;
    report.violations += s.violated;
    report.bound_violations += s.bound_violated;
  }
  return report;
}

inline nlohmann::ordered_json to_json(const MarginReport& r) {
  nlohmann::ordered_json j;
  j["lipschitz"] = r.lipschitz;
  j["weights"] = r.weights;
  j["center_logits"] = r.center_logits;
  j["radius_fraction"] = r.radius_fraction;
  auto& arr = j["samples"] = nlohmann::ordered_json::array();
  for (const SampleCertificate& s : r.samples) {
    nlohmann::ordered_json e;
    e["index"] = s.index;
    e["label"] = s.label;
    e["prediction"] = s.prediction;
    e["teacher_margins"] = s.teacher_margins;
    e["avg_margin"] = s.avg_margin;
    e["ensemble_margin"] = s.ensemble_margin;
    e["discrepancy"] = s.discrepancy;
    e["radius"] = s.radius;
    e["certified"] = s.certified;
    e["attack_eps"] = s.attack_eps;
    e["adv_margin"] = s.adv_margin;
    e["adv_prediction"] = s.adv_prediction;
    e["violated"] = s.violated;
    e["bound_violated"] = s.bound_violated;
    arr.push_back(std::move(e));
  }
  j["aggregate"] = {{"samples", r.samples.size()},
                    {"correct", r.correct},
                    {"certified", r.certified},
                    {"violations", r.violations},
                    {"bound_violations", r.bound_violations}};
  return j;
}

}  // namespace ardlab
