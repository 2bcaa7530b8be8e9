#pragma once

// Dual-teacher adversarial robust distillation.
//
// The student is supervised by a clean teacher on clean inputs and by an
// adversarially trained teacher on inputs perturbed to push the student away
// from the clean teacher's output. Per-sample teacher weights come from the
// ratio of the two teachers' softmax confidences passed through a sigmoid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ardlab/attacks.hpp"
#include "ardlab/autodiff.hpp"
#include "ardlab/data.hpp"
#include "ardlab/errors.hpp"
#include "ardlab/margin.hpp"
#include "ardlab/metrics.hpp"
#include "ardlab/model.hpp"
#include "ardlab/random.hpp"

namespace ardlab {

enum class Strategy {
  single_adv,  // adversarial teacher only
  average,     // both teachers, fixed 0.5 / 0.5
  weighted,    // confidence-driven weights scaled by the ratio prior
  alpha,       // fixed (1 - alpha) clean + alpha adversarial
};

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::single_adv: return "single_adv";
    case Strategy::average: return "average";
    case Strategy::weighted: return "weighted";
    case Strategy::alpha: return "alpha";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view s) {
  if (s == "single_adv") return Strategy::single_adv;
  if (s == "average") return Strategy::average;
  if (s == "weighted") return Strategy::weighted;
  if (s == "alpha") return Strategy::alpha;
  return std::nullopt;
}

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  int epochs = 10;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

/// Which model plays each side of the inner maximization.
enum class AttackEndpoint { student, clean_teacher, adv_teacher };

struct DistillConfig {
  double alpha = 0.5;
  double ratio_adv = 3.0;
  double ratio_org = 0.5;
  double slope_lambda = 4.0;
  double offset_tau = 1.0;
  double upsilon = 1e-5;
  double temperature = 1.0;
  Strategy strategy = Strategy::weighted;
  KlDirection direction = KlDirection::teacher_reference;
  SgdConfig optimizer;
  /// Inner maximization during training (random_start off by default).
  AttackConfig attack = AttackConfig::standard(Norm::l2, 0.1, 10, /*random_start=*/false);
  AttackEndpoint attack_source = AttackEndpoint::student;
  AttackEndpoint attack_reference = AttackEndpoint::clean_teacher;
  /// Held-out samples scored after every epoch (0 disables).
  std::size_t record_samples = 200;
  AttackConfig record_attack = AttackConfig::standard(Norm::l2, 0.1, 10);

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("distill: alpha must lie in [0, 1]");
    if (!(upsilon > 0.0)) throw ContractError("distill: upsilon must be > 0");
    if (!(temperature > 0.0)) throw ContractError("distill: temperature must be > 0");
    if (!(slope_lambda > 0.0)) throw ContractError("distill: slope_lambda must be > 0");
    if (ratio_adv < 0.0 || ratio_org < 0.0 || (ratio_adv == 0.0 && ratio_org == 0.0))
      throw ContractError("distill: ratios must be nonnegative and not both zero");
    if (optimizer.batch_size == 0 || optimizer.epochs < 0 || !(optimizer.lr > 0.0))
      throw ContractError("distill: invalid optimizer settings");
    attack.validate();
  }
};

// ---------------------------------------------------------------------------
// Confidence weighting

/// Per-row max of the softmax.
inline std::vector<double> confidence(const Tensor& logits) {
  const Tensor p = softmax(logits);
  std::vector<double> out(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto row = p.row(r);
    out[r] = *std::max_element(row.begin(), row.end());
  }
  return out;
}

inline double weight_ratio(double conf_adv, double conf_org, double upsilon) {
  return conf_adv / (conf_org + upsilon);
}

struct TeacherWeights {
  double w_adv;
  double w_clean;
};

/// Sigmoid of the confidence ratio; w_clean is exactly 1 - w_adv.
inline TeacherWeights dynamic_weights(double rho, double slope_lambda, double offset_tau) {
  if (!(slope_lambda > 0.0)) throw ContractError("dynamic_weights: slope must be > 0");
  const double w = 1.0 / (1.0 + std::exp(-slope_lambda * (rho - offset_tau)));
  return {w, 1.0 - w};
}

/// Weights (adv, clean) actually applied to the two KL terms.
inline TeacherWeights effective_weights(Strategy s, double w_adv, const DistillConfig& cfg) {
  switch (s) {
    case Strategy::single_adv: return {1.0, 0.0};
    case Strategy::average: return {0.5, 0.5};
    case Strategy::alpha: return {cfg.alpha, 1.0 - cfg.alpha};
    case Strategy::weighted: {
      const double a = cfg.ratio_adv * w_adv, c = cfg.ratio_org * (1.0 - w_adv);
      const double total = a + c;
      if (total <= 0.0) return {0.5, 0.5};
      return {a / total, c / total};
    }
  }
  return {1.0, 0.0};
}

/// Weighted sum of precomputed adversarial and clean KL terms.
inline double combine_terms(Strategy s, double adv_term, double clean_term, double w_adv,
                            const DistillConfig& cfg) {
  const TeacherWeights w = effective_weights(s, w_adv, cfg);
  return w.w_adv * adv_term + w.w_clean * clean_term;
}

/// Mean over the batch of the softened KL divergence.
inline double kl_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature,
                      KlDirection direction = KlDirection::teacher_reference) {
  if (student_logits.shape() != teacher_logits.shape()) throw ContractError("kl_loss: shape mismatch");
  Graph g;
  Var s = g.constant(student_logits.rank() == 1 ? student_logits.reshaped({1, student_logits.dim(0)})
                                                : student_logits);
  const Tensor t = teacher_logits.rank() == 1 ? teacher_logits.reshaped({1, teacher_logits.dim(0)})
                                              : teacher_logits;
  return mean(kl_rows(s, t, temperature, direction)).value()[0];
}

// ---------------------------------------------------------------------------
// Composite objective

struct CompositeDiagnostics {
  double clean_term = 0.0;  // batch mean KL against the clean teacher on clean inputs
  double adv_term = 0.0;    // batch mean KL against the adversarial teacher on x_adv
  double mean_w_adv = 0.0;  // mean sigmoid weight
  double mean_eff_adv = 0.0;
  double mean_eff_clean = 0.0;
  double mean_attack_value = 0.0;
};

struct CompositeLoss {
  Var loss;
  CompositeDiagnostics diagnostics;
};

struct Teachers {
  const MlpModel& clean;
  const MlpModel& adv;
};

namespace detail {
inline const MlpModel& endpoint(AttackEndpoint e, const MlpModel& student, const Teachers& t) {
  switch (e) {
    case AttackEndpoint::student: return student;
    case AttackEndpoint::clean_teacher: return t.clean;
    case AttackEndpoint::adv_teacher: return t.adv;
  }
  return student;
}
}  // namespace detail

/// Records the batch objective on `g` with the student's parameters bound in
/// `params`. The adversarial batch is generated before recording.
inline CompositeLoss composite_loss(Graph& g, const ParamVars& params, const MlpModel& student, const Teachers& t,
                                    const Tensor& x_clean, const DistillConfig& cfg) {
  const std::size_t n = x_clean.rows();
  const FeatureAttackResult fa = feature_attack(detail::endpoint(cfg.attack_source, student, t),
                                                detail::endpoint(cfg.attack_reference, student, t), x_clean,
                                                cfg.attack);
  const Tensor t_org_clean = forward(t.clean, x_clean);
  const Tensor t_adv_adv = forward(t.adv, fa.x_adv);
  const std::vector<double> conf_org = confidence(t_org_clean);
  const std::vector<double> conf_adv = confidence(t_adv_adv);

  Tensor w_adv_eff({n}), w_clean_eff({n});
  CompositeDiagnostics diag;
  for (std::size_t i = 0; i < n; ++i) {
    const double rho = weight_ratio(conf_adv[i], conf_org[i], cfg.upsilon);
    const TeacherWeights dw = dynamic_weights(rho, cfg.slope_lambda, cfg.offset_tau);
    const TeacherWeights ew = effective_weights(cfg.strategy, dw.w_adv, cfg);
    w_adv_eff[i] = ew.w_adv / static_cast<double>(n);
    w_clean_eff[i] = ew.w_clean / static_cast<double>(n);
    diag.mean_w_adv += dw.w_adv / static_cast<double>(n);
    diag.mean_eff_adv += ew.w_adv / static_cast<double>(n);
    diag.mean_eff_clean += ew.w_clean / static_cast<double>(n);
    diag.mean_attack_value += fa.value[i] / static_cast<double>(n);
  }

  Var s_clean = forward(g, params, g.constant(x_clean));
  Var s_adv = forward(g, params, g.constant(fa.x_adv));
  Var kl_clean = kl_rows(s_clean, t_org_clean, cfg.temperature, cfg.direction);
  Var kl_adv = kl_rows(s_adv, t_adv_adv, cfg.temperature, cfg.direction);
  for (double v : kl_clean.value().data()) diag.clean_term += v / static_cast<double>(n);
  for (double v : kl_adv.value().data()) diag.adv_term += v / static_cast<double>(n);

  Var loss = add(sum(mul(kl_adv, g.constant(w_adv_eff))), sum(mul(kl_clean, g.constant(w_clean_eff))));
  return {loss, diag};
}

/// Value-only evaluation of the objective for a batch.
inline std::pair<double, CompositeDiagnostics> composite_loss(const MlpModel& student, const MlpModel& t_org,
                                                              const MlpModel& t_adv, const Tensor& x_clean,
                                                              const DistillConfig& cfg) {
  cfg.validate();
  Graph g;
  const Tensor x = x_clean.rank() == 1 ? x_clean.reshaped({1, x_clean.dim(0)}) : x_clean;
  CompositeLoss c = composite_loss(g, bind_params(g, student, false), student, Teachers{t_org, t_adv}, x, cfg);
  return {c.loss.value()[0], c.diagnostics};
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  double clean_loss = 0.0;
  double adv_loss = 0.0;
  double mean_w_adv = 0.0;
  double mean_eff_adv = 0.0;
  double acc = 0.0;   // percent, held-out
  double racc = 0.0;  // percent, held-out
  /// Held-out mean l_inf gap between student and teacher-ensemble logits
  /// (centered), ensemble weighted by mean_eff_adv. Diagnostic only.
  double mean_discrepancy = 0.0;
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;

  friend bool operator==(const TrainRecord& a, const TrainRecord& b) {
    if (a.epochs.size() != b.epochs.size()) return false;
    for (std::size_t i = 0; i < a.epochs.size(); ++i) {
      const auto& x = a.epochs[i];
      const auto& y = b.epochs[i];
      if (x.clean_loss != y.clean_loss || x.adv_loss != y.adv_loss || x.mean_w_adv != y.mean_w_adv ||
          x.mean_eff_adv != y.mean_eff_adv || x.acc != y.acc || x.racc != y.racc ||
          x.mean_discrepancy != y.mean_discrepancy)
        return false;
    }
    return true;
  }
};

inline constexpr double kDivergenceThreshold = 1e6;

/// SGD with momentum (v <- mu v + g; w <- w - lr v).
class Sgd {
 public:
  Sgd(const MlpModel& m, double lr, double momentum) : lr_(lr), momentum_(momentum) {
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      vw_.emplace_back(m.weights[l].shape(), 0.0);
      vb_.emplace_back(m.biases[l].shape(), 0.0);
    }
  }

  void step(MlpModel& m, const Graph& g, const ParamVars& p) {
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      update(m.weights[l], vw_[l], g.grad(p.weights[l]));
      update(m.biases[l], vb_[l], g.grad(p.biases[l]));
    }
  }

 private:
  void update(Tensor& w, Tensor& v, const Tensor& grad) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + grad[i];
      w[i] -= lr_ * v[i];
    }
  }

  double lr_, momentum_;
  std::vector<Tensor> vw_, vb_;
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  shuffle(order, rng);
  return order;
}

/// Runs fn, reporting numeric blow-ups as divergence of the given epoch.
template <typename Fn>
auto guarded(int epoch, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError&) {
    throw TrainingDiverged(epoch, std::numeric_limits<double>::infinity());
  }
}

inline double mean_discrepancy(const MlpModel& student, const Teachers& t, double w_adv, const Tensor& x) {
  const Tensor zs = forward(student, x), za = forward(t.adv, x), zo = forward(t.clean, x);
  const std::vector<double> w{w_adv, 1.0 - w_adv};
  double total = 0.0;
  for (std::size_t r = 0; r < zs.rows(); ++r) {
    const std::vector<std::vector<double>> zt{row_vector(slice_rows(za, r, r + 1), true),
                                              row_vector(slice_rows(zo, r, r + 1), true)};
    total += discrepancy(row_vector(slice_rows(zs, r, r + 1), true), ensemble_logits(zt, w));
  }
  return zs.rows() > 0 ? total / static_cast<double>(zs.rows()) : 0.0;
}

inline void score_epoch(EpochRecord& rec, const MlpModel& model, const Teachers& t, const Dataset* holdout,
                        std::size_t samples, const AttackConfig& attack) {
  if (holdout == nullptr || samples == 0) return;
  const Dataset part = holdout->subset(0, std::min(samples, holdout->size()), Split::test);
  const MetricsRow row = evaluate(model, part, attack);
  rec.acc = row.acc;
  rec.racc = row.racc;
  rec.mean_discrepancy = mean_discrepancy(model, t, std::clamp(rec.mean_eff_adv, 0.0, 1.0), part.features);
}

}  // namespace detail

struct TrainResult {
  MlpModel student;
  TrainRecord record;
};

/// Minimizes the composite objective over the training set. Teachers are
/// only read.
inline TrainResult train(MlpModel student, const MlpModel& t_org, const MlpModel& t_adv, const Dataset& data,
                         const DistillConfig& cfg, const Dataset* holdout = nullptr) {
  cfg.validate();
  data.validate();
  if (student.input_dim() != data.dim() || t_org.input_dim() != data.dim() || t_adv.input_dim() != data.dim() ||
      student.num_classes() != t_org.num_classes() || student.num_classes() != t_adv.num_classes())
    throw ContractError("train: model and dataset dimensions differ");

  const Teachers teachers{t_org, t_adv};
  Sgd opt(student, cfg.optimizer.lr, cfg.optimizer.momentum);
  TrainRecord record;
  const std::size_t n = data.size(), bs = cfg.optimizer.batch_size;

  for (int epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
    const auto order = detail::epoch_order(n, cfg.optimizer.seed, epoch);
    EpochRecord rec;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += bs, ++batches) {
      const std::size_t end = std::min(n, start + bs);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor x = take_rows(data.features, idx);

      DistillConfig batch_cfg = cfg;
      batch_cfg.attack.seed = mix_seed(cfg.attack.seed, (static_cast<std::uint64_t>(epoch) << 32) + batches);
      if (!batch_cfg.attack.box) batch_cfg.attack.box = data.input_range;

      Graph g;
      const ParamVars params = bind_params(g, student, true);
      const CompositeLoss c = detail::guarded(epoch, [&] {
        return composite_loss(g, params, student, teachers, x, batch_cfg);
      });
      const double value = c.loss.value()[0];
      if (!std::isfinite(value) || value > kDivergenceThreshold) throw TrainingDiverged(epoch, value);
      g.backward(c.loss);
      opt.step(student, g, params);

      rec.clean_loss += c.diagnostics.clean_term;
      rec.adv_loss += c.diagnostics.adv_term;
      rec.mean_w_adv += c.diagnostics.mean_w_adv;
      rec.mean_eff_adv += c.diagnostics.mean_eff_adv;
    }
    if (batches > 0) {
      const auto b = static_cast<double>(batches);
      rec.clean_loss /= b;
      rec.adv_loss /= b;
      rec.mean_w_adv /= b;
      rec.mean_eff_adv /= b;
    }
    detail::score_epoch(rec, student, teachers, holdout, cfg.record_samples, cfg.record_attack);
    record.epochs.push_back(rec);
  }
  return {std::move(student), std::move(record)};
}

// ---------------------------------------------------------------------------
// Supervised training (teachers and the undistilled baseline student)

struct SupervisedConfig {
  SgdConfig optimizer;
  /// Train on PGD examples of the current model instead of clean inputs.
  bool adversarial = false;
  AttackConfig attack = AttackConfig::standard(Norm::l2, 0.1, 10);
};

/// Cross-entropy training on clean inputs, or PGD adversarial training.
inline MlpModel train_supervised(MlpModel model, const Dataset& data, const SupervisedConfig& cfg) {
  data.validate();
  if (model.input_dim() != data.dim() || model.num_classes() != data.num_classes)
    throw ContractError("train_supervised: model and dataset dimensions differ");
  if (cfg.optimizer.batch_size == 0 || !(cfg.optimizer.lr > 0.0))
    throw ContractError("train_supervised: invalid optimizer settings");
  Sgd opt(model, cfg.optimizer.lr, cfg.optimizer.momentum);
  const std::size_t n = data.size(), bs = cfg.optimizer.batch_size;
  for (int epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
    const auto order = detail::epoch_order(n, cfg.optimizer.seed, epoch);
    std::size_t batch = 0;
    for (std::size_t start = 0; start < n; start += bs, ++batch) {
      const std::size_t end = std::min(n, start + bs);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor x = take_rows(data.features, idx);
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = data.labels[idx[i]];
      if (cfg.adversarial) {
        AttackConfig a = cfg.attack;
        a.seed = mix_seed(cfg.attack.seed, (static_cast<std::uint64_t>(epoch) << 32) + batch);
        if (!a.box) a.box = data.input_range;
        x = pgd(model, x, y, a).x_adv;
      }
      Graph g;
      const ParamVars params = bind_params(g, model, true);
      Var loss = detail::guarded(epoch, [&] { return mean(cross_entropy(forward(g, params, g.constant(x)), y)); });
      const double value = loss.value()[0];
      if (!std::isfinite(value) || value > kDivergenceThreshold) throw TrainingDiverged(epoch, value);
      g.backward(loss);
      opt.step(model, g, params);
    }
  }
  return model;
}

}  // namespace ardlab
