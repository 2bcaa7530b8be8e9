#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ardlab/autodiff.hpp"
#include "ardlab/errors.hpp"
#include "ardlab/model.hpp"
#include "ardlab/random.hpp"
#include "ardlab/tensor.hpp"

namespace ardlab {

enum class Norm { linf, l2 };

inline const char* norm_name(Norm n) { return n == Norm::linf ? "linf" : "l2"; }

struct AttackConfig {
  Norm norm = Norm::linf;
  double epsilon = 0.0;
  int steps = 10;
  double step_size = 1.0;
  int restarts = 1;
  bool random_start = true;
  std::uint64_t seed = 0;
  /// Valid input box; perturbed inputs are clamped into it.
  std::optional<std::pair<double, double>> box;

  /// Step size 2.5 * epsilon / steps.
  static AttackConfig standard(Norm norm, double epsilon, int steps = 10, bool random_start = true,
                               std::uint64_t seed = 0) {
    AttackConfig c;
    c.norm = norm;
    c.epsilon = epsilon;
    c.steps = steps;
    c.step_size = epsilon > 0.0 ? 2.5 * epsilon / steps : 1.0;
    c.random_start = random_start;
    c.seed = seed;
    return c;
  }

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ContractError("attack: epsilon must be >= 0");
    if (steps < 1) throw ContractError("attack: steps must be >= 1");
    if (!(step_size > 0.0)) throw ContractError("attack: step_size must be > 0");
    if (restarts < 1) throw ContractError("attack: restarts must be >= 1");
    if (box && !(box->first < box->second)) throw ContractError("attack: empty input box");
  }
};

/// Per-sample losses [n] of the perturbed batch.
using BatchLoss = std::function<Var(Graph&, Var x_adv)>;

struct AttackResult {
  Tensor x_adv;
  Tensor delta;
  std::vector<double> loss;  // per sample, at the returned point
};

struct AttackOptions {
  /// Return the best iterate seen in each restart rather than the last one.
  bool keep_best_iterate = false;
  /// Called after every projected step with (restart, step, delta).
  std::function<void(int, int, const Tensor&)> on_step;
  /// Called with the summed loss at every evaluated iterate of every restart.
  std::function<void(int, int, double)> on_loss;
};

namespace detail {

/// Projects delta onto the epsilon ball and returns the perturbed point,
/// clamped into the box. delta is reset to point - x; the point is kept as the
/// iterate itself since x + (point - x) need not round back to point.
inline Tensor project(Tensor& delta, const Tensor& x, const AttackConfig& cfg) {
  const std::size_t n = delta.rows(), d = delta.cols();
  Tensor point = x;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = delta.row(r);
    if (cfg.norm == Norm::linf) {
      for (double& v : row) v = std::clamp(v, -cfg.epsilon, cfg.epsilon);
    } else {
      const double nrm = l2_norm(row);
      if (nrm > cfg.epsilon) {
        const double s = cfg.epsilon / nrm;
        for (double& v : row) v *= s;
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      double& p = point[r * d + j];
      p += row[j];
      if (cfg.box) p = std::clamp(p, cfg.box->first, cfg.box->second);
      row[j] = p - x[r * d + j];
    }
  }
  return point;
}

inline Tensor random_start(const Tensor& x, const AttackConfig& cfg, Rng& rng) {
  Tensor delta(x.shape(), 0.0);
  const std::size_t n = x.rows(), d = x.cols();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = delta.row(r);
    if (cfg.norm == Norm::linf) {
      for (double& v : row) v = rng.uniform(-cfg.epsilon, cfg.epsilon);
    } else {
      for (double& v : row) v = rng.normal();
      const double nrm = l2_norm(row);
      const double radius = cfg.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
      for (double& v : row) v = nrm > 0.0 ? v * radius / nrm : 0.0;
    }
  }
  return delta;
}

inline std::string step_label(int restart, int step) {
  return "restart " + std::to_string(restart) + ", step " + std::to_string(step);
}

inline Var evaluate_loss(const BatchLoss& loss_fn, Graph& g, Var x, int restart, int step) {
  try {
    return loss_fn(g, x);
  } catch (const NumericError& e) {
    throw NumericError(std::string("attack: ") + e.what() + " at " + step_label(restart, step));
  }
}

/// Loss values and input gradient at the given point.
inline std::pair<std::vector<double>, Tensor> loss_and_grad(const BatchLoss& loss_fn, const Tensor& point,
                                                            int restart, int step) {
  Graph g;
  Var xv = g.leaf(point, true);
  Var per_sample = evaluate_loss(loss_fn, g, xv, restart, step);
  if (per_sample.value().size() != point.rows())
    throw ContractError("attack loss must return one value per sample");
  std::vector<double> values(per_sample.value().data().begin(), per_sample.value().data().end());
  for (double v : values)
    if (!std::isfinite(v))
      throw NumericError("attack: non-finite loss at " + step_label(restart, step));
  g.backward(sum(per_sample));
  return {std::move(values), g.grad(xv)};
}

inline std::vector<double> loss_only(const BatchLoss& loss_fn, const Tensor& point, int restart, int step) {
  Graph g;
  Var per_sample = evaluate_loss(loss_fn, g, g.leaf(point, false), restart, step);
  std::vector<double> values(per_sample.value().data().begin(), per_sample.value().data().end());
  for (double v : values)
    if (!std::isfinite(v))
      throw NumericError("attack: non-finite loss at " + step_label(restart, step));
  return values;
}

}  // namespace detail

/// Projected gradient ascent on a per-sample loss within the epsilon ball.
/// With several restarts each sample keeps the restart with the highest loss.
inline AttackResult pgd(const BatchLoss& loss_fn, const Tensor& x_in, const AttackConfig& cfg,
                        const AttackOptions& opt = {}) {
  cfg.validate();
  const Tensor x = x_in.rank() == 1 ? x_in.reshaped({1, x_in.dim(0)}) : x_in;
  const std::size_t n = x.rows(), d = x.cols();

  AttackResult best;
  best.delta = Tensor(x.shape(), 0.0);
  best.x_adv = x;
  best.loss.assign(n, -std::numeric_limits<double>::infinity());

  if (cfg.epsilon == 0.0) {
    best.loss = detail::loss_only(loss_fn, x, 0, 0);
    return best;
  }

  Rng rng(cfg.seed);
  for (int restart = 0; restart < cfg.restarts; ++restart) {
    Tensor delta = cfg.random_start ? detail::random_start(x, cfg, rng) : Tensor(x.shape(), 0.0);
    Tensor point = cfg.random_start ? detail::project(delta, x, cfg) : x;
    Tensor run_best_delta = delta, run_best_point = point;
    std::vector<double> run_best_loss(n, -std::numeric_limits<double>::infinity());
    std::vector<double> loss;

    auto note = [&](int step, const std::vector<double>& values) {
      if (opt.on_loss) {
        double s = 0.0;
        for (double v : values) s += v;
        opt.on_loss(restart, step, s);
      }
      if (!opt.keep_best_iterate) return;
      for (std::size_t r = 0; r < n; ++r)
        if (values[r] > run_best_loss[r]) {
          run_best_loss[r] = values[r];
          std::copy(delta.row(r).begin(), delta.row(r).end(), run_best_delta.row(r).begin());
          std::copy(point.row(r).begin(), point.row(r).end(), run_best_point.row(r).begin());
        }
    };

    for (int step = 0; step < cfg.steps; ++step) {
      auto [values, grad] = detail::loss_and_grad(loss_fn, point, restart, step);
      note(step, values);
      for (std::size_t r = 0; r < n; ++r) {
        auto g = grad.row(r);
        auto dr = delta.row(r);
        if (cfg.norm == Norm::linf) {
          for (std::size_t j = 0; j < d; ++j)
            dr[j] += cfg.step_size * (g[j] > 0.0 ? 1.0 : (g[j] < 0.0 ? -1.0 : 0.0));
        } else {
          const double gn = l2_norm(g);
          if (gn > 0.0)
            for (std::size_t j = 0; j < d; ++j) dr[j] += cfg.step_size * g[j] / gn;
        }
      }
      point = detail::project(delta, x, cfg);
      if (opt.on_step) opt.on_step(restart, step, delta);
    }
    loss = detail::loss_only(loss_fn, point, restart, cfg.steps);
    note(cfg.steps, loss);
    if (opt.keep_best_iterate) {
      delta = std::move(run_best_delta);
      point = std::move(run_best_point);
      loss = std::move(run_best_loss);
    }

    for (std::size_t r = 0; r < n; ++r)
      if (loss[r] > best.loss[r]) {
        best.loss[r] = loss[r];
        std::copy(delta.row(r).begin(), delta.row(r).end(), best.delta.row(r).begin());
        std::copy(point.row(r).begin(), point.row(r).end(), best.x_adv.row(r).begin());
      }
  }
  return best;
}

/// Per-sample cross-entropy of the model's logits.
inline BatchLoss cross_entropy_loss(const MlpModel& model, const std::vector<int>& labels) {
  return [&model, &labels](Graph& g, Var x) { return cross_entropy(forward(g, model, x), labels); };
}

inline AttackResult pgd(const MlpModel& model, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg,
                        const AttackOptions& opt = {}) {
  return pgd(cross_entropy_loss(model, y), x, cfg, opt);
}

/// x + epsilon * sign(grad_x CE); zero gradient coordinates do not move.
inline Tensor fgsm(const MlpModel& model, const Tensor& x_in, const std::vector<int>& y, double epsilon,
                   std::optional<std::pair<double, double>> box = std::nullopt) {
  if (!(epsilon >= 0.0)) throw ContractError("fgsm: epsilon must be >= 0");
  const Tensor x = x_in.rank() == 1 ? x_in.reshaped({1, x_in.dim(0)}) : x_in;
  if (epsilon == 0.0) return x;
  Graph g;
  Var xv = g.leaf(x, true);
  g.backward(sum(cross_entropy(forward(g, model, xv), y)));
  const Tensor& grad = g.grad(xv);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += epsilon * (grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0));
    if (box) out[i] = std::clamp(out[i], box->first, box->second);
  }
  return out;
}

struct FeatureAttackResult {
  Tensor delta;
  Tensor x_adv;
  std::vector<double> value;  // ||m_adv(x + delta) - m_org(x)||^2 per sample
};

/// Maximizes the squared l2 distance between the perturbed output of
/// `m_adv` and the clean output of `m_org`. Never returns a point worse than
/// the start of the ascent.
inline FeatureAttackResult feature_attack(const MlpModel& m_adv, const MlpModel& m_org, const Tensor& x_in,
                                          const AttackConfig& cfg) {
  if (m_adv.input_dim() != m_org.input_dim() || m_adv.num_classes() != m_org.num_classes())
    throw ContractError("feature_attack: models must share input and output dims");
  const Tensor x = x_in.rank() == 1 ? x_in.reshaped({1, x_in.dim(0)}) : x_in;
  const Tensor reference = forward(m_org, x);
  BatchLoss objective = [&](Graph& g, Var xv) {
    return row_sum(square(sub(forward(g, m_adv, xv), g.constant(reference))));
  };
  AttackOptions opt;
  opt.keep_best_iterate = true;
  AttackResult r = pgd(objective, x, cfg, opt);
  return {std::move(r.delta), std::move(r.x_adv), std::move(r.loss)};
}

}  // namespace ardlab
