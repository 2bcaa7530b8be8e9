#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ardlab/attacks.hpp"
#include "ardlab/data.hpp"
#include "ardlab/model.hpp"
#include "ardlab/parallel.hpp"

namespace ardlab {

/// One line of a metrics table. Accuracies are percentages rounded to two
/// decimals; sum_acc is the sum of the rounded values.
struct MetricsRow {
  std::string strategy;
  double eps = 0.0;
  std::uint64_t seed = 0;
  double acc = 0.0;
  double racc = 0.0;
  double sum_acc = 0.0;
  double runtime_s = 0.0;
};

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

inline constexpr std::size_t kEvalChunk = 100;

/// Number of rows whose argmax equals the label.
inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  std::size_t ok = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r)
    if (static_cast<int>(argmax(logits.row(r))) == labels[r]) ++ok;
  return ok;
}

struct AccuracyCounts {
  std::size_t clean = 0;
  std::size_t robust = 0;
  std::size_t total = 0;
};

/// Clean and PGD-robust correct counts. The dataset is processed in fixed
/// chunks with per-chunk attack seeds, so counts do not depend on threading.
inline AccuracyCounts accuracy_counts(const MlpModel& model, const Dataset& data, const AttackConfig& attack) {
  attack.validate();
  const std::size_t n = data.size();
  const std::size_t chunks = (n + kEvalChunk - 1) / kEvalChunk;
  std::vector<std::size_t> clean(chunks, 0), robust(chunks, 0);
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t begin = c * kEvalChunk, end = std::min(n, begin + kEvalChunk);
    const Tensor x = slice_rows(data.features, begin, end);
    const std::vector<int> y(data.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                             data.labels.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor clean_logits = forward(model, x);
    clean[c] = count_correct(clean_logits, y);
    if (attack.epsilon == 0.0) {
      robust[c] = clean[c];
      return;
    }
    AttackConfig cfg = attack;
    cfg.seed = mix_seed(attack.seed, c);
    if (!cfg.box) cfg.box = data.input_range;
    const AttackResult adv = pgd(model, x, y, cfg);
    robust[c] = count_correct(forward(model, adv.x_adv), y);
  });
  AccuracyCounts out;
  out.total = n;
  for (std::size_t c = 0; c < chunks; ++c) {
    out.clean += clean[c];
    out.robust += robust[c];
  }
  return out;
}

/// Clean accuracy, PGD robust accuracy and their sum, in percent.
inline MetricsRow evaluate(const MlpModel& model, const Dataset& data, const AttackConfig& attack,
                           std::string strategy = "model", std::uint64_t seed = 0) {
  data.validate();
  if (data.dim() != model.input_dim() || data.num_classes != model.num_classes())
    throw ContractError("evaluate: model and dataset dimensions differ");
  const AccuracyCounts c = accuracy_counts(model, data, attack);
  MetricsRow row;
  row.strategy = std::move(strategy);
  row.eps = attack.epsilon;
  row.seed = seed;
  row.acc = round2(100.0 * static_cast<double>(c.clean) / static_cast<double>(c.total));
  row.racc = round2(100.0 * static_cast<double>(c.robust) / static_cast<double>(c.total));
  row.sum_acc = row.acc + row.racc;
  return row;
}

}  // namespace ardlab
