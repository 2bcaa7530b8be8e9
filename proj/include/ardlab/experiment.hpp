#pragma once

// End-to-end pipelines behind the `ardlab` subcommands.
//
// Layout of the output directory:
//   seed<S>/clean_teacher.ardm, seed<S>/adv_teacher.ardm
//   seed<S>/student_<label>.ardm + .json (training record)
//   seed<S>/margin_report.json, seed<S>/saliency_maps.csv
//   teachers_metrics.csv, distill_metrics.csv, ablate_metrics.csv,
//   ablate_summary.csv, evaluate_metrics.csv, train_record.csv, saliency.csv

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ardlab/config.hpp"
#include "ardlab/data.hpp"
#include "ardlab/distill.hpp"
#include "ardlab/errors.hpp"
#include "ardlab/io.hpp"
#include "ardlab/margin.hpp"
#include "ardlab/metrics.hpp"
#include "ardlab/model.hpp"
#include "ardlab/saliency.hpp"

namespace ardlab {

struct RunOptions {
  std::optional<std::uint64_t> seed;  // run only this seed
  std::optional<std::filesystem::path> out;
  bool skip_existing = false;
  std::ostream* log = &std::cerr;
};

struct ExperimentData {
  Dataset train;
  Dataset test;
};

inline ExperimentData load_data(const DataSpec& spec) {
  ExperimentData d;
  switch (spec.kind) {
    case DataSpec::Kind::two_moons:
      d.train = gen_two_moons(spec.n_train, spec.noise, spec.seed);
      d.test = gen_two_moons(spec.n_test, spec.noise, mix_seed(spec.seed, 1));
      break;
    case DataSpec::Kind::blobs:
      d.train = gen_blobs(spec.n_train, spec.centers, spec.sigma, spec.seed);
      d.test = gen_blobs(spec.n_test, spec.centers, spec.sigma, mix_seed(spec.seed, 1));
      break;
    case DataSpec::Kind::mnist:
      d.train = load_mnist_idx(spec.mnist_dir / "train-images-idx3-ubyte", spec.mnist_dir / "train-labels-idx1-ubyte",
                               spec.train_limit, Split::train);
      d.test = load_mnist_idx(spec.mnist_dir / "t10k-images-idx3-ubyte", spec.mnist_dir / "t10k-labels-idx1-ubyte",
                              spec.test_limit, Split::test);
      d.test.num_classes = d.train.num_classes = std::max(d.train.num_classes, d.test.num_classes);
      break;
  }
  d.test.split = Split::test;
  if (spec.standardize) {
    standardize(d.train);
    apply_normalization(d.test, d.train.normalization);
    d.train.input_range.reset();
    d.test.input_range.reset();
  }
  return d;
}

// ---------------------------------------------------------------------------
// Formatting

inline std::string format_number(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

inline constexpr const char* kMetricsHeader = "strategy,eps,seed,acc,racc,sum_acc,runtime_s";

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const MetricsRow& r : rows) {
    out += r.strategy + "," + format_number("%.6g", r.eps) + "," + std::to_string(r.seed) + "," +
           format_number("%.2f", r.acc) + "," + format_number("%.2f", r.racc) + "," +
           format_number("%.2f", r.sum_acc) + "," + format_number("%.2f", r.runtime_s) + "\n";
  }
  return out;
}

/// Parses a file written by metrics_csv().
inline std::vector<MetricsRow> parse_metrics_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError("metrics csv: bad header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 7) throw FormatError("metrics csv: expected 7 fields in '" + line + "'");
    MetricsRow r;
    r.strategy = f[0];
    r.eps = std::stod(f[1]);
    r.seed = std::stoull(f[2]);
    r.acc = std::stod(f[3]);
    r.racc = std::stod(f[4]);
    r.sum_acc = std::stod(f[5]);
    r.runtime_s = std::stod(f[6]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Paths and seeds

namespace detail {

inline std::filesystem::path seed_dir(const std::filesystem::path& out, std::uint64_t seed) {
  return out / ("seed" + std::to_string(seed));
}

enum : std::uint64_t {
  kSaltCleanInit = 11, kSaltCleanTrain, kSaltAdvInit = 21, kSaltAdvTrain, kSaltAdvAttack,
  kSaltStudentInit = 31, kSaltStudentTrain, kSaltStudentAttack, kSaltEval = 41, kSaltVerify = 51,
  kSaltBaseline = 61,
};

inline std::vector<std::size_t> dims_for(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

inline MlpModel load_required(const std::filesystem::path& path, const char* hint) {
  if (!std::filesystem::exists(path))
    throw ContractError("missing checkpoint " + path.string() + " (run `ardlab " + hint + "` first)");
  return load(path);
}

inline std::string ratio_label(double adv, double org) {
  return "ratio_" + format_number("%g", adv) + ":" + format_number("%g", org);
}

inline std::string file_label(std::string label) {
  for (char& c : label)
    if (c == ':') c = '-';
  return label;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace detail

/// Shared state for one subcommand invocation.
struct Experiment {
  ExperimentConfig cfg;
  RunOptions opt;
  ExperimentData data;

  Experiment(ExperimentConfig c, RunOptions o) : cfg(std::move(c)), opt(std::move(o)) {
    if (opt.out) cfg.out = *opt.out;
    if (opt.seed) cfg.seeds = {*opt.seed};
    data = load_data(cfg.data);
  }

  std::ostream& log() const { return *opt.log; }
  std::filesystem::path out() const { return cfg.out; }
  std::filesystem::path seed_dir(std::uint64_t s) const { return detail::seed_dir(cfg.out, s); }
  std::filesystem::path teacher_path(std::uint64_t s, ModelRole r) const {
    return seed_dir(s) / (std::string(role_name(r)) + ".ardm");
  }
  std::filesystem::path student_path(std::uint64_t s, const std::string& label) const {
    return seed_dir(s) / ("student_" + detail::file_label(label) + ".ardm");
  }

  std::size_t input_dim() const { return data.train.dim(); }
  std::size_t classes() const { return data.train.num_classes; }

  /// Clean and robust accuracy over the configured radius grid.
  std::vector<MetricsRow> evaluate_grid(const MlpModel& m, const std::string& label, std::uint64_t seed,
                                        double train_seconds = 0.0) const {
    std::vector<MetricsRow> rows;
    for (double eps : cfg.eps_grid) {
      detail::Stopwatch sw;
      AttackConfig a = cfg.eval_attack;
      a.epsilon = eps;
      a.step_size = eps > 0.0 ? 2.5 * eps / a.steps : 1.0;
      a.seed = mix_seed(seed, detail::kSaltEval);
      MetricsRow row = evaluate(m, data.test, a, label, seed);
      row.runtime_s = cfg.record_runtime ? train_seconds + sw.seconds() : 0.0;
      rows.push_back(std::move(row));
    }
    return rows;
  }

  DistillConfig distill_config(std::uint64_t seed) const {
    DistillConfig d = cfg.distill;
    d.optimizer.seed = mix_seed(seed, detail::kSaltStudentTrain);
    d.attack.seed = mix_seed(seed, detail::kSaltStudentAttack);
    d.record_attack = cfg.eval_attack;
    d.record_attack.epsilon = cfg.eps_grid.back();
    d.record_attack.step_size = d.record_attack.epsilon > 0.0 ? 2.5 * d.record_attack.epsilon / d.record_attack.steps : 1.0;
    d.record_attack.seed = mix_seed(seed, detail::kSaltEval);
    return d;
  }

  MlpModel fresh_student(std::uint64_t seed) const {
    MlpModel m = make_mlp(detail::dims_for(input_dim(), cfg.student_hidden, classes()), ModelRole::student,
                          mix_seed(seed, detail::kSaltStudentInit));
    m.config_digest = cfg.digest;
    return m;
  }
};

// ---------------------------------------------------------------------------
// train-teachers

struct TeacherOutcome {
  std::vector<MetricsRow> rows;
  bool tradeoff_ok = true;
  std::string message;
};

inline TeacherOutcome run_train_teachers(Experiment& ex) {
  const ExperimentConfig& cfg = ex.cfg;
  TeacherOutcome outcome;
  for (std::uint64_t seed : cfg.seeds) {
    std::filesystem::create_directories(ex.seed_dir(seed));
    const auto clean_path = ex.teacher_path(seed, ModelRole::clean_teacher);
    const auto adv_path = ex.teacher_path(seed, ModelRole::adv_teacher);

    MlpModel clean, adv;
    double clean_s = 0.0, adv_s = 0.0;
    if (ex.opt.skip_existing && std::filesystem::exists(clean_path)) {
      clean = load(clean_path);
    } else {
      detail::Stopwatch sw;
      ex.log() << "[seed " << seed << "] training clean teacher\n";
      SupervisedConfig sc;
      sc.optimizer = cfg.teachers.optimizer;
      sc.optimizer.seed = mix_seed(seed, detail::kSaltCleanTrain);
      clean = train_supervised(make_mlp(detail::dims_for(ex.input_dim(), cfg.teachers.clean_hidden, ex.classes()),
                                        ModelRole::clean_teacher, mix_seed(seed, detail::kSaltCleanInit)),
                               ex.data.train, sc);
      clean.config_digest = cfg.digest;
      save(clean, clean_path);
      clean_s = sw.seconds();
    }
    if (ex.opt.skip_existing && std::filesystem::exists(adv_path)) {
      adv = load(adv_path);
    } else {
      detail::Stopwatch sw;
      ex.log() << "[seed " << seed << "] training adversarial teacher\n";
      SupervisedConfig sc;
      sc.optimizer = cfg.teachers.optimizer;
      sc.optimizer.seed = mix_seed(seed, detail::kSaltAdvTrain);
      sc.adversarial = true;
      sc.attack = cfg.teachers.attack;
      sc.attack.seed = mix_seed(seed, detail::kSaltAdvAttack);
      adv = train_supervised(make_mlp(detail::dims_for(ex.input_dim(), cfg.teachers.adv_hidden, ex.classes()),
                                      ModelRole::adv_teacher, mix_seed(seed, detail::kSaltAdvInit)),
                             ex.data.train, sc);
      adv.config_digest = cfg.digest;
      save(adv, adv_path);
      adv_s = sw.seconds();
    }

    for (auto& r : ex.evaluate_grid(clean, "clean_teacher", seed, clean_s)) outcome.rows.push_back(r);
    for (auto& r : ex.evaluate_grid(adv, "adv_teacher", seed, adv_s)) outcome.rows.push_back(r);

    AttackConfig at = cfg.eval_attack;
    at.norm = cfg.teachers.attack.norm;
    at.epsilon = cfg.teachers.attack.epsilon;
    at.step_size = at.epsilon > 0.0 ? 2.5 * at.epsilon / at.steps : 1.0;
    at.seed = mix_seed(seed, detail::kSaltEval);
    const MetricsRow c = evaluate(clean, ex.data.test, at, "clean_teacher", seed);
    const MetricsRow a = evaluate(adv, ex.data.test, at, "adv_teacher", seed);
    ex.log() << "[seed " << seed << "] at training radius: clean teacher acc " << c.acc << " racc " << c.racc
             << ", adversarial teacher acc " << a.acc << " racc " << a.racc << "\n";
    if (!(c.acc > a.acc && a.racc > c.racc)) {
      outcome.tradeoff_ok = false;
      outcome.message += "seed " + std::to_string(seed) + ": expected clean teacher acc > adversarial teacher acc (" +
                         format_number("%.2f", c.acc) + " vs " + format_number("%.2f", a.acc) +
                         ") and adversarial teacher racc > clean teacher racc (" + format_number("%.2f", a.racc) +
                         " vs " + format_number("%.2f", c.racc) + "); ";
    }
  }
  write_file_atomic(ex.out() / "teachers_metrics.csv", metrics_csv(outcome.rows));
  return outcome;
}

// ---------------------------------------------------------------------------
// distill / ablate

inline nlohmann::ordered_json record_json(const std::string& label, const DistillConfig& d, const TrainRecord& rec) {
  nlohmann::ordered_json j;
  j["label"] = label;
  j["strategy"] = strategy_name(d.strategy);
  j["alpha"] = d.alpha;
  j["ratio_adv"] = d.ratio_adv;
  j["ratio_org"] = d.ratio_org;
  auto& epochs = j["epochs"] = nlohmann::ordered_json::array();
  for (const EpochRecord& e : rec.epochs) {
    epochs.push_back({{"clean_loss", e.clean_loss},
                      {"adv_loss", e.adv_loss},
                      {"mean_w_adv", e.mean_w_adv},
                      {"mean_eff_adv", e.mean_eff_adv},
                      {"acc", e.acc},
                      {"racc", e.racc},
                      {"mean_discrepancy", e.mean_discrepancy}});
  }
  j["final_mean_eff_adv"] = rec.epochs.empty() ? effective_weights(d.strategy, 0.5, d).w_adv
                                               : rec.epochs.back().mean_eff_adv;
  return j;
}

struct StudentRun {
  MlpModel student;
  nlohmann::ordered_json record;
  double seconds = 0.0;
};

/// Trains (or reloads) one distilled student and stores checkpoint + record.
inline StudentRun distill_student(Experiment& ex, std::uint64_t seed, const std::string& label,
                                  const DistillConfig& d, const MlpModel& t_org, const MlpModel& t_adv) {
  const auto path = ex.student_path(seed, label);
  auto json_path = path;
  json_path.replace_extension(".json");
  if (ex.opt.skip_existing && std::filesystem::exists(path) && std::filesystem::exists(json_path)) {
    return {load(path), nlohmann::ordered_json::parse(read_file(json_path)), 0.0};
  }
  ex.log() << "[seed " << seed << "] distilling student " << label << "\n";
  detail::Stopwatch sw;
  TrainResult r = train(ex.fresh_student(seed), t_org, t_adv, ex.data.train, d, &ex.data.test);
  StudentRun run{std::move(r.student), record_json(label, d, r.record), sw.seconds()};
  std::filesystem::create_directories(path.parent_path());
  save(run.student, path);
  write_file_atomic(json_path, run.record.dump(2) + "\n");
  return run;
}

inline std::string train_record_csv(const std::vector<std::pair<std::uint64_t, nlohmann::ordered_json>>& recs) {
  std::string out = "seed,label,epoch,clean_loss,adv_loss,mean_w_adv,mean_eff_adv,acc,racc,mean_discrepancy\n";
  for (const auto& [seed, j] : recs) {
    std::size_t e = 0;
    for (const auto& ep : j["epochs"]) {
      out += std::to_string(seed) + "," + j["label"].get<std::string>() + "," + std::to_string(e++);
      for (const char* key : {"clean_loss", "adv_loss", "mean_w_adv", "mean_eff_adv"})
        out += "," + format_number("%.10g", ep[key].get<double>());
      out += "," + format_number("%.2f", ep["acc"].get<double>()) + "," +
             format_number("%.2f", ep["racc"].get<double>()) + "," +
             format_number("%.10g", ep["mean_discrepancy"].get<double>()) + "\n";
    }
  }
  return out;
}

inline std::vector<MetricsRow> run_distill(Experiment& ex) {
  std::vector<MetricsRow> rows;
  std::vector<std::pair<std::uint64_t, nlohmann::ordered_json>> records;
  const std::string label(strategy_name(ex.cfg.distill.strategy));
  for (std::uint64_t seed : ex.cfg.seeds) {
    const MlpModel t_org = detail::load_required(ex.teacher_path(seed, ModelRole::clean_teacher), "train-teachers");
    const MlpModel t_adv = detail::load_required(ex.teacher_path(seed, ModelRole::adv_teacher), "train-teachers");
    StudentRun run = distill_student(ex, seed, label, ex.distill_config(seed), t_org, t_adv);
    for (auto& r : ex.evaluate_grid(run.student, label, seed, run.seconds)) rows.push_back(r);
    records.emplace_back(seed, std::move(run.record));
  }
  write_file_atomic(ex.out() / "distill_metrics.csv", metrics_csv(rows));
  write_file_atomic(ex.out() / "train_record.csv", train_record_csv(records));
  return rows;
}

/// Mean over seeds per (strategy, eps), plus an eps-averaged row per strategy.
inline std::string ablate_summary_csv(const std::vector<MetricsRow>& rows) {
  struct Acc {
    double acc = 0, racc = 0, sum = 0;
    int n = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, std::map<double, Acc>> by;
  for (const MetricsRow& r : rows) {
    if (!by.count(r.strategy)) order.push_back(r.strategy);
    Acc& a = by[r.strategy][r.eps];
    a.acc += r.acc;
    a.racc += r.racc;
    a.sum += r.sum_acc;
    ++a.n;
  }
  std::string out = "strategy,eps,acc,racc,sum_acc\n";
  for (const std::string& s : order) {
    Acc all;
    for (const auto& [eps, a] : by[s]) {
      out += s + "," + format_number("%.6g", eps) + "," + format_number("%.4f", a.acc / a.n) + "," +
             format_number("%.4f", a.racc / a.n) + "," + format_number("%.4f", a.sum / a.n) + "\n";
      all.acc += a.acc;
      all.racc += a.racc;
      all.sum += a.sum;
      all.n += a.n;
    }
    out += s + ",all," + format_number("%.4f", all.acc / all.n) + "," + format_number("%.4f", all.racc / all.n) +
           "," + format_number("%.4f", all.sum / all.n) + "\n";
  }
  return out;
}

/// Strategy comparison followed by the ratio grid of the weighted strategy.
inline std::vector<MetricsRow> run_ablate(Experiment& ex) {
  struct Variant {
    std::string label;
    DistillConfig d;
  };
  std::vector<Variant> variants;
  for (Strategy s : ex.cfg.ablate_strategies) {
    DistillConfig d = ex.cfg.distill;
    d.strategy = s;
    variants.push_back({std::string(strategy_name(s)), d});
  }
  for (const RatioPoint& r : ex.cfg.ablate_ratios) {
    DistillConfig d = ex.cfg.distill;
    d.strategy = Strategy::weighted;
    d.ratio_adv = r.adv;
    d.ratio_org = r.org;
    variants.push_back({detail::ratio_label(r.adv, r.org), d});
  }

  std::vector<MetricsRow> rows;
  for (std::uint64_t seed : ex.cfg.seeds) {
    const MlpModel t_org = detail::load_required(ex.teacher_path(seed, ModelRole::clean_teacher), "train-teachers");
    const MlpModel t_adv = detail::load_required(ex.teacher_path(seed, ModelRole::adv_teacher), "train-teachers");
    const DistillConfig base = ex.distill_config(seed);
    // A ratio point equal to an already trained variant reuses that student.
    std::vector<std::pair<DistillConfig, StudentRun>> trained;
    for (const Variant& v : variants) {
      DistillConfig d = base;
      d.strategy = v.d.strategy;
      d.alpha = v.d.alpha;
      d.ratio_adv = v.d.ratio_adv;
      d.ratio_org = v.d.ratio_org;
      const auto same = [&](const auto& e) {
        return e.first.strategy == d.strategy && e.first.alpha == d.alpha && e.first.ratio_adv == d.ratio_adv &&
               e.first.ratio_org == d.ratio_org;
      };
      auto it = std::find_if(trained.begin(), trained.end(), same);
      if (it == trained.end()) {
        // Variants that `distill` would also train share its checkpoints.
        const bool shared = d.alpha == ex.cfg.distill.alpha && d.ratio_adv == ex.cfg.distill.ratio_adv &&
                            d.ratio_org == ex.cfg.distill.ratio_org;
        const std::string file = shared ? std::string(strategy_name(d.strategy)) : "ablate_" + v.label;
        trained.emplace_back(d, distill_student(ex, seed, file, d, t_org, t_adv));
        it = std::prev(trained.end());
      }
      for (auto& r : ex.evaluate_grid(it->second.student, v.label, seed, it->second.seconds)) rows.push_back(r);
    }
  }
  write_file_atomic(ex.out() / "ablate_metrics.csv", metrics_csv(rows));
  write_file_atomic(ex.out() / "ablate_summary.csv", ablate_summary_csv(rows));
  return rows;
}

// ---------------------------------------------------------------------------
// verify-bound

struct VerifyOutcome {
  std::vector<MarginReport> reports;  // one per seed
  std::size_t violations = 0;
  std::size_t certified = 0;
};

inline VerifyOutcome run_verify_bound(Experiment& ex) {
  VerifyOutcome out;
  const std::string label(strategy_name(ex.cfg.distill.strategy));
  const VerifySpec& v = ex.cfg.verify;
  const Dataset test = v.samples == 0 || v.samples >= ex.data.test.size()
                           ? ex.data.test
                           : ex.data.test.subset(0, v.samples, Split::test);
  for (std::uint64_t seed : ex.cfg.seeds) {
    const MlpModel t_org = detail::load_required(ex.teacher_path(seed, ModelRole::clean_teacher), "train-teachers");
    const MlpModel t_adv = detail::load_required(ex.teacher_path(seed, ModelRole::adv_teacher), "train-teachers");
    const auto student_path = ex.student_path(seed, label);
    const MlpModel student = detail::load_required(student_path, "distill");

    std::vector<double> weights = v.weights;
    if (weights.empty()) {
      auto json_path = student_path;
      json_path.replace_extension(".json");
      if (!std::filesystem::exists(json_path))
        throw ContractError("missing training record " + json_path.string() + " (run `ardlab distill` first)");
      const double w_adv = nlohmann::ordered_json::parse(read_file(json_path))["final_mean_eff_adv"].get<double>();
      weights = {w_adv, 1.0 - w_adv};
    }
    if (weights.size() != 2) throw ConfigError("[verify] weights: expected two weights (adv, clean)");

    AttackConfig a = AttackConfig::standard(Norm::l2, 0.0, v.steps, true, mix_seed(seed, detail::kSaltVerify));
    a.restarts = v.restarts;
    VerifyOptions vo;
    vo.center_logits = v.center_logits;
    vo.radius_fraction = v.radius_fraction;
    const MlpModel* teachers[] = {&t_adv, &t_org};
    ex.log() << "[seed " << seed << "] verifying certified radii on " << test.size() << " samples\n";
    MarginReport report = verify_bound(student, teachers, weights, test, a, vo);
    ex.log() << "[seed " << seed << "] certified " << report.certified << ", violations " << report.violations
             << ", bound violations " << report.bound_violations << "\n";
    nlohmann::ordered_json j = to_json(report);
    j["seed"] = seed;
    write_file_atomic(ex.seed_dir(seed) / "margin_report.json", j.dump(2) + "\n");
    out.violations += report.violations;
    out.certified += report.certified;
    out.reports.push_back(std::move(report));
  }
  return out;
}

// ---------------------------------------------------------------------------
// saliency

struct SaliencyRow {
  std::uint64_t seed = 0;
  std::string teacher;
  std::size_t samples = 0;
  double distilled_l2 = 0.0;
  double undistilled_l2 = 0.0;
};

inline std::vector<SaliencyRow> run_saliency(Experiment& ex) {
  std::vector<SaliencyRow> rows;
  const std::string label(strategy_name(ex.cfg.distill.strategy));
  const std::size_t n = std::min(ex.cfg.saliency.samples, ex.data.test.size());
  if (n == 0) throw ConfigError("[saliency] samples: must be >= 1");
  for (std::uint64_t seed : ex.cfg.seeds) {
    const MlpModel t_org = detail::load_required(ex.teacher_path(seed, ModelRole::clean_teacher), "train-teachers");
    const MlpModel t_adv = detail::load_required(ex.teacher_path(seed, ModelRole::adv_teacher), "train-teachers");
    const MlpModel distilled = detail::load_required(ex.student_path(seed, label), "distill");

    // Same architecture, initialization and optimizer, trained on labels only.
    const auto base_path = ex.student_path(seed, "undistilled");
    MlpModel undistilled;
    if (ex.opt.skip_existing && std::filesystem::exists(base_path)) {
      undistilled = load(base_path);
    } else {
      ex.log() << "[seed " << seed << "] training undistilled student\n";
      SupervisedConfig sc;
      sc.optimizer = ex.cfg.distill.optimizer;
      sc.optimizer.seed = mix_seed(seed, detail::kSaltBaseline);
      undistilled = train_supervised(ex.fresh_student(seed), ex.data.train, sc);
      save(undistilled, base_path);
    }

    const std::pair<const char*, const MlpModel*> teachers[] = {{"clean_teacher", &t_org}, {"adv_teacher", &t_adv}};
    const std::pair<const char*, const MlpModel*> models[] = {
        {"clean_teacher", &t_org}, {"adv_teacher", &t_adv}, {"distilled", &distilled}, {"undistilled", &undistilled}};
    std::vector<SaliencyMap> maps;
    std::vector<SaliencyRow> seed_rows;
    for (const auto& [name, model] : teachers) seed_rows.push_back({seed, name, n, 0.0, 0.0});
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor x = slice_rows(ex.data.test.features, i, i + 1);
      const int y = ex.data.test.labels[i];
      std::map<std::string, SaliencyMap> by_model;
      for (const auto& [name, model] : models) {
        SaliencyMap m = input_gradient_map(*model, x, y, name, i);
        if (ex.cfg.saliency.normalize) m = normalized(std::move(m));
        by_model.emplace(name, m);
        maps.push_back(std::move(m));
      }
      for (SaliencyRow& r : seed_rows) {
        r.distilled_l2 += saliency_l2(by_model.at("distilled"), by_model.at(r.teacher)) / static_cast<double>(n);
        r.undistilled_l2 += saliency_l2(by_model.at("undistilled"), by_model.at(r.teacher)) / static_cast<double>(n);
      }
    }
    if (ex.cfg.saliency.export_maps) write_file_atomic(ex.seed_dir(seed) / "saliency_maps.csv", maps_to_csv(maps));
    for (auto& r : seed_rows) rows.push_back(std::move(r));
  }
  std::string csv = "seed,teacher,samples,distilled_l2,undistilled_l2\n";
  for (const SaliencyRow& r : rows)
    csv += std::to_string(r.seed) + "," + r.teacher + "," + std::to_string(r.samples) + "," +
           format_number("%.10g", r.distilled_l2) + "," + format_number("%.10g", r.undistilled_l2) + "\n";
  write_file_atomic(ex.out() / "saliency.csv", csv);
  return rows;
}

// ---------------------------------------------------------------------------
// evaluate

/// Scores a single checkpoint if `[evaluate] model` is set, else both
/// teachers and the distilled student of every seed.
inline std::vector<MetricsRow> run_evaluate(Experiment& ex) {
  std::vector<MetricsRow> rows;
  for (std::uint64_t seed : ex.cfg.seeds) {
    if (ex.cfg.evaluate_model) {
      const MlpModel m = detail::load_required(*ex.cfg.evaluate_model, "train-teachers");
      for (auto& r : ex.evaluate_grid(m, ex.cfg.evaluate_model->stem().string(), seed)) rows.push_back(r);
      continue;
    }
    const std::string label(strategy_name(ex.cfg.distill.strategy));
    const std::pair<std::string, std::filesystem::path> entries[] = {
        {"clean_teacher", ex.teacher_path(seed, ModelRole::clean_teacher)},
        {"adv_teacher", ex.teacher_path(seed, ModelRole::adv_teacher)},
        {label, ex.student_path(seed, label)}};
    for (const auto& [name, path] : entries) {
      const MlpModel m = detail::load_required(path, name == label ? "distill" : "train-teachers");
      for (auto& r : ex.evaluate_grid(m, name, seed)) rows.push_back(r);
    }
  }
  write_file_atomic(ex.out() / "evaluate_metrics.csv", metrics_csv(rows));
  return rows;
}

}  // namespace ardlab
