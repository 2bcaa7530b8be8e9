// ardlab: train teachers, distill students, run ablations, verify certified
// radii and compare saliency maps from a single experiment config.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ardlab/config.hpp"
#include "ardlab/errors.hpp"
#include "ardlab/experiment.hpp"

namespace {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kViolations = 3,
  kTradeoffFailed = 4,
};

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool skip_existing = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "Experiment config file")->required();
  cmd->add_option("--seed", args.seed, "Run a single seed instead of the configured list");
  cmd->add_option("--out", args.out, "Output directory (overrides [run] out)");
  cmd->add_flag("--skip-existing", args.skip_existing, "Reuse checkpoints that already exist");
}

int dispatch(const std::string& name, const CommonArgs& args) {
  using namespace ardlab;
  ExperimentConfig cfg = load_experiment_config(args.config);
  RunOptions opt;
  opt.seed = args.seed;
  if (args.out) opt.out = std::filesystem::path(*args.out);
  opt.skip_existing = args.skip_existing;
  Experiment ex(std::move(cfg), opt);

  if (name == "train-teachers") {
    const TeacherOutcome t = run_train_teachers(ex);
    if (ex.cfg.teachers.require_tradeoff && !t.tradeoff_ok) {
      std::cerr << "error: teacher robustness trade-off not met: " << t.message << "\n";
      return kTradeoffFailed;
    }
  } else if (name == "distill") {
    run_distill(ex);
  } else if (name == "ablate") {
    run_ablate(ex);
  } else if (name == "verify-bound") {
    const VerifyOutcome v = run_verify_bound(ex);
    std::cout << "certified " << v.certified << " violations " << v.violations << "\n";
    if (v.violations > 0) return kViolations;
  } else if (name == "saliency") {
    for (const SaliencyRow& r : run_saliency(ex))
      std::cout << "seed " << r.seed << " " << r.teacher << ": distilled " << r.distilled_l2 << " undistilled "
                << r.undistilled_l2 << "\n";
  } else if (name == "evaluate") {
    run_evaluate(ex);
  }
  std::cout << name << ": outputs in " << ex.out().string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-teacher adversarial robust distillation toolkit"};
  app.require_subcommand(1);
  CommonArgs args;
  const char* names[][2] = {
      {"train-teachers", "Train the clean and adversarial teachers"},
      {"distill", "Distill a student from both teachers"},
      {"ablate", "Compare distillation strategies and teacher ratios"},
      {"verify-bound", "Certify radii and attack just inside them"},
      {"saliency", "Compare input-gradient maps of students and teachers"},
      {"evaluate", "Score checkpoints on clean and adversarial inputs"},
  };
  for (const auto& [name, help] : names) add_common(app.add_subcommand(name, help), args);

  CLI11_PARSE(app, argc, argv);
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    return dispatch(name, args);
  } catch (const ardlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
