#pragma once

// Experiment configuration.
//
// Plain text, one `key = value` per line, grouped under `[section]` headers.
// `#` starts a comment. Unknown sections or keys are errors, as are repeated
// keys. Lists are comma separated; numbers may be written as fractions
// (`1/255`); ratios as `adv:org`.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "ardlab/attacks.hpp"
#include "ardlab/distill.hpp"
#include "ardlab/errors.hpp"
#include "ardlab/io.hpp"

namespace ardlab {

struct ConfigEntry {
  std::string value;
  int line = 0;
};

using ConfigSections = std::map<std::string, std::map<std::string, ConfigEntry>>;

namespace detail {
inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t p = s.find(sep, start);
    out.push_back(trim(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start)));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}
}  // namespace detail

inline ConfigSections parse_config_text(std::string_view text) {
  ConfigSections sections;
  std::string current;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      current = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (current.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty section name");
      sections[current];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected `key = value`");
    if (current.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": key outside of any section");
    std::string key = detail::trim(std::string_view(line).substr(0, eq));
    std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    auto& sec = sections[current];
    if (sec.count(key))
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "' in [" + current + "]");
    sec[key] = {std::move(value), line_no};
  }
  return sections;
}

struct DataSpec {
  enum class Kind { two_moons, blobs, mnist } kind = Kind::two_moons;
  std::size_t n_train = 1000;
  std::size_t n_test = 1000;
  double noise = 0.1;
  std::vector<std::vector<double>> centers;
  double sigma = 1.0;
  std::uint64_t seed = 0;
  std::filesystem::path mnist_dir = "data/mnist";
  std::size_t train_limit = 10000;
  std::size_t test_limit = 2000;
  bool standardize = false;
};

struct TeacherSpec {
  std::vector<std::size_t> clean_hidden{64, 64};
  std::vector<std::size_t> adv_hidden{64, 64};
  SgdConfig optimizer;
  AttackConfig attack = AttackConfig::standard(Norm::l2, 0.1, 10);
  bool require_tradeoff = true;
};

struct VerifySpec {
  int restarts = 20;
  int steps = 10;
  double radius_fraction = 0.99;
  bool center_logits = true;
  /// Empty means: use the mean effective weights recorded during training.
  std::vector<double> weights;
  std::size_t samples = 0;  // 0 = whole test split
};

struct SaliencySpec {
  std::size_t samples = 20;
  bool normalize = false;
  bool export_maps = true;
};

struct RatioPoint {
  double adv = 0.0;
  double org = 0.0;
};

struct ExperimentConfig {
  DataSpec data;
  TeacherSpec teachers;
  std::vector<std::size_t> student_hidden{32};
  DistillConfig distill;
  /// Evaluation attack template; one MetricsRow per entry of eps_grid.
  AttackConfig eval_attack = AttackConfig::standard(Norm::l2, 0.1, 10);
  std::vector<double> eps_grid;
  VerifySpec verify;
  SaliencySpec saliency;
  std::vector<Strategy> ablate_strategies{Strategy::single_adv, Strategy::average, Strategy::weighted};
  std::vector<RatioPoint> ablate_ratios{{1, 0.5}, {2, 0.5}, {3, 0.5}, {3.5, 0.5}, {3, 1}, {7, 0.3}};
  std::optional<std::filesystem::path> evaluate_model;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::filesystem::path out = "out";
  bool record_runtime = false;
  /// Digest of the config text, stamped into checkpoints.
  std::uint64_t digest = 0;
};

namespace detail {

class SectionReader {
 public:
  SectionReader(const ConfigSections& all, const std::string& name) : name_(name) {
    if (auto it = all.find(name); it != all.end()) entries_ = &it->second;
  }

  const ConfigEntry* find(const std::string& key) {
    seen_.insert(key);
    if (!entries_) return nullptr;
    auto it = entries_->find(key);
    return it == entries_->end() ? nullptr : &it->second;
  }

  [[noreturn]] void fail(const ConfigEntry& e, const std::string& key, const std::string& why) const {
    throw ConfigError("line " + std::to_string(e.line) + ": [" + name_ + "] " + key + ": " + why);
  }

  double number(const ConfigEntry& e, const std::string& key, std::string_view text) const {
    const std::string t = trim(text);
    if (const auto slash = t.find('/'); slash != std::string::npos) {
      const double num = number(e, key, std::string_view(t).substr(0, slash));
      const double den = number(e, key, std::string_view(t).substr(slash + 1));
      if (den == 0.0) fail(e, key, "division by zero");
      return num / den;
    }
    double v = 0.0;
    const auto* first = t.data();
    const auto* last = t.data() + t.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || t.empty()) fail(e, key, "expected a number, got '" + t + "'");
    return v;
  }

  void get(const std::string& key, double& out) {
    if (const auto* e = find(key)) out = number(*e, key, e->value);
  }
  void get(const std::string& key, int& out) {
    if (const auto* e = find(key)) out = static_cast<int>(integer(*e, key, e->value));
  }
  template <typename U>
    requires std::is_unsigned_v<U> && (!std::is_same_v<U, bool>)
  void get(const std::string& key, U& out) {
    if (const auto* e = find(key)) out = static_cast<U>(integer(*e, key, e->value));
  }
  void get(const std::string& key, bool& out) {
    if (const auto* e = find(key)) {
      if (e->value == "true") out = true;
      else if (e->value == "false") out = false;
      else fail(*e, key, "expected true or false");
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const auto* e = find(key)) out = e->value;
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (const auto* e = find(key)) {
      out.clear();
      for (const auto& part : split(e->value, ',')) out.push_back(number(*e, key, part));
    }
  }
  template <typename U>
    requires std::is_unsigned_v<U>
  void get(const std::string& key, std::vector<U>& out) {
    if (const auto* e = find(key)) {
      out.clear();
      for (const auto& part : split(e->value, ',')) out.push_back(static_cast<U>(integer(*e, key, part)));
    }
  }
  void get_norm(const std::string& key, Norm& out) {
    if (const auto* e = find(key)) {
      if (e->value == "linf") out = Norm::linf;
      else if (e->value == "l2") out = Norm::l2;
      else fail(*e, key, "expected linf or l2");
    }
  }

  long long integer(const ConfigEntry& e, const std::string& key, std::string_view text) const {
    const std::string t = trim(text);
    long long v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
      fail(e, key, "expected an integer, got '" + t + "'");
    if (v < 0) fail(e, key, "must be nonnegative");
    return v;
  }

  /// Rejects keys that no reader asked for.
  void finish() const {
    if (!entries_) return;
    for (const auto& [key, entry] : *entries_)
      if (!seen_.count(key)) fail(entry, key, "unknown key");
  }

 private:
  std::string name_;
  const std::map<std::string, ConfigEntry>* entries_ = nullptr;
  std::set<std::string> seen_;
};

inline void read_attack(SectionReader& r, AttackConfig& a, const std::string& prefix) {
  r.get_norm(prefix + "norm", a.norm);
  r.get(prefix + "epsilon", a.epsilon);
  r.get(prefix + "steps", a.steps);
  a.step_size = a.epsilon > 0.0 ? 2.5 * a.epsilon / std::max(1, a.steps) : 1.0;
  r.get(prefix + "step_size", a.step_size);
  r.get(prefix + "restarts", a.restarts);
  r.get(prefix + "random_start", a.random_start);
}

inline void read_sgd(SectionReader& r, SgdConfig& s) {
  r.get("epochs", s.epochs);
  r.get("lr", s.lr);
  r.get("momentum", s.momentum);
  r.get("batch_size", s.batch_size);
}

inline AttackEndpoint parse_endpoint(SectionReader& r, const ConfigEntry& e, const std::string& key) {
  if (e.value == "student") return AttackEndpoint::student;
  if (e.value == "clean_teacher") return AttackEndpoint::clean_teacher;
  if (e.value == "adv_teacher") return AttackEndpoint::adv_teacher;
  r.fail(e, key, "expected student, clean_teacher or adv_teacher");
}

}  // namespace detail

/// Parses and validates a config. Relative paths resolve against `base_dir`.
inline ExperimentConfig parse_experiment_config(std::string_view text,
                                                const std::filesystem::path& base_dir = ".") {
  const ConfigSections sections = parse_config_text(text);
  static const std::set<std::string> known{"data",    "teachers", "student", "distill", "eval",
                                           "verify",  "saliency", "ablate",  "evaluate", "run"};
  for (const auto& [name, entries] : sections) {
    if (!known.count(name)) {
      const int line = entries.empty() ? 0 : entries.begin()->second.line;
      throw ConfigError("line " + std::to_string(line) + ": unknown section [" + name + "]");
    }
  }

  ExperimentConfig cfg;
  cfg.digest = text_digest(text);

  {
    detail::SectionReader r(sections, "data");
    if (const auto* e = r.find("kind")) {
      if (e->value == "two_moons") cfg.data.kind = DataSpec::Kind::two_moons;
      else if (e->value == "blobs") cfg.data.kind = DataSpec::Kind::blobs;
      else if (e->value == "mnist") cfg.data.kind = DataSpec::Kind::mnist;
      else r.fail(*e, "kind", "expected two_moons, blobs or mnist");
    }
    r.get("n_train", cfg.data.n_train);
    r.get("n_test", cfg.data.n_test);
    r.get("noise", cfg.data.noise);
    r.get("sigma", cfg.data.sigma);
    r.get("seed", cfg.data.seed);
    r.get("train_limit", cfg.data.train_limit);
    r.get("test_limit", cfg.data.test_limit);
    r.get("standardize", cfg.data.standardize);
    if (const auto* e = r.find("centers")) {
      for (const auto& c : detail::split(e->value, ';')) {
        std::vector<double> point;
        for (const auto& part : detail::split(c, ',')) point.push_back(r.number(*e, "centers", part));
        cfg.data.centers.push_back(std::move(point));
      }
    }
    if (const auto* e = r.find("mnist_dir")) {
      std::filesystem::path p = e->value;
      cfg.data.mnist_dir = (p.is_absolute() ? p : base_dir / p).lexically_normal();
    }
    r.finish();
  }
  {
    detail::SectionReader r(sections, "teachers");
    r.get("clean_hidden", cfg.teachers.clean_hidden);
    r.get("adv_hidden", cfg.teachers.adv_hidden);
    detail::read_sgd(r, cfg.teachers.optimizer);
    detail::read_attack(r, cfg.teachers.attack, "attack_");
    r.get("require_tradeoff", cfg.teachers.require_tradeoff);
    r.finish();
  }
  {
    detail::SectionReader r(sections, "student");
    r.get("hidden", cfg.student_hidden);
    r.finish();
  }
  {
    detail::SectionReader r(sections, "distill");
    DistillConfig& d = cfg.distill;
    if (const auto* e = r.find("strategy")) {
      auto s = parse_strategy(e->value);
      if (!s) r.fail(*e, "strategy", "expected single_adv, average, weighted or alpha");
      d.strategy = *s;
    }
    r.get("alpha", d.alpha);
    r.get("ratio_adv", d.ratio_adv);
    r.get("ratio_org", d.ratio_org);
    r.get("slope_lambda", d.slope_lambda);
    r.get("offset_tau", d.offset_tau);
    r.get("upsilon", d.upsilon);
    r.get("temperature", d.temperature);
    if (const auto* e = r.find("kl_direction")) {
      if (e->value == "teacher_reference") d.direction = KlDirection::teacher_reference;
      else if (e->value == "student_reference") d.direction = KlDirection::student_reference;
      else r.fail(*e, "kl_direction", "expected teacher_reference or student_reference");
    }
    detail::read_sgd(r, d.optimizer);
    d.attack.random_start = false;
    detail::read_attack(r, d.attack, "attack_");
    if (const auto* e = r.find("attack_source")) d.attack_source = detail::parse_endpoint(r, *e, "attack_source");
    if (const auto* e = r.find("attack_reference"))
      d.attack_reference = detail::parse_endpoint(r, *e, "attack_reference");
    r.get("record_samples", d.record_samples);
    r.finish();
  }
  {
    detail::SectionReader r(sections, "eval");
    r.get_norm("norm", cfg.eval_attack.norm);
    r.get("steps", cfg.eval_attack.steps);
    r.get("restarts", cfg.eval_attack.restarts);
    r.get("random_start", cfg.eval_attack.random_start);
    if (const auto* e = r.find("eps")) {
      for (const auto& part : detail::split(e->value, ',')) cfg.eps_grid.push_back(r.number(*e, "eps", part));
    }
    r.finish();
  }
  {
    detail::SectionReader r(sections, "verify");
    r.get("restarts", cfg.verify.restarts);
    r.get("steps", cfg.verify.steps);
    r.get("radius_fraction", cfg.verify.radius_fraction);
    r.get("center_logits", cfg.verify.center_logits);
    r.get("weights", cfg.verify.weights);
    r.get("samples", cfg.verify.samples);
    r.finish();
  }
  {
    detail::SectionReader r(sections, "saliency");
    r.get("samples", cfg.saliency.samples);
    r.get("normalize", cfg.saliency.normalize);
    r.get("export_maps", cfg.saliency.export_maps);
    r.finish();
  }
  {
    detail::SectionReader r(sections, "ablate");
    if (const auto* e = r.find("strategies")) {
      cfg.ablate_strategies.clear();
      for (const auto& part : detail::split(e->value, ',')) {
        auto s = parse_strategy(part);
        if (!s) r.fail(*e, "strategies", "unknown strategy '" + part + "'");
        cfg.ablate_strategies.push_back(*s);
      }
    }
    if (const auto* e = r.find("ratios")) {
      cfg.ablate_ratios.clear();
      for (const auto& part : detail::split(e->value, ',')) {
        const auto colon = part.find(':');
        if (colon == std::string::npos) r.fail(*e, "ratios", "expected adv:org, got '" + part + "'");
        cfg.ablate_ratios.push_back({r.number(*e, "ratios", std::string_view(part).substr(0, colon)),
                                     r.number(*e, "ratios", std::string_view(part).substr(colon + 1))});
      }
    }
    r.finish();
  }
  {
    detail::SectionReader r(sections, "evaluate");
    if (const auto* e = r.find("model")) {
      std::filesystem::path p = e->value;
      cfg.evaluate_model = (p.is_absolute() ? p : base_dir / p).lexically_normal();
    }
    r.finish();
  }
  {
    detail::SectionReader r(sections, "run");
    r.get("seeds", cfg.seeds);
    if (const auto* e = r.find("out")) {
      std::filesystem::path p = e->value;
      cfg.out = (p.is_absolute() ? p : base_dir / p).lexically_normal();
    } else {
      cfg.out = base_dir / "out";
    }
    r.get("record_runtime", cfg.record_runtime);
    r.finish();
  }

  if (cfg.eps_grid.empty()) {
    // Pixel-unit radii for images, l2 radii for synthetic data.
    if (cfg.data.kind == DataSpec::Kind::mnist) {
      cfg.eval_attack.norm = Norm::linf;
      cfg.eps_grid = {1.0 / 255, 2.0 / 255, 3.0 / 255, 4.0 / 255};
    } else {
      cfg.eps_grid = {0.05, 0.1, 0.2};
    }
  }
  if (cfg.seeds.empty()) throw ConfigError("[run] seeds: at least one seed is required");
  if (cfg.data.kind == DataSpec::Kind::blobs && cfg.data.centers.size() < 2)
    throw ConfigError("[data] centers: blobs need at least 2 centers");
  for (double e : cfg.eps_grid)
    if (!(e >= 0.0)) throw ConfigError("[eval] eps: radii must be nonnegative");
  if (cfg.ablate_ratios.empty()) throw ConfigError("[ablate] ratios: grid must be nonempty");
  try {
    cfg.distill.validate();
    cfg.teachers.attack.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("invalid settings: ") + e.what());
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception&) {
    throw ConfigError("cannot read config file " + path.string());
  }
  return parse_experiment_config(text, path.has_parent_path() ? path.parent_path() : ".");
}

}  // namespace ardlab
