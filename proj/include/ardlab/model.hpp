#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ardlab/autodiff.hpp"
#include "ardlab/errors.hpp"
#include "ardlab/io.hpp"
#include "ardlab/random.hpp"
#include "ardlab/tensor.hpp"

namespace ardlab {

enum class ModelRole : std::uint32_t { clean_teacher = 0, adv_teacher = 1, student = 2 };

inline std::string_view role_name(ModelRole r) {
  switch (r) {
    case ModelRole::clean_teacher: return "clean_teacher";
    case ModelRole::adv_teacher: return "adv_teacher";
    case ModelRole::student: return "student";
  }
  return "unknown";
}

/// Fully connected relu network. Layer i maps x -> x W_i + b_i with W_i of
/// shape [dims[i], dims[i+1]]; relu on hidden layers, identity on the output.
struct MlpModel {
  std::vector<std::size_t> layer_dims;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  ModelRole role = ModelRole::student;
  std::uint64_t config_digest = 0;

  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t num_classes() const { return layer_dims.back(); }
  std::size_t num_layers() const { return weights.size(); }

  void validate() const {
    if (layer_dims.size() < 2) throw ContractError("model needs at least input and output dims");
    if (weights.size() + 1 != layer_dims.size() || biases.size() != weights.size())
      throw ContractError("model layer count does not match layer_dims");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].shape() != Shape{layer_dims[l], layer_dims[l + 1]} ||
          biases[l].shape() != Shape{layer_dims[l + 1]})
        throw ContractError("layer " + std::to_string(l) + " parameter shapes do not match layer_dims");
    }
  }
};

/// Glorot-uniform weights and zero biases from a seeded generator.
inline MlpModel make_mlp(std::vector<std::size_t> dims, ModelRole role, std::uint64_t seed) {
  if (dims.size() < 2) throw ContractError("make_mlp: need at least two layer dims");
  MlpModel m;
  m.layer_dims = std::move(dims);
  m.role = role;
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
    const std::size_t fi = m.layer_dims[l], fo = m.layer_dims[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fi + fo));
    Tensor w({fi, fo});
    for (double& v : w.data()) v = rng.uniform(-limit, limit);
    m.weights.push_back(std::move(w));
    m.biases.emplace_back(Shape{fo}, 0.0);
  }
  return m;
}

namespace detail {
inline Tensor as_batch(const Tensor& x) {
  return x.rank() == 1 ? x.reshaped({1, x.dim(0)}) : x;
}
}  // namespace detail

/// Logits for a batch [n, d] (or a single sample [d], returned as [1, C]).
inline Tensor forward(const MlpModel& model, const Tensor& x_in) {
  const Tensor x = detail::as_batch(x_in);
  if (x.rank() != 2 || x.dim(1) != model.input_dim())
    throw ContractError("forward: input " + shape_str(x_in.shape()) + " does not match input_dim " +
                        std::to_string(model.input_dim()));
  Tensor h = x;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const std::size_t n = h.dim(0), k = h.dim(1), m = model.layer_dims[l + 1];
    Tensor out({n, m});
    kernels::matmul(h.data(), model.weights[l].data(), out.data(), n, k, m);
    const Tensor& b = model.biases[l];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < m; ++j) out[r * m + j] += b[j];
    if (l + 1 < model.num_layers())
      for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    h = std::move(out);
  }
  if (!h.all_finite()) throw NumericError("forward: non-finite logits");
  return h;
}

/// Parameter leaves of a model recorded on a graph.
struct ParamVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

inline ParamVars bind_params(Graph& g, const MlpModel& model, bool requires_grad) {
  ParamVars p;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    p.weights.push_back(g.leaf(model.weights[l], requires_grad));
    p.biases.push_back(g.leaf(model.biases[l], requires_grad));
  }
  return p;
}

/// Records the forward pass of a batch [n, d] using already bound parameters.
inline Var forward(Graph&, const ParamVars& params, Var x) {
  const std::size_t layers = params.weights.size();
  if (x.value().rank() != 2 || x.value().dim(1) != params.weights.front().value().dim(0))
    throw ContractError("forward: input " + shape_str(x.shape()) + " does not match input_dim " +
                        std::to_string(params.weights.front().value().dim(0)));
  Var h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    h = add_bias(matmul(h, params.weights[l]), params.biases[l]);
    if (l + 1 < layers) h = relu(h);
  }
  return h;
}

/// Records the forward pass with the model's parameters as constants.
inline Var forward(Graph& g, const MlpModel& model, Var x) {
  return forward(g, bind_params(g, model, false), x);
}

/// 64-bit FNV-1a over the raw parameter bytes.
inline std::uint64_t weights_digest(const MlpModel& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const Tensor& t) {
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  };
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    feed(m.weights[l]);
    feed(m.biases[l]);
  }
  return h;
}

inline std::uint64_t text_digest(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Lipschitz estimates (w.r.t. the l2 norm on inputs and logits)

struct PowerIterationOptions {
  double tolerance = 1e-10;
  int max_iterations = 1000;
  std::uint64_t seed = 0x5eed;
};

/// Largest singular value of a [rows, cols] matrix by power iteration on W^T W.
inline double spectral_norm(const Tensor& w, const PowerIterationOptions& opt = {}) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  Rng rng(opt.seed);
  std::vector<double> v(cols), u(rows);
  for (double& x : v) x = rng.normal();
  double nv = l2_norm(v);
  for (double& x : v) x /= nv;

  double sigma = 0.0;
  for (int it = 1; it <= opt.max_iterations; ++it) {
    std::fill(u.begin(), u.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += w[r * cols + c] * v[c];
      u[r] = s;
    }
    const double next = l2_norm(u);
    if (next == 0.0) return 0.0;
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) v[c] += w[r * cols + c] * u[r];
    nv = l2_norm(v);
    if (nv == 0.0) return next;
    for (double& x : v) x /= nv;
    if (std::abs(next - sigma) <= opt.tolerance * next) return next;
    sigma = next;
  }
  throw EstimationError("spectral norm power iteration did not converge", opt.max_iterations);
}

/// Product of layer spectral norms; relu is 1-Lipschitz so this bounds the
/// whole network.
inline double lipschitz_upper(const MlpModel& model, const PowerIterationOptions& opt = {}) {
  double L = 1.0;
  for (const Tensor& w : model.weights) L *= spectral_norm(w, opt);
  if (!std::isfinite(L)) throw NumericError("lipschitz_upper: non-finite bound");
  return L;
}

/// Max ratio ||f(a) - f(b)|| / ||a - b|| over the pairs; coincident pairs are skipped.
inline double lipschitz_lower_empirical(const MlpModel& model,
                                        std::span<const std::pair<Tensor, Tensor>> pairs) {
  double best = 0.0;
  for (const auto& [a, b] : pairs) {
    double dx = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dx += (a[i] - b[i]) * (a[i] - b[i]);
    if (dx == 0.0) continue;
    const Tensor fa = forward(model, a), fb = forward(model, b);
    double dy = 0.0;
    for (std::size_t i = 0; i < fa.size(); ++i) dy += (fa[i] - fb[i]) * (fa[i] - fb[i]);
    best = std::max(best, std::sqrt(dy) / std::sqrt(dx));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "ARDM" | u32 version | u32 layer count | per layer: u32 rows, u32 cols
//   | per layer: rows*cols weights then cols biases (f64)
//   | u32 role | u64 config digest
//
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const MlpModel& m) {
  m.validate();
  ByteWriter w;
  w.bytes("ARDM");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(m.num_layers()));
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    w.u32(static_cast<std::uint32_t>(m.layer_dims[l]));
    w.u32(static_cast<std::uint32_t>(m.layer_dims[l + 1]));
  }
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    for (double v : m.weights[l].data()) w.f64(v);
    for (double v : m.biases[l].data()) w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(m.role));
  w.u64(m.config_digest);
  return w.take();
}

inline MlpModel decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes, /*big_endian=*/false);
  if (r.bytes(4, "magic") != "ARDM") throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t layers = r.u32("layer count");
  if (layers == 0 || layers > 64) throw FormatError("checkpoint: implausible layer count " + std::to_string(layers));
  MlpModel m;
  for (std::uint32_t l = 0; l < layers; ++l) {
    const std::uint32_t rows = r.u32("layer rows"), cols = r.u32("layer cols");
    if (rows == 0 || cols == 0) throw FormatError("checkpoint: zero layer dimension");
    if (l == 0) m.layer_dims.push_back(rows);
    else if (m.layer_dims.back() != rows) throw FormatError("checkpoint: layer dims do not chain");
    m.layer_dims.push_back(cols);
  }
  for (std::uint32_t l = 0; l < layers; ++l) {
    const std::size_t rows = m.layer_dims[l], cols = m.layer_dims[l + 1];
    Tensor w({rows, cols});
    for (double& v : w.data()) v = r.f64("weights");
    Tensor b({cols});
    for (double& v : b.data()) v = r.f64("biases");
    if (!w.all_finite() || !b.all_finite()) throw FormatError("checkpoint: non-finite parameters");
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  const std::uint32_t role = r.u32("role");
  if (role > 2) throw FormatError("checkpoint: unknown role " + std::to_string(role));
  m.role = static_cast<ModelRole>(role);
  m.config_digest = r.u64("config digest");
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return m;
}

inline void save(const MlpModel& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(m));
}

inline MlpModel load(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace ardlab
