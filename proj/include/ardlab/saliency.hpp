#pragma once

#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ardlab/autodiff.hpp"
#include "ardlab/errors.hpp"
#include "ardlab/model.hpp"

namespace ardlab {

/// |d logit_target / d x| for one input sample.
struct SaliencyMap {
  Tensor values;
  std::string model_id;
  std::size_t sample_id = 0;
  int target = 0;
};

inline SaliencyMap input_gradient_map(const MlpModel& model, const Tensor& x, int target, std::string model_id = {},
                                      std::size_t sample_id = 0) {
  if (target < 0 || static_cast<std::size_t>(target) >= model.num_classes())
    throw ContractError("input_gradient_map: target class out of range");
  const Tensor batch = x.rank() == 1 ? x.reshaped({1, x.dim(0)}) : x;
  if (batch.rows() != 1) throw ContractError("input_gradient_map: expects a single sample");
  Graph g;
  Var xv = g.leaf(batch, true);
  Tensor pick({1, model.num_classes()}, 0.0);
  pick[static_cast<std::size_t>(target)] = 1.0;
  g.backward(sum(mul(forward(g, model, xv), g.constant(pick))));
  Tensor grad = g.grad(xv).reshaped(x.shape());
  for (double& v : grad.data()) v = std::abs(v);
  return {std::move(grad), std::move(model_id), sample_id, target};
}

/// Map scaled to unit l2 norm (a zero map is returned unchanged).
inline SaliencyMap normalized(SaliencyMap m) {
  const double n = l2_norm(m.values.data());
  if (n > 0.0)
    for (double& v : m.values.data()) v /= n;
  return m;
}

/// ||a - b||_2
inline double saliency_l2(const SaliencyMap& a, const SaliencyMap& b) {
  if (a.values.shape() != b.values.shape()) throw ContractError("saliency_l2: map shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// One row per map: sample_id, model_id, target, then the flattened values.
inline std::string maps_to_csv(std::span<const SaliencyMap> maps) {
  std::ostringstream os;
  os.precision(17);
  os << "sample_id,model_id,target";
  const std::size_t d = maps.empty() ? 0 : maps.front().values.size();
  for (std::size_t j = 0; j < d; ++j) os << ",v" << j;
  os << '\n';
  for (const SaliencyMap& m : maps) {
    os << m.sample_id << ',' << m.model_id << ',' << m.target;
    for (double v : m.values.data()) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace ardlab
