#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "ardlab/autodiff.hpp"

namespace ardlab {

/// Builds a scalar from a single input variable inside the given graph.
using ScalarFn = std::function<Var(Graph&, Var)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFn& fn, const Tensor& point, double h) {
  if (h < 1e-7 || h > 1e-3) throw ContractError("grad_check: h must lie in [1e-7, 1e-3]");

  Tensor analytic;
  {
    Graph g;
    Var x = g.leaf(point, true);
    g.backward(fn(g, x));
    analytic = g.grad(x);
  }

  auto eval = [&](const Tensor& p) {
    Graph g;
    return fn(g, g.leaf(p, false)).value()[0];
  };

  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = eval(probe);
    probe[i] = orig - h;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace ardlab
