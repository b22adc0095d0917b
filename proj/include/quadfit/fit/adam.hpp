#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"

#include <cmath>

namespace quadfit::fit {

/// Adam with bias correction and a per-coordinate learning rate vector
/// (each parameter block gets its own rate).
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  VecX m, v;
  long step_count = 0;

  void init(int n) {
    m = VecX::Zero(n);
    v = VecX::Zero(n);
    step_count = 0;
  }

  void step(Eigen::Ref<VecX> x, const VecX& g, const VecX& lr) {
    if (g.size() != m.size() || x.size() != m.size() || lr.size() != m.size())
      throw DimensionMismatch("adam: state/gradient size");
    ++step_count;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    x -= lr.cwiseProduct((m / c1).cwiseQuotient(((v / c2).cwiseSqrt().array() + eps).matrix()));
  }
};

}  // namespace quadfit::fit
