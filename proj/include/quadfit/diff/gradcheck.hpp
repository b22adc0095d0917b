#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/rng.hpp"
#include "quadfit/diff/param_vector.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace quadfit::diff {

/// An objective exposes a plain evaluation (used by finite differences) and a
/// combined evaluation with hand-derived reverse-mode gradient.
struct Objective {
  std::function<double(const ParamVector&)> value;
  std::function<double(const ParamVector&, ParamVector*)> value_and_grad;
};

/// Analytic gradient with per-block finiteness screening.
inline ParamVector grad(const Objective& obj, const ParamVector& at) {
  ParamVector g = at.zeros_like();
  const double v = obj.value_and_grad(at, &g);
  if (!std::isfinite(v)) throw NonFiniteGradient("objective value not finite");
  for (int b = 0; b < g.n_blocks(); ++b)
    if (!g.block(b).allFinite())
      throw NonFiniteGradient("gradient block '" + g.block_name(b) + "' not finite");
  return g;
}

struct BlockCheck {
  std::string name;
  double max_rel_error = 0.0;
  int probes = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<BlockCheck> blocks;
  double tolerance = 0.0;
  double step = 0.0;
  bool pass = true;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tolerance"] = tolerance;
    j["step"] = step;
    j["pass"] = pass;
    j["blocks"] = nlohmann::json::array();
    for (const auto& b : blocks)
      j["blocks"].push_back({{"name", b.name},
                             {"max_rel_error", b.max_rel_error},
                             {"probes", b.probes},
                             {"pass", b.pass}});
    return j;
  }
};

/// Central differences on n_probes random coordinates per block;
/// rel err = |analytic - fd| / max(|analytic|, |fd|, 1e-8).
inline GradCheckReport finite_diff_check(const Objective& obj, const ParamVector& at, double h,
                                         double tolerance, int n_probes, uint64_t seed = 0) {
  if (!(h > 0)) throw ConfigError("finite_diff_check: h must be > 0");
  const ParamVector analytic = grad(obj, at);
  GradCheckReport report;
  report.tolerance = tolerance;
  report.step = h;
  Rng rng(seed);
  ParamVector probe = at;
  for (int b = 0; b < at.n_blocks(); ++b) {
    BlockCheck check;
    check.name = at.block_name(b);
    const int size = at.block_size(b);
    const int n = std::min(n_probes, size);
    check.probes = n;
    // sample without replacement when the block is small
    std::vector<int> coords;
    if (size <= n_probes) {
      for (int i = 0; i < size; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < n; ++i) coords.push_back(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(size))));
    }
    for (const int c : coords) {
      const int idx = at.block_offset(b) + c;
      const double saved = probe.values()[idx];
      probe.values()[idx] = saved + h;
      const double fp = obj.value(probe);
      probe.values()[idx] = saved - h;
      const double fm = obj.value(probe);
      probe.values()[idx] = saved;
      const double fd = (fp - fm) / (2 * h);
      const double a = analytic.values()[idx];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      check.max_rel_error = std::max(check.max_rel_error, rel);
    }
    check.pass = check.max_rel_error <= tolerance;
    report.pass = report.pass && check.pass;
    report.blocks.push_back(check);
  }
  return report;
}

}  // namespace quadfit::diff
