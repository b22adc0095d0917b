#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"
#include "quadfit/tex/field.hpp"

namespace quadfit::render {

/// Stratified positions x_i = entry + (i + jitter_i)/n * (exit - entry);
/// jitter == nullptr centers every sample in its stratum.
inline void ea_sample_positions(const Vec3& entry, const Vec3& exit, int n, const double* jitter,
                                MatX3* positions) {
  if (n < 1) throw ConfigError("ea march: need at least one sample");
  positions->resize(n, 3);
  const Vec3 span = exit - entry;
  for (int i = 0; i < n; ++i) {
    const double s = (i + (jitter ? jitter[i] : 0.5)) / n;
    positions->row(i) = (entry + s * span).transpose();
  }
}

struct EaResult {
  Vec3 rgb = Vec3::Zero();
  double alpha = 0.0;
};

/// Front-to-back compositing with constant per-sample step delta. Weights
/// w_i = T_i - T_{i+1} telescope, so sum(w) + T_n == 1 up to roundoff.
inline EaResult ea_accumulate(const VecX& sigma, const MatX3& rgb, double delta) {
  EaResult out;
  double T = 1.0;
  for (int i = 0; i < sigma.size(); ++i) {
    const double T_next = T * std::exp(-sigma[i] * delta);
    out.rgb += (T - T_next) * rgb.row(i).transpose();
    T = T_next;
  }
  out.alpha = 1.0 - T;
  return out;
}

/// Reverse pass for ea_accumulate: upstream gradients on the composited rgb
/// and alpha become per-sample gradients plus a step-size gradient.
inline void ea_accumulate_backward(const VecX& sigma, const MatX3& rgb, double delta,
                                   const Vec3& d_rgb_out, double d_alpha_out, VecX* d_sigma,
                                   MatX3* d_rgb_samples, double* d_delta) {
  const int n = static_cast<int>(sigma.size());
  d_sigma->setZero(n);
  d_rgb_samples->setZero(n, 3);
  *d_delta = 0.0;
  std::vector<double> T(static_cast<size_t>(n) + 1);
  T[0] = 1.0;
  for (int i = 0; i < n; ++i) T[static_cast<size_t>(i) + 1] = T[static_cast<size_t>(i)] * std::exp(-sigma[i] * delta);
  double gT = -d_alpha_out;  // dL/dT_n before the w_{n-1} term
  for (int i = n - 1; i >= 0; --i) {
    const double u = d_rgb_out.dot(rgb.row(i).transpose());
    gT -= u;
    const double da = -gT * T[static_cast<size_t>(i) + 1];  // a_i = sigma_i * delta
    (*d_sigma)[i] = da * delta;
    *d_delta += da * sigma[i];
    d_rgb_samples->row(i) =
        ((T[static_cast<size_t>(i)] - T[static_cast<size_t>(i) + 1]) * d_rgb_out).transpose();
    gT = gT * std::exp(-sigma[i] * delta) + u;
  }
}

/// Single-segment march through the field; delta = |exit - entry| / n.
inline EaResult ea_march(const tex::TextureField& psi, const Vec3& entry, const Vec3& exit,
                         const Vec3& view_dir, int n_samples, const double* jitter = nullptr) {
  MatX3 positions;
  ea_sample_positions(entry, exit, n_samples, jitter, &positions);
  MatX3 dirs(n_samples, 3);
  dirs.rowwise() = view_dir.transpose();
  VecX sigma;
  MatX3 rgb;
  psi.eval(positions, dirs, &sigma, &rgb);
  return ea_accumulate(sigma, rgb, (exit - entry).norm() / n_samples);
}

}  // namespace quadfit::render
