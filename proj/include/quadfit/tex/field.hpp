#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"
#include "quadfit/core/mlp.hpp"
#include "quadfit/core/rng.hpp"

#include <array>

namespace quadfit::tex {

/// Three axis-aligned feature planes over a box; samples concatenate the
/// bilinear lookups of the (x,y), (x,z), (y,z) projections.
struct TriplaneGrid {
  int R = 64, C = 8;
  Vec3 lo = -Vec3::Ones(), hi = Vec3::Ones();
  std::array<MatX, 3> planes;  // (R*R) x C, row = iv * R + iu

  static constexpr int kAxes[3][2] = {{0, 1}, {0, 2}, {1, 2}};

  void init(Rng& rng, double stddev = 0.01) {
    if (R < 2) throw ConfigError("triplane: R must be >= 2");
    if (C < 1) throw ConfigError("triplane: C must be >= 1");
    if (!((hi - lo).array() > 0).all()) throw ConfigError("triplane: empty box");
    for (auto& p : planes) {
      p.resize(R * R, C);
      for (int i = 0; i < p.size(); ++i) p.data()[i] = stddev * rng.normal();
    }
  }

  int n_features() const { return 3 * C; }
  int n_params() const { return 3 * R * R * C; }

  /// Per-plane interpolation state kept for the backward pass.
  struct SampleAux {
    int iu[3], iv[3];
    double fu[3], fv[3];
    double du_dx[3], dv_dx[3];  // grid-coordinate scale (0 when clamped)
  };

  void sample(const Vec3& p, Eigen::Ref<VecX> feat, SampleAux* aux, bool* clamped = nullptr) const {
    for (int pl = 0; pl < 3; ++pl) {
      const int a0 = kAxes[pl][0], a1 = kAxes[pl][1];
      double scale0 = (R - 1) / (hi[a0] - lo[a0]);
      double scale1 = (R - 1) / (hi[a1] - lo[a1]);
      double u = (p[a0] - lo[a0]) * scale0;
      double v = (p[a1] - lo[a1]) * scale1;
      if (u < 0 || u > R - 1) {
        u = std::clamp(u, 0.0, static_cast<double>(R - 1));
        scale0 = 0;
        if (clamped) *clamped = true;
      }
      if (v < 0 || v > R - 1) {
        v = std::clamp(v, 0.0, static_cast<double>(R - 1));
        scale1 = 0;
        if (clamped) *clamped = true;
      }
      const int iu = std::min(static_cast<int>(u), R - 2);
      const int iv = std::min(static_cast<int>(v), R - 2);
      const double fu = u - iu, fv = v - iv;
      const auto& pm = planes[static_cast<size_t>(pl)];
      const int base = iv * R + iu;
      feat.segment(pl * C, C) = ((1 - fu) * (1 - fv) * pm.row(base) +
                                 fu * (1 - fv) * pm.row(base + 1) +
                                 (1 - fu) * fv * pm.row(base + R) + fu * fv * pm.row(base + R + 1))
                                    .transpose();
      if (aux) {
        aux->iu[pl] = iu;
        aux->iv[pl] = iv;
        aux->fu[pl] = fu;
        aux->fv[pl] = fv;
        aux->du_dx[pl] = scale0;
        aux->dv_dx[pl] = scale1;
      }
    }
  }

  /// Scatters feature gradients into d_planes and returns the position
  /// gradient (zero along clamped axes).
  Vec3 sample_backward(const SampleAux& aux, Eigen::Ref<const VecX> d_feat,
                       std::array<MatX, 3>* d_planes) const {
    Vec3 d_p = Vec3::Zero();
    for (int pl = 0; pl < 3; ++pl) {
      const int a0 = kAxes[pl][0], a1 = kAxes[pl][1];
      const double fu = aux.fu[pl], fv = aux.fv[pl];
      const int base = aux.iv[pl] * R + aux.iu[pl];
      const Eigen::RowVectorXd df = d_feat.segment(pl * C, C).transpose();
      if (d_planes) {
        auto& dp = (*d_planes)[static_cast<size_t>(pl)];
        dp.row(base) += (1 - fu) * (1 - fv) * df;
        dp.row(base + 1) += fu * (1 - fv) * df;
        dp.row(base + R) += (1 - fu) * fv * df;
        dp.row(base + R + 1) += fu * fv * df;
      }
      const auto& pm = planes[static_cast<size_t>(pl)];
      const Eigen::RowVectorXd d_du = (pm.row(base + 1) - pm.row(base)) * (1 - fv) +
                                      (pm.row(base + R + 1) - pm.row(base + R)) * fv;
      const Eigen::RowVectorXd d_dv = (pm.row(base + R) - pm.row(base)) * (1 - fu) +
                                      (pm.row(base + R + 1) - pm.row(base + 1)) * fu;
      d_p[a0] += df.dot(d_du) * aux.du_dx[pl];
      d_p[a1] += df.dot(d_dv) * aux.dv_dx[pl];
    }
    return d_p;
  }
};

inline void encode_direction(const Vec3& d, int L, Eigen::Ref<VecX> enc) {
  for (int l = 0; l < L; ++l) {
    const double f = kPi * std::pow(2.0, l);
    for (int c = 0; c < 3; ++c) {
      enc[6 * l + 2 * c] = std::sin(f * d[c]);
      enc[6 * l + 2 * c + 1] = std::cos(f * d[c]);
    }
  }
}

/// Opacity is decoded from the triplane feature alone; radiance additionally
/// sees the encoded view direction, so opacity cannot depend on it.
struct TextureField {
  TriplaneGrid grid;
  Mlp sigma_mlp;  // 3C -> W -> W -> 1
  Mlp color_mlp;  // 3C + 6*L_dir -> W -> W -> 3
  int L_dir = 2;

  static TextureField make(int R, int C, int width, int L_dir, const Vec3& lo, const Vec3& hi,
                           Rng& rng) {
    TextureField f;
    f.grid.R = R;
    f.grid.C = C;
    f.grid.lo = lo;
    f.grid.hi = hi;
    f.grid.init(rng);
    f.L_dir = L_dir;
    f.sigma_mlp = Mlp::make({3 * C, width, width, 1}, Mlp::Act::Softplus, rng, true);
    f.color_mlp = Mlp::make({3 * C + 6 * L_dir, width, width, 3}, Mlp::Act::Softplus, rng, true);
    return f;
  }

  int n_params() const { return grid.n_params() + sigma_mlp.n_params() + color_mlp.n_params(); }

  void to_flat(Eigen::Ref<VecX> flat) const {
    int at = 0;
    for (const auto& p : grid.planes) {
      flat.segment(at, p.size()) = Eigen::Map<const VecX>(p.data(), p.size());
      at += static_cast<int>(p.size());
    }
    sigma_mlp.to_flat(flat.segment(at, sigma_mlp.n_params()));
    at += sigma_mlp.n_params();
    color_mlp.to_flat(flat.segment(at, color_mlp.n_params()));
  }

  void from_flat(Eigen::Ref<const VecX> flat) {
    if (flat.size() != n_params()) throw DimensionMismatch("texture field: flat size");
    int at = 0;
    for (auto& p : grid.planes) {
      Eigen::Map<VecX>(p.data(), p.size()) = flat.segment(at, p.size());
      at += static_cast<int>(p.size());
    }
    sigma_mlp.from_flat(flat.segment(at, sigma_mlp.n_params()));
    at += sigma_mlp.n_params();
    color_mlp.from_flat(flat.segment(at, color_mlp.n_params()));
  }

  struct EvalCache {
    MatX featT;     // 3C x N, one column per sample
    MatX dir_encT;  // 6L x N
    std::vector<TriplaneGrid::SampleAux> aux;
    Mlp::Cache sig_cache, col_cache;
    Eigen::RowVectorXd sigma_raw;
    MatX rgb_rawT;  // 3 x N
    int clamped_count = 0;
  };

  /// Batched evaluation: sigma = softplus(raw), rgb = sigmoid(raw).
  void eval(const MatX3& points, const MatX3& dirs, VecX* sigma, MatX3* rgb,
            EvalCache* cache = nullptr) const {
    const int n = static_cast<int>(points.rows());
    if (dirs.rows() != n) throw DimensionMismatch("field eval: dirs size");
    EvalCache local;
    EvalCache& c = cache ? *cache : local;
    c.featT.resize(grid.n_features(), n);
    c.dir_encT.resize(6 * L_dir, n);
    c.aux.resize(static_cast<size_t>(n));
    c.clamped_count = 0;
    for (int i = 0; i < n; ++i) {
      bool clamped = false;
      grid.sample(points.row(i).transpose(), c.featT.col(i), &c.aux[static_cast<size_t>(i)],
                  &clamped);
      if (clamped) ++c.clamped_count;
      encode_direction(dirs.row(i).transpose(), L_dir, c.dir_encT.col(i));
    }
    c.sigma_raw = sigma_mlp.forward(c.featT, &c.sig_cache);
    MatX col_in(grid.n_features() + 6 * L_dir, n);
    col_in << c.featT, c.dir_encT;
    c.rgb_rawT = color_mlp.forward(col_in, &c.col_cache);
    sigma->resize(n);
    rgb->resize(n, 3);
    for (int i = 0; i < n; ++i) {
      (*sigma)[i] = softplus(c.sigma_raw[i]);
      for (int k = 0; k < 3; ++k) (*rgb)(i, k) = sigmoid(c.rgb_rawT(k, i));
    }
  }

  struct Grads {
    std::array<MatX, 3> d_planes;
    Mlp::Grads d_sigma, d_color;

    void init_like(const TextureField& f) {
      for (size_t pl = 0; pl < 3; ++pl)
        d_planes[pl] = MatX::Zero(f.grid.planes[pl].rows(), f.grid.C);
      d_sigma.init_like(f.sigma_mlp);
      d_color.init_like(f.color_mlp);
    }

    void accumulate(const Grads& other) {
      for (size_t pl = 0; pl < 3; ++pl) d_planes[pl] += other.d_planes[pl];
      d_sigma.accumulate(other.d_sigma);
      d_color.accumulate(other.d_color);
    }

    void to_flat(Eigen::Ref<VecX> flat) const {
      int at = 0;
      for (const auto& p : d_planes) {
        flat.segment(at, p.size()) = Eigen::Map<const VecX>(p.data(), p.size());
        at += static_cast<int>(p.size());
      }
      const int n_sig = d_sigma.n_params();
      d_sigma.to_flat(flat.segment(at, n_sig));
      at += n_sig;
      d_color.to_flat(flat.segment(at, d_color.n_params()));
    }
  };

  /// Accumulates parameter gradients; optionally returns gradients w.r.t. the
  /// sample positions and view directions.
  void eval_backward(const EvalCache& c, const VecX& d_sigma_out, const MatX3& d_rgb_out,
                     Grads* grads, MatX3* d_points = nullptr, MatX3* d_dirs = nullptr) const {
    const int n = static_cast<int>(c.sigma_raw.size());
    Eigen::RowVectorXd d_sigma_raw(n);
    MatX d_rgb_rawT(3, n);
    for (int i = 0; i < n; ++i) {
      d_sigma_raw[i] = d_sigma_out[i] * sigmoid(c.sigma_raw[i]);
      for (int k = 0; k < 3; ++k) {
        const double s = sigmoid(c.rgb_rawT(k, i));
        d_rgb_rawT(k, i) = d_rgb_out(i, k) * s * (1 - s);
      }
    }
    const MatX d_featT_sig =
        sigma_mlp.backward(c.sig_cache, d_sigma_raw, grads ? &grads->d_sigma : nullptr);
    const MatX d_col_inT =
        color_mlp.backward(c.col_cache, d_rgb_rawT, grads ? &grads->d_color : nullptr);
    if (d_points) d_points->setZero(n, 3);
    if (d_dirs) d_dirs->setZero(n, 3);
    const int nf = grid.n_features();
    for (int i = 0; i < n; ++i) {
      const VecX d_feat = d_featT_sig.col(i) + d_col_inT.col(i).head(nf);
      const Vec3 dp = grid.sample_backward(c.aux[static_cast<size_t>(i)], d_feat,
                                           grads ? &grads->d_planes : nullptr);
      if (d_points) d_points->row(i) = dp.transpose();
      if (d_dirs) {
        // d sin(fd) = f cos(fd), d cos(fd) = -f sin(fd); both cached in dir_encT
        Vec3 g = Vec3::Zero();
        for (int l = 0; l < L_dir; ++l) {
          const double f = kPi * std::pow(2.0, l);
          for (int k = 0; k < 3; ++k) {
            g[k] += d_col_inT(nf + 6 * l + 2 * k, i) * f * c.dir_encT(6 * l + 2 * k + 1, i);
            g[k] -= d_col_inT(nf + 6 * l + 2 * k + 1, i) * f * c.dir_encT(6 * l + 2 * k, i);
          }
        }
        d_dirs->row(i) = g.transpose();
      }
    }
  }
};

/// Single-point convenience wrapper.
inline void field_eval(const TextureField& f, const Vec3& point, const Vec3& dir, double* sigma,
                       Vec3* rgb) {
  if (std::abs(dir.norm() - 1.0) > 1e-6) throw ConfigError("field_eval: view dir must be unit");
  MatX3 p(1, 3), d(1, 3);
  p.row(0) = point.transpose();
  d.row(0) = dir.transpose();
  VecX s;
  MatX3 c;
  f.eval(p, d, &s, &c);
  *sigma = s[0];
  *rgb = c.row(0).transpose();
}

}  // namespace quadfit::tex
