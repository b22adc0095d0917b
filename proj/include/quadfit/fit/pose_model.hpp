#pragma once

#include "quadfit/cam/rigid3.hpp"
#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"
#include "quadfit/core/mlp.hpp"
#include "quadfit/tmpl/skinned_template.hpp"

#include <cmath>
#include <vector>

namespace quadfit::fit {

/// Interleaved sinusoidal features [sin(2^l pi tau), cos(2^l pi tau)]_{l<L}.
inline VecX positional_encoding(double tau, int L) {
  if (L < 1) throw ConfigError("positional encoding: L must be >= 1");
  VecX out(2 * L);
  double freq = kPi;
  for (int l = 0; l < L; ++l) {
    out[2 * l] = std::sin(freq * tau);
    out[2 * l + 1] = std::cos(freq * tau);
    freq *= 2.0;
  }
  return out;
}

/// Maps an encoded timestamp to a rigid increment on a fixed base root plus
/// joint angles: root = (R(w), R(w) t_base + dt) with [w, dt, angles] read
/// off the network output. A zero final layer reproduces the base root and
/// zero articulation for every timestamp.
struct TemporalPoseModel {
  Mlp mlp;
  cam::Rigid3 base;  // canonical -> world root shared across frames at init
  int L_t = 4;
  int d_joints = 0;

  static TemporalPoseModel make(int L_t, int width, int d_joints, const cam::Rigid3& base,
                                Rng& rng) {
    if (d_joints < 0) throw ConfigError("pose model: negative joint dimension");
    base.require_valid();
    TemporalPoseModel m;
    m.L_t = L_t;
    m.d_joints = d_joints;
    m.base = base;
    m.mlp = Mlp::make({2 * L_t, width, width, 6 + d_joints}, Mlp::Act::Tanh, rng,
                      /*zero_final=*/true);
    return m;
  }

  int n_params() const { return mlp.n_params(); }

  void validate() const {
    if (mlp.in_dim() != 2 * L_t) throw DimensionMismatch("pose model: encoding width");
    if (mlp.out_dim() != 6 + d_joints) throw DimensionMismatch("pose model: output width");
    base.require_valid();
    for (const auto& w : mlp.W)
      if (!w.allFinite()) throw ConfigError("pose model: non-finite weights");
  }

  struct Cache {
    Mlp::Cache mlp_cache;
    Vec3 omega = Vec3::Zero();
    Mat3 r_inc = Mat3::Identity();
  };
};

inline tmpl::PoseParams eval_pose(const TemporalPoseModel& m, double tau,
                                  TemporalPoseModel::Cache* cache = nullptr) {
  const VecX gamma = positional_encoding(tau, m.L_t);
  TemporalPoseModel::Cache local;
  TemporalPoseModel::Cache& c = cache ? *cache : local;
  const MatX out = m.mlp.forward(gamma, &c.mlp_cache);
  c.omega = out.col(0).head<3>();
  c.r_inc = rodrigues(c.omega);
  tmpl::PoseParams pose;
  pose.root.R = c.r_inc * m.base.R;
  pose.root.t = c.r_inc * m.base.t + out.col(0).segment<3>(3);
  pose.joint_angles = out.col(0).tail(m.d_joints);
  return pose;
}

/// Accumulates pose-model weight gradients from raw root-matrix, root-
/// translation and joint-angle gradients (the shapes lbs_backward produces).
inline void eval_pose_backward(const TemporalPoseModel& m, const TemporalPoseModel::Cache& cache,
                               const Mat3& d_root_r, const Vec3& d_root_t,
                               const VecX& d_joint_angles, Mlp::Grads* grads) {
  if (d_joint_angles.size() != m.d_joints)
    throw DimensionMismatch("pose model backward: joint gradient size");
  // root.R = R(w) base.R and root.t = R(w) base.t + dt, so both feed dR(w)
  const Mat3 d_r_inc = d_root_r * m.base.R.transpose() + d_root_t * m.base.t.transpose();
  VecX d_out(6 + m.d_joints);
  d_out.head<3>() = rotation_matrix_grad_to_axis_angle(cache.omega, cache.r_inc, d_r_inc);
  d_out.segment<3>(3) = d_root_t;
  d_out.tail(m.d_joints) = d_joint_angles;
  m.mlp.backward(cache.mlp_cache, d_out, grads);
}

}  // namespace quadfit::fit
