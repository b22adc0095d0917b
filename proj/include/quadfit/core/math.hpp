#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>

namespace quadfit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using MatX3 = Eigen::MatrixX3d;
using MatX3i = Eigen::MatrixX3i;

constexpr double kPi = 3.14159265358979323846;

inline Mat3 skew(const Vec3& a) {
  Mat3 m;
  m << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
  return m;
}

/// Rodrigues rotation matrix for an axis-angle vector.
inline Mat3 rodrigues(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 k = skew(omega);
  if (theta2 < 1e-16) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() + (std::sin(theta) / theta) * k +
         ((1.0 - std::cos(theta)) / theta2) * k * k;
}

/// Right Jacobian of SO(3): exp(omega + d) ~= exp(omega) exp(Jr(omega) d).
inline Mat3 so3_right_jacobian(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 k = skew(omega);
  double c1, c2;
  if (theta2 < 1e-12) {
    c1 = 0.5 - theta2 / 24.0;
    c2 = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    const double theta = std::sqrt(theta2);
    c1 = (1.0 - std::cos(theta)) / theta2;
    c2 = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() - c1 * k + c2 * k * k;
}

/// Axis-angle (log map) of a rotation matrix.
inline Vec3 so3_log(const Mat3& r) {
  const double tr = r.trace();
  const double cos_theta = std::clamp((tr - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  const Vec3 w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  if (theta < 1e-8) {
    return 0.5 * w;
  }
  if (theta > kPi - 1e-6) {
    // Near pi the skew part vanishes; recover the axis from the symmetric part.
    Mat3 s = 0.5 * (r + Mat3::Identity());
    int a = 0;
    if (s(1, 1) > s(a, a)) a = 1;
    if (s(2, 2) > s(a, a)) a = 2;
    Vec3 axis;
    axis[a] = std::sqrt(std::max(s(a, a), 0.0));
    for (int i = 0; i < 3; ++i) {
      if (i != a) axis[i] = s(a, i) / std::max(axis[a], 1e-12);
    }
    axis.normalize();
    if ((axis.cross(Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)))).norm() > 0 &&
        theta < kPi) {
      // keep sign consistent with the skew part when it is not exactly zero
      if (w.dot(axis) < 0) axis = -axis;
    }
    return theta * axis;
  }
  return (theta / (2.0 * std::sin(theta))) * w;
}

/// Geodesic angle between two rotations, radians in [0, pi].
inline double rotation_geodesic(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

/// VJP of y = R(omega) z: given dL/dy returns dL/domega (and dL/dz = R^T dL/dy).
inline Vec3 aa_rotate_vjp_omega(const Vec3& omega, const Vec3& z, const Mat3& r,
                                const Vec3& grad_y) {
  // d y / d omega = -R [z]x Jr(omega)  =>  dL/domega = Jr^T (z x (R^T grad_y))
  return so3_right_jacobian(omega).transpose() * z.cross(r.transpose() * grad_y);
}

/// Maps an accumulated dL/dR (3x3) to dL/domega for R = rodrigues(omega).
inline Vec3 rotation_matrix_grad_to_axis_angle(const Vec3& omega, const Mat3& r,
                                               const Mat3& grad_r) {
  const Mat3 m = r.transpose() * grad_r;
  const Vec3 v(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  return so3_right_jacobian(omega).transpose() * v;
}

/// Nearest rotation matrix (Frobenius) with det = +1.
inline Mat3 project_to_so3(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  if ((u * v.transpose()).determinant() < 0) d(2, 2) = -1.0;
  return u * d * v.transpose();
}

inline double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

/// Huber penalty of a scalar radius r >= 0.
inline double huber(double r, double delta) {
  return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta);
}

/// d huber(|e|)/de = huber_weight(|e|, delta) * e.
inline double huber_weight(double r, double delta) {
  return r <= delta ? 1.0 : delta / r;
}

}  // namespace quadfit
