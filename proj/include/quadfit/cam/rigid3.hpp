#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"

namespace quadfit::cam {

/// SE(3) element stored as rotation + translation; maps x to R x + t.
struct Rigid3 {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static Rigid3 identity() { return {}; }

  Vec3 apply(const Vec3& x) const { return R * x + t; }

  Rigid3 compose(const Rigid3& other) const {  // this ∘ other
    return {R * other.R, R * other.t + t};
  }

  Rigid3 inverse() const { return {R.transpose(), -(R.transpose() * t)}; }

  bool is_valid(double tol = 1e-8) const {
    return (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(R.determinant() - 1.0) <= tol && t.allFinite();
  }

  void require_valid(double tol = 1e-8) const {
    if (!is_valid(tol)) throw ConfigError("Rigid3: rotation not orthonormal (det +1)");
  }
};

inline Rigid3 operator*(const Rigid3& a, const Rigid3& b) { return a.compose(b); }

inline double rigid_rotation_distance(const Rigid3& a, const Rigid3& b) {
  return rotation_geodesic(a.R, b.R);
}

inline double rigid_translation_distance(const Rigid3& a, const Rigid3& b) {
  return (a.t - b.t).norm();
}

}  // namespace quadfit::cam
