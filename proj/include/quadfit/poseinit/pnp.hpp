#pragma once

#include "quadfit/cam/rigid3.hpp"
#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"
#include "quadfit/core/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace quadfit::poseinit {

/// Pixel-to-canonical-vertex match; pixel is in continuous image coordinates
/// (pixel centers at x + 0.5).
struct Correspondence2D3D {
  Vec2 pixel = Vec2::Zero();
  int vertex_index = -1;
  double descriptor_distance = 0.0;
};

struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  static Intrinsics of(const cam::Camera& c) { return {c.fx, c.fy, c.cx, c.cy}; }

  Vec2 project(const Vec3& p_cam) const {
    return {fx * p_cam.x() / p_cam.z() + cx, fy * p_cam.y() / p_cam.z() + cy};
  }
};

struct PnPResult {
  cam::Rigid3 extrinsics;          // canonical -> camera
  double inlier_ratio = 0.0;
  double reprojection_rmse = 0.0;  // pixels, over the final inlier set
  std::vector<int> inliers;        // indices into the caller's correspondence list
};

namespace pnpdetail {

/// Direct linear transform for [R|t] with known intrinsics from >= 6 pairs.
/// Both point sets are Hartley-normalized; the rotation block is snapped to
/// the nearest orthogonal matrix. Returns false on degenerate input.
inline bool dlt_pose(const std::vector<Vec2>& uv, const std::vector<Vec3>& pts,
                     const Intrinsics& K, cam::Rigid3* pose) {
  const int n = static_cast<int>(uv.size());
  if (n < 6) return false;

  Vec2 c2 = Vec2::Zero();
  Vec3 c3 = Vec3::Zero();
  for (int i = 0; i < n; ++i) {
    c2 += uv[static_cast<size_t>(i)];
    c3 += pts[static_cast<size_t>(i)];
  }
  c2 /= n;
  c3 /= n;
  double m2 = 0, m3 = 0;
  for (int i = 0; i < n; ++i) {
    m2 += (uv[static_cast<size_t>(i)] - c2).norm();
    m3 += (pts[static_cast<size_t>(i)] - c3).norm();
  }
  m2 /= n;
  m3 /= n;
  if (m2 < 1e-12 || m3 < 1e-12) return false;
  const double s2 = std::sqrt(2.0) / m2;
  const double s3 = std::sqrt(3.0) / m3;

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n, 12);
  for (int i = 0; i < n; ++i) {
    const Vec2 x = s2 * (uv[static_cast<size_t>(i)] - c2);
    const Vec3 p = s3 * (pts[static_cast<size_t>(i)] - c3);
    Eigen::RowVector4d h(p.x(), p.y(), p.z(), 1.0);
    a.block<1, 4>(2 * i, 4) = -h;
    a.block<1, 4>(2 * i, 8) = x.y() * h;
    a.block<1, 4>(2 * i + 1, 0) = h;
    a.block<1, 4>(2 * i + 1, 8) = -x.x() * h;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv(10) <= 1e-10 * sv(0)) return false;  // projection not unique
  const Eigen::VectorXd v = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> p_norm;
  for (int r = 0; r < 3; ++r) p_norm.row(r) = v.segment<4>(4 * r).transpose();

  // Undo normalization: x_norm = T2 x, X_norm = T3 X => P = T2^-1 P_norm T3.
  Mat3 t2_inv = Mat3::Identity();
  t2_inv(0, 0) = 1.0 / s2;
  t2_inv(1, 1) = 1.0 / s2;
  t2_inv(0, 2) = c2.x();
  t2_inv(1, 2) = c2.y();
  Eigen::Matrix4d t3 = Eigen::Matrix4d::Identity();
  t3.topLeftCorner<3, 3>() *= s3;
  t3.topRightCorner<3, 1>() = -s3 * c3;
  Eigen::Matrix<double, 3, 4> proj = t2_inv * p_norm * t3;

  Mat3 k_inv = Mat3::Identity();
  k_inv(0, 0) = 1.0 / K.fx;
  k_inv(1, 1) = 1.0 / K.fy;
  k_inv(0, 2) = -K.cx / K.fx;
  k_inv(1, 2) = -K.cy / K.fy;
  Eigen::Matrix<double, 3, 4> m = k_inv * proj;

  Mat3 a3 = m.leftCols<3>();
  const double det = a3.determinant();
  if (std::abs(det) < 1e-14) return false;
  if (det < 0) {
    m = -m;
    a3 = -a3;
  }
  Eigen::JacobiSVD<Mat3> rsvd(a3, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double scale = rsvd.singularValues().mean();
  if (!(scale > 1e-12)) return false;
  pose->R = rsvd.matrixU() * rsvd.matrixV().transpose();  // det +1: det(a3) > 0
  pose->t = m.col(3) / scale;
  return pose->R.allFinite() && pose->t.allFinite();
}

/// Gauss-Newton on squared reprojection error, left-increment rotation chart.
inline void refine_pose(const std::vector<Vec2>& uv, const std::vector<Vec3>& pts,
                        const Intrinsics& K, cam::Rigid3* pose, int max_iters = 20) {
  const int n = static_cast<int>(uv.size());
  for (int it = 0; it < max_iters; ++it) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (int i = 0; i < n; ++i) {
      const Vec3 pc = pose->apply(pts[static_cast<size_t>(i)]);
      if (pc.z() <= 1e-9) continue;
      const Vec2 r = K.project(pc) - uv[static_cast<size_t>(i)];
      Eigen::Matrix<double, 2, 3> dp;
      const double iz = 1.0 / pc.z();
      dp << K.fx * iz, 0, -K.fx * pc.x() * iz * iz, 0, K.fy * iz, -K.fy * pc.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> j;
      j.leftCols<3>() = dp * (-skew(pc - pose->t));  // d(exp(w) R p)/dw at w = 0
      j.rightCols<3>() = dp;
      h += j.transpose() * j;
      g += j.transpose() * r;
    }
    h.diagonal().array() += 1e-12;
    const Eigen::Matrix<double, 6, 1> step = -h.ldlt().solve(g);
    if (!step.allFinite()) break;
    pose->R = rodrigues(step.head<3>()) * pose->R;
    pose->t += step.tail<3>();
    if (step.norm() < 1e-14) break;
  }
  pose->R = project_to_so3(pose->R);
}

inline double reprojection_err2(const Intrinsics& K, const cam::Rigid3& pose, const Vec3& p,
                                const Vec2& uv) {
  const Vec3 pc = pose.apply(p);
  if (pc.z() <= 1e-9) return std::numeric_limits<double>::infinity();
  return (K.project(pc) - uv).squaredNorm();
}

}  // namespace pnpdetail

/// RANSAC over minimal 6-point DLT solves followed by a Gauss-Newton refit on
/// the winning inlier set. Correspondences are canonically sorted first, so
/// the result is invariant to input order under a fixed seed.
inline PnPResult pnp_ransac(const std::vector<Correspondence2D3D>& corrs, const Intrinsics& K,
                            const MatX3& canonical_points, int iters, double threshold_px,
                            uint64_t seed = 0) {
  const int n = static_cast<int>(corrs.size());
  if (n < 6) throw TooFewPoints("pnp_ransac: need at least 6 correspondences");
  if (iters < 1) throw ConfigError("pnp_ransac: iters must be >= 1");
  if (!(threshold_px > 0)) throw ConfigError("pnp_ransac: threshold must be > 0");
  for (const auto& c : corrs)
    if (c.vertex_index < 0 || c.vertex_index >= canonical_points.rows())
      throw IndexError("pnp_ransac: vertex index out of range");

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    const auto& a = corrs[static_cast<size_t>(i)];
    const auto& b = corrs[static_cast<size_t>(j)];
    if (a.vertex_index != b.vertex_index) return a.vertex_index < b.vertex_index;
    if (a.pixel.x() != b.pixel.x()) return a.pixel.x() < b.pixel.x();
    if (a.pixel.y() != b.pixel.y()) return a.pixel.y() < b.pixel.y();
    return a.descriptor_distance < b.descriptor_distance;
  });
  std::vector<Vec2> uv(static_cast<size_t>(n));
  std::vector<Vec3> pts(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& c = corrs[static_cast<size_t>(order[static_cast<size_t>(i)])];
    uv[static_cast<size_t>(i)] = c.pixel;
    pts[static_cast<size_t>(i)] = canonical_points.row(c.vertex_index).transpose();
  }

  Rng rng(seed);
  const double thr2 = threshold_px * threshold_px;
  bool have_model = false;
  int best_count = -1;
  double best_sse = std::numeric_limits<double>::infinity();
  cam::Rigid3 best_pose;
  std::vector<Vec2> samp_uv(6);
  std::vector<Vec3> samp_pts(6);
  std::vector<int> samp_idx(6);

  for (int it = 0; it < iters; ++it) {
    // draw 6 distinct correspondences referencing 6 distinct vertices
    bool ok = false;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
      int got = 0;
      while (got < 6) {
        const int cand = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
        bool dup = false;
        for (int k = 0; k < got; ++k) {
          if (samp_idx[static_cast<size_t>(k)] == cand ||
              (pts[static_cast<size_t>(samp_idx[static_cast<size_t>(k)])] -
               pts[static_cast<size_t>(cand)])
                      .squaredNorm() < 1e-20) {
            dup = true;
            break;
          }
        }
        if (dup) break;
        samp_idx[static_cast<size_t>(got++)] = cand;
      }
      ok = got == 6;
    }
    if (!ok) continue;
    Vec3 mean = Vec3::Zero();
    for (int k = 0; k < 6; ++k) mean += pts[static_cast<size_t>(samp_idx[static_cast<size_t>(k)])];
    mean /= 6.0;
    Mat3 cov = Mat3::Zero();
    for (int k = 0; k < 6; ++k) {
      const Vec3 d = pts[static_cast<size_t>(samp_idx[static_cast<size_t>(k)])] - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    if (eig.eigenvalues()(0) < 1e-10 * cov.trace()) continue;  // coplanar sample

    for (int k = 0; k < 6; ++k) {
      samp_uv[static_cast<size_t>(k)] = uv[static_cast<size_t>(samp_idx[static_cast<size_t>(k)])];
      samp_pts[static_cast<size_t>(k)] = pts[static_cast<size_t>(samp_idx[static_cast<size_t>(k)])];
    }
    cam::Rigid3 pose;
    if (!pnpdetail::dlt_pose(samp_uv, samp_pts, K, &pose)) continue;

    int count = 0;
    double sse = 0;
    for (int i = 0; i < n; ++i) {
      const double e2 = pnpdetail::reprojection_err2(K, pose, pts[static_cast<size_t>(i)],
                                                     uv[static_cast<size_t>(i)]);
      if (e2 < thr2) {
        ++count;
        sse += e2;
      }
    }
    have_model = true;
    if (count > best_count || (count == best_count && sse < best_sse)) {
      best_count = count;
      best_sse = sse;
      best_pose = pose;
    }
  }
  if (!have_model)
    throw DegenerateConfiguration("pnp_ransac: no non-degenerate minimal sample found");

  std::vector<Vec2> in_uv;
  std::vector<Vec3> in_pts;
  for (int i = 0; i < n; ++i) {
    if (pnpdetail::reprojection_err2(K, best_pose, pts[static_cast<size_t>(i)],
                                     uv[static_cast<size_t>(i)]) < thr2) {
      in_uv.push_back(uv[static_cast<size_t>(i)]);
      in_pts.push_back(pts[static_cast<size_t>(i)]);
    }
  }
  cam::Rigid3 refined = best_pose;
  if (in_uv.size() >= 6) pnpdetail::refine_pose(in_uv, in_pts, K, &refined);

  PnPResult out;
  out.extrinsics = refined;
  double sse = 0;
  for (int i = 0; i < n; ++i) {
    const double e2 = pnpdetail::reprojection_err2(K, refined, pts[static_cast<size_t>(i)],
                                                   uv[static_cast<size_t>(i)]);
    if (e2 < thr2) {
      out.inliers.push_back(order[static_cast<size_t>(i)]);
      sse += e2;
    }
  }
  std::sort(out.inliers.begin(), out.inliers.end());
  out.inlier_ratio = static_cast<double>(out.inliers.size()) / n;
  out.reprojection_rmse = out.inliers.empty()
                              ? std::numeric_limits<double>::infinity()
                              : std::sqrt(sse / static_cast<double>(out.inliers.size()));
  return out;
}

}  // namespace quadfit::poseinit
