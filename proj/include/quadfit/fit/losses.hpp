#pragma once

#include "quadfit/cam/camera.hpp"
#include "quadfit/core/errors.hpp"
#include "quadfit/core/image.hpp"
#include "quadfit/core/math.hpp"
#include "quadfit/data/observations.hpp"
#include "quadfit/geom/trimesh.hpp"
#include "quadfit/poseinit/match.hpp"
#include "quadfit/tmpl/skinned_template.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace quadfit::fit {

namespace lossdetail {

/// Pulls a pixel-space gradient back to the world point it was projected from.
inline Vec3 pixel_grad_to_point(const cam::Camera& cam, const Vec3& p_world, const Vec2& d_uv) {
  const Vec3 p = cam.extrinsics.apply(p_world);
  const double iz = 1.0 / p.z();
  Vec3 d_cam;
  d_cam.x() = cam.fx * iz * d_uv.x();
  d_cam.y() = cam.fy * iz * d_uv.y();
  d_cam.z() = -iz * iz * (cam.fx * p.x() * d_uv.x() + cam.fy * p.y() * d_uv.y());
  return cam.extrinsics.R.transpose() * d_cam;
}

}  // namespace lossdetail

/// Mean Huber reprojection error of matched vertices; correspondences whose
/// vertex lands behind the camera are dropped. Gradients scale by `weight`
/// and accumulate into `d_posed`.
inline double loss_embedding(const std::vector<poseinit::Correspondence2D3D>& corrs,
                             const MatX3& posed, const cam::Camera& cam, double huber_delta,
                             double weight = 1.0, MatX3* d_posed = nullptr,
                             int* n_used = nullptr) {
  if (huber_delta <= 0) throw ConfigError("embedding loss: huber delta must be > 0");
  int used = 0;
  double sum = 0;
  std::vector<Vec2> residual(corrs.size());
  std::vector<uint8_t> keep(corrs.size(), 0);
  for (size_t i = 0; i < corrs.size(); ++i) {
    const auto& c = corrs[i];
    if (c.vertex_index < 0 || c.vertex_index >= posed.rows())
      throw IndexError("embedding loss: vertex index out of range");
    const auto proj = cam.project(posed.row(c.vertex_index).transpose());
    if (proj.behind) continue;
    residual[i] = proj.uv - c.pixel;
    keep[i] = 1;
    sum += huber(residual[i].norm(), huber_delta);
    ++used;
  }
  if (n_used) *n_used = used;
  if (used == 0) return 0.0;
  const double value = sum / used;
  if (d_posed) {
    const double scale = weight / used;
    for (size_t i = 0; i < corrs.size(); ++i) {
      if (!keep[i]) continue;
      const double r = residual[i].norm();
      if (r < 1e-15) continue;
      const Vec2 d_uv = scale * huber_weight(r, huber_delta) * residual[i];
      const Vec3 p = posed.row(corrs[i].vertex_index).transpose();
      d_posed->row(corrs[i].vertex_index) +=
          lossdetail::pixel_grad_to_point(cam, p, d_uv).transpose();
    }
  }
  return value;
}

/// Mean Huber distance between detected keypoints and projected regressed
/// joints; invisible or behind-camera keypoints are dropped.
inline double loss_keypoint(const std::vector<data::Keypoint2D>& keypoints,
                            const tmpl::SkinnedTemplate& tpl, const MatX3& posed,
                            const cam::Camera& cam, double huber_delta, double weight = 1.0,
                            MatX3* d_posed = nullptr, int* n_used = nullptr) {
  if (huber_delta <= 0) throw ConfigError("keypoint loss: huber delta must be > 0");
  if (keypoints.size() != tpl.keypoint_joints.size())
    throw DimensionMismatch("keypoint loss: detection count vs template keypoints");
  const MatX3 joints = tmpl::regress_joints(tpl, posed);
  MatX3 d_joints = MatX3::Zero(joints.rows(), 3);
  int used = 0;
  double sum = 0;
  for (size_t k = 0; k < keypoints.size(); ++k) {
    if (!keypoints[k].visible) continue;
    const int j = tpl.keypoint_joints[k];
    const Vec3 p = joints.row(j).transpose();
    const auto proj = cam.project(p);
    if (proj.behind) continue;
    const Vec2 e = proj.uv - keypoints[k].uv;
    const double r = e.norm();
    sum += huber(r, huber_delta);
    ++used;
    if (d_posed && r >= 1e-15) {
      const Vec2 d_uv = huber_weight(r, huber_delta) * e;
      d_joints.row(j) += lossdetail::pixel_grad_to_point(cam, p, d_uv).transpose();
    }
  }
  if (n_used) *n_used = used;
  if (used == 0) return 0.0;
  if (d_posed) *d_posed += (weight / used) * (tpl.joint_regressor.transpose() * d_joints);
  return sum / used;
}

/// Foreground pixels whose full 8-neighborhood is also foreground; image
/// border pixels never survive.
inline Image erode_mask(const Image& mask) {
  if (mask.channels != 1) throw DimensionMismatch("erode_mask: mask must have 1 channel");
  Image out(1, mask.height, mask.width);
  for (int y = 1; y + 1 < mask.height; ++y)
    for (int x = 1; x + 1 < mask.width; ++x) {
      bool all = true;
      for (int dy = -1; dy <= 1 && all; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (mask.at(0, y + dy, x + dx) <= 0.5) {
            all = false;
            break;
          }
      if (all) out.at(0, y, x) = 1.0;
    }
  return out;
}

/// Masked mean-absolute color error plus `grad_weight` times the mean
/// absolute difference of forward-difference image gradients inside the
/// eroded mask. Gradients accumulate into `d_render` scaled by `weight`.
inline double loss_photo(const Image& obs_rgb, const Image& mask, const Image& eroded,
                         const Image& rendered, double grad_weight = 0.5, double weight = 1.0,
                         Image* d_render = nullptr) {
  if (obs_rgb.channels != 3 || rendered.channels != 3)
    throw DimensionMismatch("photo loss: rgb must have 3 channels");
  if (!obs_rgb.same_shape(rendered)) throw ResolutionMismatch("photo loss: rgb shapes differ");
  if (mask.channels != 1 || mask.height != obs_rgb.height || mask.width != obs_rgb.width)
    throw ResolutionMismatch("photo loss: mask shape");
  if (!mask.same_shape(eroded)) throw ResolutionMismatch("photo loss: eroded mask shape");
  if (d_render && !d_render->same_shape(rendered))
    throw ResolutionMismatch("photo loss: d_render shape");

  long n_mask = 0, n_eroded = 0;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(0, y, x) > 0.5) ++n_mask;
      if (eroded.at(0, y, x) > 0.5) ++n_eroded;
    }
  if (n_mask == 0) return 0.0;

  double sum_abs = 0;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(0, y, x) <= 0.5) continue;
      for (int c = 0; c < 3; ++c) sum_abs += std::abs(rendered.at(c, y, x) - obs_rgb.at(c, y, x));
    }
  const double norm_rgb = 1.0 / (3.0 * static_cast<double>(n_mask));
  double value = sum_abs * norm_rgb;

  if (d_render) {
    const double s = weight * norm_rgb;
    for (int y = 0; y < mask.height; ++y)
      for (int x = 0; x < mask.width; ++x) {
        if (mask.at(0, y, x) <= 0.5) continue;
        for (int c = 0; c < 3; ++c) {
          const double d = rendered.at(c, y, x) - obs_rgb.at(c, y, x);
          if (d > 0)
            d_render->at(c, y, x) += s;
          else if (d < 0)
            d_render->at(c, y, x) -= s;
        }
      }
  }

  if (n_eroded > 0 && grad_weight != 0.0) {
    const double norm_g = 1.0 / (6.0 * static_cast<double>(n_eroded));
    double sum_g = 0;
    for (int y = 0; y < mask.height; ++y)
      for (int x = 0; x < mask.width; ++x) {
        if (eroded.at(0, y, x) <= 0.5) continue;
        for (int c = 0; c < 3; ++c) {
          const double gx = (rendered.at(c, y, x + 1) - rendered.at(c, y, x)) -
                            (obs_rgb.at(c, y, x + 1) - obs_rgb.at(c, y, x));
          const double gy = (rendered.at(c, y + 1, x) - rendered.at(c, y, x)) -
                            (obs_rgb.at(c, y + 1, x) - obs_rgb.at(c, y, x));
          sum_g += std::abs(gx) + std::abs(gy);
          if (d_render) {
            const double sg = weight * grad_weight * norm_g;
            if (gx > 0) {
              d_render->at(c, y, x + 1) += sg;
              d_render->at(c, y, x) -= sg;
            } else if (gx < 0) {
              d_render->at(c, y, x + 1) -= sg;
              d_render->at(c, y, x) += sg;
            }
            if (gy > 0) {
              d_render->at(c, y + 1, x) += sg;
              d_render->at(c, y, x) -= sg;
            } else if (gy < 0) {
              d_render->at(c, y + 1, x) -= sg;
              d_render->at(c, y, x) += sg;
            }
          }
        }
      }
    value += grad_weight * sum_g * norm_g;
  }
  return value;
}

/// Foreground pixel centers in scanline order, thinned to at most
/// `max_points` by a uniform stride.
inline std::vector<Vec2> subsample_mask_pixels(const Image& mask, int max_points = 4096) {
  if (mask.channels != 1) throw DimensionMismatch("mask pixels: mask must have 1 channel");
  if (max_points < 1) throw ConfigError("mask pixels: max_points must be >= 1");
  std::vector<Vec2> all;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(0, y, x) > 0.5) all.emplace_back(x + 0.5, y + 0.5);
  if (all.empty()) throw EmptyMask("mask pixels: no foreground");
  if (static_cast<int>(all.size()) <= max_points) return all;
  const size_t stride = (all.size() + static_cast<size_t>(max_points) - 1) /
                        static_cast<size_t>(max_points);
  std::vector<Vec2> out;
  for (size_t i = 0; i < all.size(); i += stride) out.push_back(all[i]);
  return out;
}

/// Exact nearest neighbor on a uniform grid; ties resolve to the lowest
/// point index, matching a linear scan.
struct GridNN2D {
  std::vector<Vec2> pts;
  Vec2 lo = Vec2::Zero();
  double cell = 1.0;
  int nx = 1, ny = 1;
  std::vector<std::vector<int>> bins;

  static GridNN2D build(const std::vector<Vec2>& points) {
    if (points.empty()) throw ConfigError("grid nn: empty point set");
    GridNN2D g;
    g.pts = points;
    Vec2 hi = points[0];
    g.lo = points[0];
    for (const auto& p : points) {
      g.lo = g.lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const Vec2 ext = hi - g.lo;
    const double diag = ext.norm();
    g.cell = std::max(diag / std::max(1.0, std::sqrt(static_cast<double>(points.size()))), 1e-12);
    g.nx = static_cast<int>(ext.x() / g.cell) + 1;
    g.ny = static_cast<int>(ext.y() / g.cell) + 1;
    g.bins.assign(static_cast<size_t>(g.nx) * static_cast<size_t>(g.ny), {});
    for (size_t i = 0; i < points.size(); ++i) {
      const int cx = std::clamp(static_cast<int>((points[i].x() - g.lo.x()) / g.cell), 0, g.nx - 1);
      const int cy = std::clamp(static_cast<int>((points[i].y() - g.lo.y()) / g.cell), 0, g.ny - 1);
      g.bins[static_cast<size_t>(cy) * g.nx + cx].push_back(static_cast<int>(i));
    }
    return g;
  }

  /// Index of the nearest stored point; optionally its squared distance.
  int query(const Vec2& q, double* d2_out = nullptr) const {
    const double fgx = (q.x() - lo.x()) / cell;
    const double fgy = (q.y() - lo.y()) / cell;
    // degenerate grids (collapsed extent) and absurdly far queries scan
    if (!(std::abs(fgx) < 1e9) || !(std::abs(fgy) < 1e9)) return scan(q, d2_out);
    const long long cqx = static_cast<long long>(std::floor(fgx));
    const long long cqy = static_cast<long long>(std::floor(fgy));
    const long long lnx = nx, lny = ny;
    // rings past this radius cannot exist inside the grid
    const long long r_cover =
        std::max(std::max(cqx, lnx - 1 - cqx), std::max(cqy, lny - 1 - cqy));
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    const auto visit = [&](long long xb, long long yb) {
      for (const int i : bins[static_cast<size_t>(yb) * nx + static_cast<size_t>(xb)]) {
        const double d2 = (pts[static_cast<size_t>(i)] - q).squaredNorm();
        if (d2 < best_d2 || (d2 == best_d2 && i < best)) {
          best_d2 = d2;
          best = i;
        }
      }
    };
    for (long long r = 0;; ++r) {
      for (long long yb = std::max(cqy - r, 0LL); yb <= std::min(cqy + r, lny - 1); ++yb) {
        if (std::abs(yb - cqy) == r) {
          for (long long xb = std::max(cqx - r, 0LL); xb <= std::min(cqx + r, lnx - 1); ++xb)
            visit(xb, yb);
        } else {  // interior rows touch the ring only at its two columns
          if (cqx - r >= 0 && cqx - r < lnx) visit(cqx - r, yb);
          if (cqx + r >= 0 && cqx + r < lnx) visit(cqx + r, yb);
        }
      }
      // any point in ring > r lies at least r*cell away
      if (best >= 0 && best_d2 <= static_cast<double>(r) * cell * static_cast<double>(r) * cell)
        break;
      if (r > r_cover) break;
    }
    if (d2_out) *d2_out = best_d2;
    return best;
  }

  int scan(const Vec2& q, double* d2_out) const {
    int best = 0;
    double best_d2 = (pts[0] - q).squaredNorm();
    for (size_t i = 1; i < pts.size(); ++i) {
      const double d2 = (pts[i] - q).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = static_cast<int>(i);
      }
    }
    if (d2_out) *d2_out = best_d2;
    return best;
  }
};

/// Mean of the two directed mean nearest-neighbor distances between point
/// sets; optional per-query nearest indices for the backward pass.
inline double symmetric_chamfer(const std::vector<Vec2>& a, const std::vector<Vec2>& b,
                                std::vector<int>* nn_ab = nullptr,
                                std::vector<int>* nn_ba = nullptr) {
  if (a.empty() || b.empty()) throw ConfigError("chamfer: empty point set");
  const GridNN2D grid_b = GridNN2D::build(b);
  const GridNN2D grid_a = GridNN2D::build(a);
  if (nn_ab) nn_ab->assign(a.size(), -1);
  if (nn_ba) nn_ba->assign(b.size(), -1);
  double sum_ab = 0, sum_ba = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d2 = 0;
    const int j = grid_b.query(a[i], &d2);
    sum_ab += std::sqrt(d2);
    if (nn_ab) (*nn_ab)[i] = j;
  }
  for (size_t j = 0; j < b.size(); ++j) {
    double d2 = 0;
    const int i = grid_a.query(b[j], &d2);
    sum_ba += std::sqrt(d2);
    if (nn_ba) (*nn_ba)[j] = i;
  }
  return 0.5 * (sum_ab / static_cast<double>(a.size()) + sum_ba / static_cast<double>(b.size()));
}

/// Symmetric Chamfer distance (pixels) between foreground mask pixels and
/// the projected posed vertices. When every vertex is behind the camera the
/// image diagonal is returned as a constant penalty with no gradient;
/// `n_projected` reports how many vertices took part.
inline double loss_mask(const std::vector<Vec2>& mask_pixels, const MatX3& posed,
                        const cam::Camera& cam, double weight = 1.0, MatX3* d_posed = nullptr,
                        int* n_projected = nullptr) {
  if (mask_pixels.empty()) throw EmptyMask("mask loss: no foreground pixels");
  std::vector<Vec2> proj;
  std::vector<int> vert;
  proj.reserve(static_cast<size_t>(posed.rows()));
  for (int v = 0; v < posed.rows(); ++v) {
    const auto p = cam.project(posed.row(v).transpose());
    if (p.behind) continue;
    proj.push_back(p.uv);
    vert.push_back(v);
  }
  if (n_projected) *n_projected = static_cast<int>(proj.size());
  if (proj.empty()) return std::hypot(static_cast<double>(cam.width), static_cast<double>(cam.height));

  std::vector<int> nn_ab, nn_ba;
  const double value = symmetric_chamfer(mask_pixels, proj, &nn_ab, &nn_ba);
  if (!d_posed) return value;

  std::vector<Vec2> d_proj(proj.size(), Vec2::Zero());
  const double sa = 0.5 / static_cast<double>(mask_pixels.size());
  for (size_t i = 0; i < mask_pixels.size(); ++i) {
    const int j = nn_ab[i];
    const Vec2 e = proj[static_cast<size_t>(j)] - mask_pixels[i];
    const double d = e.norm();
    if (d >= 1e-15) d_proj[static_cast<size_t>(j)] += (sa / d) * e;
  }
  const double sb = 0.5 / static_cast<double>(proj.size());
  for (size_t j = 0; j < proj.size(); ++j) {
    const Vec2 e = proj[j] - mask_pixels[static_cast<size_t>(nn_ba[j])];
    const double d = e.norm();
    if (d >= 1e-15) d_proj[j] += (sb / d) * e;
  }
  for (size_t j = 0; j < proj.size(); ++j) {
    const Vec3 p = posed.row(vert[j]).transpose();
    d_posed->row(vert[j]) +=
        weight * lossdetail::pixel_grad_to_point(cam, p, d_proj[j]).transpose();
  }
  return value;
}

/// Sorted 1-ring neighbor lists from the face set.
inline std::vector<std::vector<int>> vertex_neighbors(const geom::TriMesh& mesh) {
  std::vector<std::vector<int>> nbr(static_cast<size_t>(mesh.n_vertices()));
  for (const auto& [a, b] : mesh.unique_edges()) {
    nbr[static_cast<size_t>(a)].push_back(b);
    nbr[static_cast<size_t>(b)].push_back(a);
  }
  for (auto& n : nbr) std::sort(n.begin(), n.end());
  return nbr;
}

/// Deformation energy against per-vertex best-fit rotations of the 1-ring,
/// unit edge weights. Rotations are held fixed in the backward pass; at the
/// per-ring optimum that still yields the exact gradient.
inline double loss_arap(const std::vector<std::vector<int>>& neighbors, const MatX3& shaped,
                        const MatX3& posed, double weight = 1.0, MatX3* d_posed = nullptr,
                        MatX3* d_shaped = nullptr) {
  const int nv = static_cast<int>(shaped.rows());
  if (posed.rows() != nv || static_cast<int>(neighbors.size()) != nv)
    throw DimensionMismatch("arap loss: vertex counts differ");
  double energy = 0;
  for (int i = 0; i < nv; ++i) {
    const auto& ring = neighbors[static_cast<size_t>(i)];
    if (ring.empty()) continue;
    Mat3 s = Mat3::Zero();
    for (const int j : ring) {
      const Vec3 eh = (shaped.row(i) - shaped.row(j)).transpose();
      const Vec3 e = (posed.row(i) - posed.row(j)).transpose();
      s += eh * e.transpose();
    }
    Eigen::JacobiSVD<Mat3> svd(s, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixV() * svd.matrixU().transpose();
    if (r.determinant() < 0) {
      Mat3 flip = Mat3::Identity();
      flip(2, 2) = -1;
      r = svd.matrixV() * flip * svd.matrixU().transpose();
    }
    for (const int j : ring) {
      const Vec3 eh = (shaped.row(i) - shaped.row(j)).transpose();
      const Vec3 e = (posed.row(i) - posed.row(j)).transpose();
      const Vec3 res = e - r * eh;
      energy += res.squaredNorm();
      if (d_posed) {
        const Vec3 g = (2.0 * weight) * res;
        d_posed->row(i) += g.transpose();
        d_posed->row(j) -= g.transpose();
      }
      if (d_shaped) {
        const Vec3 g = (2.0 * weight) * (r.transpose() * res);
        d_shaped->row(i) -= g.transpose();
        d_shaped->row(j) += g.transpose();
      }
    }
  }
  return energy;
}

/// Sum of squared deviations of posed edge lengths from shaped rest lengths.
inline double loss_edge(const std::vector<std::pair<int, int>>& edges, const MatX3& shaped,
                        const MatX3& posed, double weight = 1.0, MatX3* d_posed = nullptr,
                        MatX3* d_shaped = nullptr) {
  if (shaped.rows() != posed.rows()) throw DimensionMismatch("edge loss: vertex counts differ");
  double energy = 0;
  for (const auto& [i, j] : edges) {
    if (i < 0 || j < 0 || i >= shaped.rows() || j >= shaped.rows())
      throw IndexError("edge loss: edge index out of range");
    const Vec3 e = (posed.row(i) - posed.row(j)).transpose();
    const Vec3 eh = (shaped.row(i) - shaped.row(j)).transpose();
    const double l = e.norm(), lh = eh.norm();
    const double d = l - lh;
    energy += d * d;
    if (d_posed && l >= 1e-15) {
      const Vec3 g = (2.0 * weight * d / l) * e;
      d_posed->row(i) += g.transpose();
      d_posed->row(j) -= g.transpose();
    }
    if (d_shaped && lh >= 1e-15) {
      const Vec3 g = (2.0 * weight * d / lh) * eh;
      d_shaped->row(i) -= g.transpose();
      d_shaped->row(j) += g.transpose();
    }
  }
  return energy;
}

}  // namespace quadfit::fit
