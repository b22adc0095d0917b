#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/geom/trimesh.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace quadfit::geom {

struct Ray {
  Vec3 origin;
  Vec3 dir;  // need not be unit; hit.ray_parameter is in multiples of dir
};

/// Watertight-enough triangle test: inclusive barycentric bounds so a ray
/// through a shared edge reports both adjacent faces.
inline bool ray_triangle(const Ray& ray, const Vec3& a, const Vec3& b, const Vec3& c,
                         double t_min, SurfaceHit* hit) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 pvec = ray.dir.cross(e2);
  const double det = e1.dot(pvec);
  if (std::abs(det) < 1e-14) return false;
  const double inv = 1.0 / det;
  const Vec3 tvec = ray.origin - a;
  const double u = tvec.dot(pvec) * inv;
  if (u < 0.0 || u > 1.0) return false;
  const Vec3 qvec = tvec.cross(e1);
  const double v = ray.dir.dot(qvec) * inv;
  if (v < 0.0 || u + v > 1.0) return false;
  const double t = e2.dot(qvec) * inv;
  if (t < t_min) return false;
  hit->barycentric = Vec3(1.0 - u - v, u, v);
  hit->ray_parameter = t;
  return true;
}

inline bool hit_before(const SurfaceHit& a, const SurfaceHit& b) {
  if (a.ray_parameter != b.ray_parameter) return a.ray_parameter < b.ray_parameter;
  return a.face_index < b.face_index;
}

/// Every face tested; selection ordered by (t, face). Reference for the BVH.
inline std::vector<SurfaceHit> brute_force_all_hits(const TriMesh& mesh, const Ray& ray,
                                                    double t_min = 1e-9) {
  std::vector<SurfaceHit> hits;
  SurfaceHit h;
  for (int f = 0; f < mesh.n_faces(); ++f) {
    if (ray_triangle(ray, mesh.face_vertex(f, 0), mesh.face_vertex(f, 1), mesh.face_vertex(f, 2),
                     t_min, &h)) {
      h.face_index = f;
      hits.push_back(h);
    }
  }
  std::sort(hits.begin(), hits.end(), hit_before);
  return hits;
}

/// Median-split AABB tree. Query results match the brute-force scan exactly:
/// same triangle test, same (t, face) ordering.
class Bvh {
 public:
  explicit Bvh(const TriMesh& mesh, int leaf_size = 4) : mesh_(&mesh), leaf_size_(leaf_size) {
    mesh.validate();
    const int nf = mesh.n_faces();
    face_order_.resize(nf);
    for (int i = 0; i < nf; ++i) face_order_[i] = i;
    centroids_.resize(nf, 3);
    for (int f = 0; f < nf; ++f)
      centroids_.row(f) =
          (mesh.vertices.row(mesh.faces(f, 0)) + mesh.vertices.row(mesh.faces(f, 1)) +
           mesh.vertices.row(mesh.faces(f, 2))) /
          3.0;
    nodes_.reserve(2 * std::max(nf, 1));
    if (nf > 0) build(0, nf);
  }

  std::vector<SurfaceHit> all_hits(const Ray& ray, double t_min = 1e-9) const {
    std::vector<SurfaceHit> hits;
    if (nodes_.empty()) return hits;
    const Vec3 inv_dir = ray.dir.cwiseInverse();
    std::vector<int> stack = {0};
    SurfaceHit h;
    while (!stack.empty()) {
      const int ni = stack.back();
      stack.pop_back();
      const Node& node = nodes_[ni];
      if (!box_hit(node, ray, inv_dir, t_min, std::numeric_limits<double>::infinity())) continue;
      if (node.is_leaf()) {
        for (int i = node.begin; i < node.end; ++i) {
          const int f = face_order_[i];
          if (ray_triangle(ray, mesh_->face_vertex(f, 0), mesh_->face_vertex(f, 1),
                           mesh_->face_vertex(f, 2), t_min, &h)) {
            h.face_index = f;
            hits.push_back(h);
          }
        }
      } else {
        stack.push_back(node.left);
        stack.push_back(node.right);
      }
    }
    std::sort(hits.begin(), hits.end(), hit_before);
    return hits;
  }

  std::optional<SurfaceHit> first_hit(const Ray& ray, double t_min = 1e-9) const {
    if (nodes_.empty()) return std::nullopt;
    const Vec3 inv_dir = ray.dir.cwiseInverse();
    std::optional<SurfaceHit> best;
    double best_t = std::numeric_limits<double>::infinity();
    std::vector<int> stack = {0};
    SurfaceHit h;
    while (!stack.empty()) {
      const int ni = stack.back();
      stack.pop_back();
      const Node& node = nodes_[ni];
      // prune strictly past the current best; equal t kept so face ties
      // resolve identically to the brute-force scan
      if (!box_hit(node, ray, inv_dir, t_min, best_t)) continue;
      if (node.is_leaf()) {
        for (int i = node.begin; i < node.end; ++i) {
          const int f = face_order_[i];
          if (ray_triangle(ray, mesh_->face_vertex(f, 0), mesh_->face_vertex(f, 1),
                           mesh_->face_vertex(f, 2), t_min, &h)) {
            h.face_index = f;
            if (!best || hit_before(h, *best)) {
              best = h;
              best_t = h.ray_parameter;
            }
          }
        }
      } else {
        stack.push_back(node.left);
        stack.push_back(node.right);
      }
    }
    return best;
  }

 private:
  struct Node {
    Vec3 lo, hi;
    int left = -1, right = -1;  // internal
    int begin = 0, end = 0;     // leaf range in face_order_
    bool is_leaf() const { return left < 0; }
  };

  // returns node index
  int build(int begin, int end) {
    const int ni = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (int i = begin; i < end; ++i) {
      const int f = face_order_[i];
      for (int k = 0; k < 3; ++k) {
        lo = lo.cwiseMin(mesh_->face_vertex(f, k));
        hi = hi.cwiseMax(mesh_->face_vertex(f, k));
      }
    }
    // pad so slab-test rounding cannot cull a genuine surface point
    const Vec3 pad = 1e-9 * (Vec3::Ones() + hi.cwiseAbs().cwiseMax(lo.cwiseAbs()));
    nodes_[ni].lo = lo - pad;
    nodes_[ni].hi = hi + pad;
    if (end - begin <= leaf_size_) {
      nodes_[ni].begin = begin;
      nodes_[ni].end = end;
      return ni;
    }
    Vec3 clo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 chi = -clo;
    for (int i = begin; i < end; ++i) {
      clo = clo.cwiseMin(centroids_.row(face_order_[i]).transpose());
      chi = chi.cwiseMax(centroids_.row(face_order_[i]).transpose());
    }
    int axis;
    (chi - clo).maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    std::nth_element(face_order_.begin() + begin, face_order_.begin() + mid,
                     face_order_.begin() + end, [&](int a, int b) {
                       const double ca = centroids_(a, axis), cb = centroids_(b, axis);
                       if (ca != cb) return ca < cb;
                       return a < b;  // total order keeps the tree deterministic
                     });
    if (mid == begin || mid == end) {  // all centroids equal: give up splitting
      nodes_[ni].begin = begin;
      nodes_[ni].end = end;
      return ni;
    }
    const int l = build(begin, mid);
    const int r = build(mid, end);
    nodes_[ni].left = l;
    nodes_[ni].right = r;
    return ni;
  }

  // conservative slab test (NaNs from 0*inf fall out via fmin/fmax)
  static bool box_hit(const Node& node, const Ray& ray, const Vec3& inv_dir, double t_min,
                      double t_max) {
    double t0 = t_min, t1 = t_max;
    for (int k = 0; k < 3; ++k) {
      const double a = (node.lo[k] - ray.origin[k]) * inv_dir[k];
      const double b = (node.hi[k] - ray.origin[k]) * inv_dir[k];
      t0 = std::fmax(t0, std::fmin(a, b));
      t1 = std::fmin(t1, std::fmax(a, b));
    }
    return t0 <= t1;
  }

  const TriMesh* mesh_;
  int leaf_size_;
  std::vector<int> face_order_;
  MatX3 centroids_;
  std::vector<Node> nodes_;
};

}  // namespace quadfit::geom
