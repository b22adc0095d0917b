#pragma once

#include "quadfit/core/math.hpp"
#include "quadfit/geom/bvh.hpp"
#include "quadfit/geom/trimesh.hpp"
#include "quadfit/tmpl/skinned_template.hpp"

namespace quadfit::render {

/// Canonical offset surfaces bracketing the template; topology is shared with
/// the rest mesh, so hits transport between the posed and canonical copies by
/// barycentric coordinates.
struct DuplexShells {
  geom::TriMesh canon_outer, canon_inner;
  double epsilon = 0.0;
  bool extrusion_warning = false;
};

inline DuplexShells make_duplex_shells(const tmpl::SkinnedTemplate& tpl, double epsilon) {
  const auto vn = geom::vertex_normals(tpl.rest_mesh);
  auto pair = geom::extrude_shell(tpl.rest_mesh, vn.normals, epsilon);
  DuplexShells out;
  out.canon_outer = std::move(pair.outer);
  out.canon_inner = std::move(pair.inner);
  out.epsilon = epsilon;
  out.extrusion_warning = pair.self_intersection_warning;
  return out;
}

/// Box around the outer shell grown by a relative margin; the texture field
/// lives on this box so every march sample stays interior.
inline void shell_bounds(const DuplexShells& shells, double margin, Vec3* lo, Vec3* hi) {
  const auto& v = shells.canon_outer.vertices;
  *lo = v.colwise().minCoeff().transpose();
  *hi = v.colwise().maxCoeff().transpose();
  const Vec3 pad = margin * (*hi - *lo).cwiseMax(1e-6);
  *lo -= pad;
  *hi += pad;
}

/// Both shells deformed by the same skinning as the main mesh (joints still
/// regressed from the main shaped vertices).
struct PosedDuplex {
  geom::TriMesh posed_outer, posed_inner;
  tmpl::LbsCache cache_outer, cache_inner;
};

inline void pose_duplex(const tmpl::SkinnedTemplate& tpl, const DuplexShells& shells,
                        const tmpl::ShapeParams& beta, const tmpl::PoseParams& theta,
                        PosedDuplex* out) {
  out->posed_outer.faces = shells.canon_outer.faces;
  out->posed_outer.vertices =
      tmpl::lbs_deform(tpl, beta, theta, &out->cache_outer, &shells.canon_outer.vertices);
  out->posed_inner.faces = shells.canon_inner.faces;
  out->posed_inner.vertices =
      tmpl::lbs_deform(tpl, beta, theta, &out->cache_inner, &shells.canon_inner.vertices);
}

enum class SegmentKind { Invalid = 0, OuterInner = 1, OuterOuter = 2 };

struct DuplexHit {
  SegmentKind kind = SegmentKind::Invalid;
  geom::SurfaceHit entry;  // on the outer shell
  geom::SurfaceHit exit;   // on the inner shell (OuterInner) or outer (OuterOuter)
};

/// Scenario rules: no outer hit or inner-before-outer discards the ray; an
/// inner hit behind the outer entry closes the segment there; otherwise a
/// second outer hit closes a grazing segment through the band.
inline DuplexHit intersect_duplex(const geom::Ray& ray, const geom::Bvh& outer,
                                  const geom::Bvh& inner, double t_min = 1e-9) {
  DuplexHit out;
  const auto entry = outer.first_hit(ray, t_min);
  if (!entry) return out;
  const auto inner_hit = inner.first_hit(ray, t_min);
  if (inner_hit) {
    if (inner_hit->ray_parameter < entry->ray_parameter) return out;  // inner shell first
    out.kind = SegmentKind::OuterInner;
    out.entry = *entry;
    out.exit = *inner_hit;
    return out;
  }
  const auto hits = outer.all_hits(ray, t_min);
  if (hits.size() < 2) return out;
  out.kind = SegmentKind::OuterOuter;
  out.entry = hits[0];
  out.exit = hits[1];
  return out;
}

/// Gradients of the intersection barycentrics w.r.t. the triangle vertices,
/// with the face held fixed. With b = (1-u-v, u, v) an upstream (db0, db1,
/// db2) chains through dL/du = db1 - db0 and dL/dv = db2 - db0.
struct BaryVertexJac {
  Vec3 du[3];
  Vec3 dv[3];
};

inline bool bary_vertex_jacobian(const geom::Ray& ray, const Vec3& a, const Vec3& b, const Vec3& c,
                                 BaryVertexJac* jac) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 d = ray.dir;
  const Vec3 tvec = ray.origin - a;
  const Vec3 dxe2 = d.cross(e2);
  const double den = e1.dot(dxe2);
  if (std::abs(den) < 1e-14) return false;
  const double u = tvec.dot(dxe2) / den;
  const double v = d.dot(tvec.cross(e1)) / den;
  const Vec3 txd = tvec.cross(d);
  const Vec3 e1xd = e1.cross(d);
  // scalar triples: U = tvec.(d x e2), V = d.(tvec x e1), den = e1.(d x e2)
  const Vec3 gU[3] = {-dxe2 - txd, Vec3::Zero(), txd};
  const Vec3 gV[3] = {-e1xd + txd, -txd, Vec3::Zero()};
  const Vec3 gD[3] = {-dxe2 - e1xd, dxe2, e1xd};
  for (int k = 0; k < 3; ++k) {
    jac->du[k] = (gU[k] - u * gD[k]) / den;
    jac->dv[k] = (gV[k] - v * gD[k]) / den;
  }
  return true;
}

}  // namespace quadfit::render
