#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/rng.hpp"
#include "quadfit/tmpl/skinned_template.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <vector>

namespace quadfit::tmpl {

struct QuadrupedConfig {
  int subdivision = 2;  // sphere detail level
  int d_beta = 3;
  int d_embed = 16;
  uint64_t seed = 0;
  double scale = 1.0;
  double torso_half_length = 0.9;
  double torso_radius_y = 0.38;
  double torso_radius_z = 0.42;
  double head_radius = 0.28;
  double leg_radius = 0.07;
};

namespace detail {

inline geom::TriMesh icosphere(double radius, int subdivisions) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, phi, 0}, {1, phi, 0},  {-1, -phi, 0}, {1, -phi, 0},
                         {0, -1, phi}, {0, 1, phi},  {0, -1, -phi}, {0, 1, -phi},
                         {phi, 0, -1}, {phi, 0, 1},  {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<Eigen::Vector3i> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                    {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                    {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                    {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      const auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const int idx = static_cast<int>(v.size());
      v.push_back(((v[static_cast<size_t>(a)] + v[static_cast<size_t>(b)]) / 2.0).normalized());
      midpoint[key] = idx;
      return idx;
    };
    std::vector<Eigen::Vector3i> nf;
    nf.reserve(4 * f.size());
    for (const auto& tri : f) {
      const int ab = mid(tri[0], tri[1]), bc = mid(tri[1], tri[2]), ca = mid(tri[2], tri[0]);
      nf.push_back({tri[0], ab, ca});
      nf.push_back({tri[1], bc, ab});
      nf.push_back({tri[2], ca, bc});
      nf.push_back({ab, bc, ca});
    }
    f = std::move(nf);
  }
  geom::TriMesh mesh;
  mesh.vertices.resize(static_cast<int>(v.size()), 3);
  for (size_t i = 0; i < v.size(); ++i)
    mesh.vertices.row(static_cast<int>(i)) = (radius * v[i]).transpose();
  mesh.faces.resize(static_cast<int>(f.size()), 3);
  for (size_t i = 0; i < f.size(); ++i) mesh.faces.row(static_cast<int>(i)) = f[i].transpose();
  return mesh;
}

inline double signed_volume(const geom::TriMesh& m) {
  double vol = 0;
  for (int f = 0; f < m.n_faces(); ++f)
    vol += m.face_vertex(f, 0).dot(m.face_vertex(f, 1).cross(m.face_vertex(f, 2))) / 6.0;
  return vol;
}

inline void orient_outward(geom::TriMesh* m) {
  if (signed_volume(*m) < 0)
    for (int f = 0; f < m->n_faces(); ++f) std::swap(m->faces(f, 1), m->faces(f, 2));
}

inline void orthonormal_frame(const Vec3& w, Vec3* u, Vec3* v) {
  const Vec3 pick = std::abs(w.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitZ();
  *u = w.cross(pick).normalized();
  *v = w.cross(*u);
}

inline geom::TriMesh cylinder(const Vec3& p0, const Vec3& p1, double radius, int n_seg,
                              int n_rings) {
  const Vec3 axis = p1 - p0;
  const Vec3 w = axis.normalized();
  Vec3 u, v;
  orthonormal_frame(w, &u, &v);
  geom::TriMesh m;
  std::vector<Vec3> verts;
  std::vector<Eigen::Vector3i> faces;
  for (int i = 0; i < n_rings; ++i) {
    const Vec3 c = p0 + (static_cast<double>(i) / (n_rings - 1)) * axis;
    for (int s = 0; s < n_seg; ++s) {
      const double a = 2 * kPi * s / n_seg;
      verts.push_back(c + radius * (std::cos(a) * u + std::sin(a) * v));
    }
  }
  auto ring = [&](int i, int s) { return i * n_seg + (s % n_seg); };
  for (int i = 0; i + 1 < n_rings; ++i)
    for (int s = 0; s < n_seg; ++s) {
      faces.push_back({ring(i, s), ring(i, s + 1), ring(i + 1, s + 1)});
      faces.push_back({ring(i, s), ring(i + 1, s + 1), ring(i + 1, s)});
    }
  const int c0 = static_cast<int>(verts.size());
  verts.push_back(p0);
  const int c1 = static_cast<int>(verts.size());
  verts.push_back(p1);
  for (int s = 0; s < n_seg; ++s) {
    faces.push_back({c0, ring(0, s + 1), ring(0, s)});
    faces.push_back({c1, ring(n_rings - 1, s), ring(n_rings - 1, s + 1)});
  }
  m.vertices.resize(static_cast<int>(verts.size()), 3);
  for (size_t i = 0; i < verts.size(); ++i) m.vertices.row(static_cast<int>(i)) = verts[i].transpose();
  m.faces.resize(static_cast<int>(faces.size()), 3);
  for (size_t i = 0; i < faces.size(); ++i) m.faces.row(static_cast<int>(i)) = faces[i].transpose();
  orient_outward(&m);
  return m;
}

inline geom::TriMesh cone(const Vec3& base_center, const Vec3& tip, double radius, int n_seg) {
  const Vec3 w = (tip - base_center).normalized();
  Vec3 u, v;
  orthonormal_frame(w, &u, &v);
  geom::TriMesh m;
  std::vector<Vec3> verts;
  std::vector<Eigen::Vector3i> faces;
  for (int s = 0; s < n_seg; ++s) {
    const double a = 2 * kPi * s / n_seg;
    verts.push_back(base_center + radius * (std::cos(a) * u + std::sin(a) * v));
  }
  const int tip_i = static_cast<int>(verts.size());
  verts.push_back(tip);
  const int bc_i = static_cast<int>(verts.size());
  verts.push_back(base_center);
  for (int s = 0; s < n_seg; ++s) {
    faces.push_back({s, (s + 1) % n_seg, tip_i});
    faces.push_back({bc_i, (s + 1) % n_seg, s});
  }
  m.vertices.resize(static_cast<int>(verts.size()), 3);
  for (size_t i = 0; i < verts.size(); ++i) m.vertices.row(static_cast<int>(i)) = verts[i].transpose();
  m.faces.resize(static_cast<int>(faces.size()), 3);
  for (size_t i = 0; i < faces.size(); ++i) m.faces.row(static_cast<int>(i)) = faces[i].transpose();
  orient_outward(&m);
  return m;
}

inline void append_part(geom::TriMesh* dst, const geom::TriMesh& part) {
  const int v0 = dst->n_vertices(), f0 = dst->n_faces();
  dst->vertices.conservativeResize(v0 + part.n_vertices(), 3);
  dst->vertices.bottomRows(part.n_vertices()) = part.vertices;
  dst->faces.conservativeResize(f0 + part.n_faces(), 3);
  dst->faces.bottomRows(part.n_faces()) = part.faces.array() + v0;
}

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 < 1e-18) return (p - a).norm();
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace detail

/// Deterministic stand-in for a scanned quadruped template: body of simple
/// solids, ~20-joint skeleton, smooth distance-based skin weights, procedural
/// shape basis and a smooth per-vertex descriptor atlas.
inline SkinnedTemplate build_synthetic_quadruped(const QuadrupedConfig& cfg) {
  if (cfg.d_beta < 1) throw ConfigError("quadruped: d_beta must be >= 1");
  if (cfg.d_embed < 2) throw ConfigError("quadruped: d_embed must be >= 2");
  if (cfg.subdivision < 0) throw ConfigError("quadruped: negative subdivision");
  if (cfg.scale <= 0 || cfg.torso_half_length <= 0 || cfg.torso_radius_y <= 0 ||
      cfg.torso_radius_z <= 0 || cfg.head_radius <= 0 || cfg.leg_radius <= 0)
    throw ConfigError("quadruped: proportions must be positive");

  SkinnedTemplate tpl;

  // body axis +x (nose forward), up +z; torso centered at the origin
  const Vec3 head_c(1.15, 0, 0.38);
  const Vec3 nose_tip(1.48, 0, 0.33);

  geom::TriMesh torso = detail::icosphere(1.0, cfg.subdivision);
  for (int i = 0; i < torso.n_vertices(); ++i) {
    torso.vertices(i, 0) *= cfg.torso_half_length;
    torso.vertices(i, 1) *= cfg.torso_radius_y;
    torso.vertices(i, 2) *= cfg.torso_radius_z;
  }
  geom::TriMesh body = torso;
  detail::append_part(&body, detail::cylinder(Vec3(0.68, 0, 0.22), Vec3(1.02, 0, 0.34), 0.14, 8, 3));
  {
    geom::TriMesh head = detail::icosphere(cfg.head_radius, cfg.subdivision);
    head.vertices.rowwise() += head_c.transpose();
    detail::append_part(&body, head);
  }
  {
    geom::TriMesh nose = detail::icosphere(0.09, std::max(0, cfg.subdivision - 1));
    nose.vertices.rowwise() += Vec3(1.40, 0, 0.33).transpose();
    detail::append_part(&body, nose);
  }
  for (const double sy : {1.0, -1.0}) {
    detail::append_part(&body, detail::cone(Vec3(1.18, sy * 0.14, 0.56), Vec3(1.22, sy * 0.17, 0.80),
                                            0.07, 8));
  }
  detail::append_part(&body, detail::cone(Vec3(-0.86, 0, 0.18), Vec3(-1.42, 0, 0.44), 0.06, 8));
  const std::array<Vec3, 4> hips = {Vec3(0.55, 0.30, -0.15), Vec3(0.55, -0.30, -0.15),
                                    Vec3(-0.55, 0.30, -0.15), Vec3(-0.55, -0.30, -0.15)};
  const std::array<Vec3, 4> knees = {Vec3(0.55, 0.30, -0.55), Vec3(0.55, -0.30, -0.55),
                                     Vec3(-0.55, 0.30, -0.55), Vec3(-0.55, -0.30, -0.55)};
  const std::array<Vec3, 4> paws = {Vec3(0.55, 0.30, -0.95), Vec3(0.55, -0.30, -0.95),
                                    Vec3(-0.55, 0.30, -0.95), Vec3(-0.55, -0.30, -0.95)};
  for (int leg = 0; leg < 4; ++leg)
    detail::append_part(&body, detail::cylinder(hips[static_cast<size_t>(leg)] + Vec3(0, 0, 0.08),
                                                paws[static_cast<size_t>(leg)], cfg.leg_radius, 8, 10));

  body.vertices *= cfg.scale;
  tpl.rest_mesh = body;

  // skeleton: parents precede children
  struct JointDef {
    const char* name;
    int parent;
    Vec3 pos;
  };
  const std::vector<JointDef> defs = {
      {"root", -1, {0, 0, 0}},
      {"neck", 0, {0.80, 0, 0.30}},
      {"head", 1, head_c},
      {"nose", 2, {1.45, 0, 0.33}},
      {"ear_l", 2, {1.22, 0.17, 0.74}},
      {"ear_r", 2, {1.22, -0.17, 0.74}},
      {"tail_base", 0, {-0.86, 0, 0.18}},
      {"tail_tip", 6, {-1.40, 0, 0.43}},
      {"fl_hip", 0, hips[0]},
      {"fl_knee", 8, knees[0]},
      {"fl_paw", 9, paws[0]},
      {"fr_hip", 0, hips[1]},
      {"fr_knee", 11, knees[1]},
      {"fr_paw", 12, paws[1]},
      {"bl_hip", 0, hips[2]},
      {"bl_knee", 14, knees[2]},
      {"bl_paw", 15, paws[2]},
      {"br_hip", 0, hips[3]},
      {"br_knee", 17, knees[3]},
      {"br_paw", 18, paws[3]},
  };
  const int nj = static_cast<int>(defs.size());
  MatX3 joint_pos(nj, 3);
  for (int j = 0; j < nj; ++j) {
    tpl.skeleton.parents.push_back(defs[static_cast<size_t>(j)].parent);
    tpl.skeleton.names.push_back(defs[static_cast<size_t>(j)].name);
    joint_pos.row(j) = (cfg.scale * defs[static_cast<size_t>(j)].pos).transpose();
  }
  for (const char* name : {"nose", "ear_l", "ear_r", "neck", "head", "tail_tip", "fl_knee",
                           "fr_knee", "bl_knee", "br_knee", "fl_paw", "fr_paw", "bl_paw", "br_paw"})
    for (int j = 0; j < nj; ++j)
      if (tpl.skeleton.names[static_cast<size_t>(j)] == name) tpl.keypoint_joints.push_back(j);

  // influence segment per joint: its outgoing bone (leaves get a point)
  const int nv = body.n_vertices();
  std::vector<std::array<Vec3, 2>> seg(static_cast<size_t>(nj));
  std::vector<double> sigma(static_cast<size_t>(nj), 0.12);
  auto J = [&](int j) { return joint_pos.row(j).transpose(); };
  auto find = [&](const char* n) {
    for (int j = 0; j < nj; ++j)
      if (tpl.skeleton.names[static_cast<size_t>(j)] == n) return j;
    throw IndexError("quadruped: missing joint");
  };
  for (int j = 0; j < nj; ++j) seg[static_cast<size_t>(j)] = {J(j), J(j)};
  seg[0] = {cfg.scale * Vec3(-0.75, 0, 0), cfg.scale * Vec3(0.75, 0, 0)};
  sigma[0] = 0.30;
  seg[static_cast<size_t>(find("neck"))] = {J(find("neck")), J(find("head"))};
  sigma[static_cast<size_t>(find("neck"))] = 0.16;
  seg[static_cast<size_t>(find("head"))] = {J(find("head")), J(find("nose"))};
  sigma[static_cast<size_t>(find("head"))] = 0.22;
  sigma[static_cast<size_t>(find("nose"))] = 0.08;
  sigma[static_cast<size_t>(find("ear_l"))] = 0.10;
  sigma[static_cast<size_t>(find("ear_r"))] = 0.10;
  seg[static_cast<size_t>(find("tail_base"))] = {J(find("tail_base")), J(find("tail_tip"))};
  sigma[static_cast<size_t>(find("tail_base"))] = 0.10;
  sigma[static_cast<size_t>(find("tail_tip"))] = 0.10;
  for (const char* leg : {"fl", "fr", "bl", "br"}) {
    const int hip = find((std::string(leg) + "_hip").c_str());
    const int knee = find((std::string(leg) + "_knee").c_str());
    const int paw = find((std::string(leg) + "_paw").c_str());
    seg[static_cast<size_t>(hip)] = {J(hip), J(knee)};
    seg[static_cast<size_t>(knee)] = {J(knee), J(paw)};
    sigma[static_cast<size_t>(hip)] = 0.11;
    sigma[static_cast<size_t>(knee)] = 0.10;
    sigma[static_cast<size_t>(paw)] = 0.09;
  }

  tpl.skin_weights.resize(nv, nj);
  for (int k = 0; k < nv; ++k) {
    const Vec3 p = body.vertex(k);
    for (int j = 0; j < nj; ++j) {
      const double d = detail::point_segment_distance(p, seg[static_cast<size_t>(j)][0],
                                                      seg[static_cast<size_t>(j)][1]);
      const double s = cfg.scale * sigma[static_cast<size_t>(j)];
      tpl.skin_weights(k, j) = std::exp(-0.5 * d * d / (s * s));
    }
    tpl.skin_weights(k, 0) += 1e-12;  // guard against an all-zero row
    tpl.skin_weights.row(k) /= tpl.skin_weights.row(k).sum();
  }

  // joint regressor: inverse-distance weights over the 8 nearest rest vertices
  tpl.joint_regressor = MatX::Zero(nj, nv);
  for (int j = 0; j < nj; ++j) {
    std::vector<std::pair<double, int>> dist;
    dist.reserve(static_cast<size_t>(nv));
    for (int k = 0; k < nv; ++k) dist.push_back({(body.vertex(k) - J(j)).norm(), k});
    std::sort(dist.begin(), dist.end());
    double total = 0;
    const int K = 8;
    for (int r = 0; r < K; ++r) total += 1.0 / (dist[static_cast<size_t>(r)].first + 1e-9);
    for (int r = 0; r < K; ++r)
      tpl.joint_regressor(j, dist[static_cast<size_t>(r)].second) =
          (1.0 / (dist[static_cast<size_t>(r)].first + 1e-9)) / total;
  }

  // shape basis: global scale, torso elongation, leg length, then seeded
  // smooth fields for any extra dimensions
  const Vec3 centroid = body.centroid();
  Rng rng(splitmix64(cfg.seed ^ 0x9e1f));
  for (int i = 0; i < cfg.d_beta; ++i) {
    MatX3 basis = MatX3::Zero(nv, 3);
    const double belly_z = -0.35 * cfg.scale;
    for (int k = 0; k < nv; ++k) {
      const Vec3 p = body.vertex(k);
      if (i == 0) {
        basis.row(k) = (p - centroid).transpose();
      } else if (i == 1) {
        basis(k, 0) = p.x() - centroid.x();
      } else if (i == 2) {
        basis(k, 2) = -std::max(0.0, belly_z - p.z());
      }
    }
    if (i >= 3) {
      const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0),
                   fz = rng.uniform(0.5, 2.0);
      const double px = rng.uniform(0, kPi), py = rng.uniform(0, kPi), pz = rng.uniform(0, kPi);
      for (int k = 0; k < nv; ++k) {
        const Vec3 p = body.vertex(k) / cfg.scale;
        basis.row(k) << 0.1 * std::sin(fx * p.x() + px), 0.1 * std::sin(fy * p.y() + py),
            0.1 * std::sin(fz * p.z() + pz);
      }
      basis *= cfg.scale;
    }
    tpl.shape_basis.push_back(std::move(basis));
  }

  // descriptor atlas: low-order trig functions of the normalized rest
  // position; odd-in-y entries keep left and right distinguishable
  const Vec3 lo = body.vertices.colwise().minCoeff().transpose();
  const Vec3 hi = body.vertices.colwise().maxCoeff().transpose();
  const std::vector<std::array<double, 4>> bank = {
      {1, 0, 0, 0},    {0, 1, 0, 0},    {0, 0, 1, 0},    {1, 0, 0, 0.5},
      {0, 1, 0, 0.5},  {0, 0, 1, 0.5},  {1, 1, 0, 0},    {1, 0, 1, 0},
      {0, 1, 1, 0},    {2, 1, 0, 0},    {1, 2, 0, 0},    {1, 0, 2, 0},
      {0, 1, 2, 0},    {2, 0, 1, 0},    {1, 1, 1, 0},    {2, 1, 1, 0}};
  tpl.embedding_atlas.resize(nv, cfg.d_embed);
  for (int m = 0; m < cfg.d_embed; ++m) {
    std::array<double, 4> fr{};
    if (m < static_cast<int>(bank.size()))
      fr = bank[static_cast<size_t>(m)];
    else
      fr = {1.0 + m % 3, 1.0 + (m / 3) % 3, 1.0 + (m / 9) % 3, 0.3 * m};
    for (int k = 0; k < nv; ++k) {
      const Vec3 p = body.vertex(k);
      const Vec3 n((p.x() - lo.x()) / (hi.x() - lo.x()), (p.y() - lo.y()) / (hi.y() - lo.y()),
                   (p.z() - lo.z()) / (hi.z() - lo.z()));
      tpl.embedding_atlas(k, m) =
          std::sin(kPi * (fr[0] * n.x() + fr[1] * n.y() + fr[2] * n.z() + fr[3]));
    }
    const double mean = tpl.embedding_atlas.col(m).mean();
    tpl.embedding_atlas.col(m).array() -= mean;
    const double sd = std::sqrt(tpl.embedding_atlas.col(m).squaredNorm() / nv);
    if (sd > 1e-12) tpl.embedding_atlas.col(m) /= sd;
  }

  tpl.validate();
  return tpl;
}

}  // namespace quadfit::tmpl
