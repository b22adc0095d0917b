#pragma once

// Shared fixtures for the test suite: procedural meshes and random rigid
// transforms, independent of the library's own generators where that matters.

#include "quadfit/cam/rigid3.hpp"
#include "quadfit/core/math.hpp"
#include "quadfit/core/rng.hpp"
#include "quadfit/geom/trimesh.hpp"

#include <map>
#include <vector>

namespace testutil {

using quadfit::Vec3;

inline quadfit::geom::TriMesh make_icosphere(double radius, int subdivisions) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {
      {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
      {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
      {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<Eigen::Vector3i> f = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const int idx = static_cast<int>(v.size());
      v.push_back(((v[a] + v[b]) / 2.0).normalized());
      midpoint[key] = idx;
      return idx;
    };
    std::vector<Eigen::Vector3i> nf;
    for (const auto& tri : f) {
      const int ab = mid(tri[0], tri[1]), bc = mid(tri[1], tri[2]), ca = mid(tri[2], tri[0]);
      nf.push_back({tri[0], ab, ca});
      nf.push_back({tri[1], bc, ab});
      nf.push_back({tri[2], ca, bc});
      nf.push_back({ab, bc, ca});
    }
    f = std::move(nf);
  }
  quadfit::geom::TriMesh mesh;
  mesh.vertices.resize(static_cast<int>(v.size()), 3);
  for (size_t i = 0; i < v.size(); ++i) mesh.vertices.row(static_cast<int>(i)) = (radius * v[i]).transpose();
  mesh.faces.resize(static_cast<int>(f.size()), 3);
  for (size_t i = 0; i < f.size(); ++i) mesh.faces.row(static_cast<int>(i)) = f[i].transpose();
  return mesh;
}

inline quadfit::Mat3 random_rotation(quadfit::Rng& rng) {
  const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
  return quadfit::rodrigues(axis * rng.uniform(0.0, quadfit::kPi * 0.95));
}

inline quadfit::cam::Rigid3 random_rigid(quadfit::Rng& rng, double t_scale = 1.0) {
  quadfit::cam::Rigid3 g;
  g.R = random_rotation(rng);
  g.t = t_scale * Vec3(rng.normal(), rng.normal(), rng.normal());
  return g;
}

/// Random soup of well-conditioned triangles inside [-1,1]^3.
inline quadfit::geom::TriMesh random_triangle_soup(quadfit::Rng& rng, int n_faces) {
  quadfit::geom::TriMesh mesh;
  mesh.vertices.resize(3 * n_faces, 3);
  mesh.faces.resize(n_faces, 3);
  for (int f = 0; f < n_faces; ++f) {
    const Vec3 center(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    for (int k = 0; k < 3; ++k) {
      const Vec3 d(rng.normal(), rng.normal(), rng.normal());
      mesh.vertices.row(3 * f + k) = (center + 0.3 * d).transpose();
    }
    mesh.faces.row(f) << 3 * f, 3 * f + 1, 3 * f + 2;
  }
  return mesh;
}

}  // namespace testutil
