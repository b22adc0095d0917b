#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"

#include <set>
#include <utility>
#include <vector>

namespace quadfit::geom {

struct TriMesh {
  MatX3 vertices;  // world units
  MatX3i faces;    // vertex index triples

  int n_vertices() const { return static_cast<int>(vertices.rows()); }
  int n_faces() const { return static_cast<int>(faces.rows()); }

  Vec3 vertex(int i) const { return vertices.row(i).transpose(); }
  Vec3 face_vertex(int f, int corner) const { return vertices.row(faces(f, corner)).transpose(); }

  void validate() const {
    if (n_vertices() < 3) throw DimensionMismatch("mesh needs >= 3 vertices");
    for (int f = 0; f < n_faces(); ++f) {
      const int a = faces(f, 0), b = faces(f, 1), c = faces(f, 2);
      if (a < 0 || b < 0 || c < 0 || a >= n_vertices() || b >= n_vertices() || c >= n_vertices())
        throw IndexError("face index out of range");
      if (a == b || b == c || a == c) throw IndexError("degenerate face (repeated index)");
    }
  }

  Vec3 centroid() const { return vertices.colwise().mean().transpose(); }

  double bounding_sphere_radius() const {
    const Vec3 c = centroid();
    double r2 = 0;
    for (int i = 0; i < n_vertices(); ++i) r2 = std::max(r2, (vertex(i) - c).squaredNorm());
    return std::sqrt(r2);
  }

  /// Unique undirected edges, each as (i, j) with i < j.
  std::vector<std::pair<int, int>> unique_edges() const {
    std::set<std::pair<int, int>> s;
    for (int f = 0; f < n_faces(); ++f) {
      for (int k = 0; k < 3; ++k) {
        int a = faces(f, k), b = faces(f, (k + 1) % 3);
        if (a > b) std::swap(a, b);
        s.insert({a, b});
      }
    }
    return {s.begin(), s.end()};
  }
};

/// Intersection of a ray with one mesh face.
struct SurfaceHit {
  int face_index = -1;
  Vec3 barycentric = Vec3::Zero();  // non-negative, sums to 1
  double ray_parameter = 0.0;       // >= 0
};

struct VertexNormals {
  MatX3 normals;                          // unit rows
  std::vector<int> degenerate_vertices;   // zero-area-only vertices, normal arbitrary
};

/// Area-weighted vertex normals. Vertices touched only by zero-area faces get
/// an arbitrary unit normal and are reported.
inline VertexNormals vertex_normals(const TriMesh& mesh) {
  mesh.validate();
  VertexNormals out;
  out.normals = MatX3::Zero(mesh.n_vertices(), 3);
  for (int f = 0; f < mesh.n_faces(); ++f) {
    const Vec3 a = mesh.face_vertex(f, 0);
    const Vec3 b = mesh.face_vertex(f, 1);
    const Vec3 c = mesh.face_vertex(f, 2);
    const Vec3 an = (b - a).cross(c - a);  // 2*area * unit normal
    for (int k = 0; k < 3; ++k) out.normals.row(mesh.faces(f, k)) += an.transpose();
  }
  for (int i = 0; i < mesh.n_vertices(); ++i) {
    const double n = out.normals.row(i).norm();
    if (n < 1e-14) {
      out.normals.row(i) = Vec3::UnitZ().transpose();
      out.degenerate_vertices.push_back(i);
    } else {
      out.normals.row(i) /= n;
    }
  }
  return out;
}

struct ShellPair {
  TriMesh outer;
  TriMesh inner;
  bool self_intersection_warning = false;  // inner extrusion inverted a face
};

/// Offsets every vertex by +/- epsilon along its normal; topology is shared
/// bit-identically with the input.
inline ShellPair extrude_shell(const TriMesh& mesh, const MatX3& normals, double epsilon) {
  if (!(epsilon > 0)) throw ConfigError("extrude_shell: epsilon must be > 0");
  if (normals.rows() != mesh.vertices.rows())
    throw DimensionMismatch("extrude_shell: normals size");
  ShellPair out;
  out.outer.vertices = mesh.vertices + epsilon * normals;
  out.outer.faces = mesh.faces;
  out.inner.vertices = mesh.vertices - epsilon * normals;
  out.inner.faces = mesh.faces;
  for (int f = 0; f < mesh.n_faces(); ++f) {
    const Vec3 n0 = (mesh.face_vertex(f, 1) - mesh.face_vertex(f, 0))
                        .cross(mesh.face_vertex(f, 2) - mesh.face_vertex(f, 0));
    const Vec3 n1 = (out.inner.face_vertex(f, 1) - out.inner.face_vertex(f, 0))
                        .cross(out.inner.face_vertex(f, 2) - out.inner.face_vertex(f, 0));
    if (n0.dot(n1) < 0) {
      out.self_intersection_warning = true;
      break;
    }
  }
  return out;
}

/// Applies hit barycentrics on another mesh with the same topology.
inline Vec3 barycentric_transport(const SurfaceHit& hit, const TriMesh& target) {
  if (hit.face_index < 0 || hit.face_index >= target.n_faces())
    throw IndexError("barycentric_transport: face index outside target topology");
  Vec3 p = Vec3::Zero();
  for (int k = 0; k < 3; ++k)
    p += hit.barycentric[k] * target.face_vertex(hit.face_index, k);
  return p;
}

}  // namespace quadfit::geom
