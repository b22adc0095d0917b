#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/geom/trimesh.hpp"

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace quadfit::geom {

/// Minimal OBJ subset: `v x y z` and triangle `f` lines (1-indexed, optional
/// /vt/vn suffixes ignored). Anything with more than 3 face corners is an error.
inline TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Vec3> verts;
  std::vector<Eigen::Vector3i> faces;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v[0] >> v[1] >> v[2]))
        throw IoError(path + ":" + std::to_string(lineno) + ": bad vertex line");
      verts.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        // strip /vt/vn part
        const auto slash = tok.find('/');
        if (slash != std::string::npos) tok = tok.substr(0, slash);
        int i = std::stoi(tok);
        if (i < 0) i = static_cast<int>(verts.size()) + i + 1;  // negative = relative
        idx.push_back(i - 1);
      }
      if (idx.size() != 3)
        throw IoError(path + ":" + std::to_string(lineno) + ": only triangle faces supported");
      faces.emplace_back(idx[0], idx[1], idx[2]);
    }
    // other tags (vn, vt, o, g, s, mtllib, usemtl, #) skipped
  }
  TriMesh mesh;
  mesh.vertices.resize(static_cast<int>(verts.size()), 3);
  for (size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<int>(i)) = verts[i].transpose();
  mesh.faces.resize(static_cast<int>(faces.size()), 3);
  for (size_t i = 0; i < faces.size(); ++i) mesh.faces.row(static_cast<int>(i)) = faces[i].transpose();
  mesh.validate();
  return mesh;
}

inline void save_obj(const std::string& path, const TriMesh& mesh) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  for (int i = 0; i < mesh.n_vertices(); ++i)
    out << "v " << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' ' << mesh.vertices(i, 2)
        << '\n';
  for (int f = 0; f < mesh.n_faces(); ++f)
    out << "f " << mesh.faces(f, 0) + 1 << ' ' << mesh.faces(f, 1) + 1 << ' '
        << mesh.faces(f, 2) + 1 << '\n';
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace quadfit::geom
