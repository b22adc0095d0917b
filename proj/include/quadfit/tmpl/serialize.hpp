#pragma once

#include "quadfit/geom/obj_io.hpp"
#include "quadfit/io/blob.hpp"
#include "quadfit/tmpl/skinned_template.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

namespace quadfit::tmpl {

/// Template archive = directory: rest.obj + template.json + binary blobs.
/// Weights/regressor/basis stay f64 (row sums must hold to 1e-6); the
/// descriptor atlas is f32 per the interface contract.
inline void save_template(const std::string& dir, const SkinnedTemplate& tpl) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  geom::save_obj((fs::path(dir) / "rest.obj").string(), tpl.rest_mesh);

  const int nv = tpl.n_vertices(), nj = tpl.n_joints();
  io::write_matrix_f64((fs::path(dir) / "weights.f64").string(), tpl.skin_weights);
  io::write_matrix_f64((fs::path(dir) / "regressor.f64").string(), tpl.joint_regressor);
  MatX basis(tpl.d_beta() * nv, 3);
  for (int i = 0; i < tpl.d_beta(); ++i)
    basis.middleRows(i * nv, nv) = tpl.shape_basis[static_cast<size_t>(i)];
  io::write_matrix_f64((fs::path(dir) / "basis.f64").string(), basis);
  io::write_matrix_f32((fs::path(dir) / "atlas.f32").string(), tpl.embedding_atlas);

  nlohmann::json j;
  j["rest_obj"] = "rest.obj";
  j["parents"] = tpl.skeleton.parents;
  j["names"] = tpl.skeleton.names;
  j["keypoint_joints"] = tpl.keypoint_joints;
  j["skin_weights"] = {{"file", "weights.f64"}, {"dtype", "f64"}, {"shape", {nv, nj}}};
  j["joint_regressor"] = {{"file", "regressor.f64"}, {"dtype", "f64"}, {"shape", {nj, nv}}};
  j["shape_basis"] = {{"file", "basis.f64"}, {"dtype", "f64"}, {"shape", {tpl.d_beta(), nv, 3}}};
  j["embedding_atlas"] = {
      {"file", "atlas.f32"}, {"dtype", "f32"}, {"shape", {nv, tpl.d_embed()}}};
  std::ofstream out(fs::path(dir) / "template.json");
  if (!out) throw IoError("cannot write template.json in " + dir);
  out << j.dump(1) << "\n";
}

inline SkinnedTemplate load_template(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "template.json");
  if (!in) throw IoError("cannot open template.json in " + dir);
  nlohmann::json j;
  in >> j;

  SkinnedTemplate tpl;
  tpl.rest_mesh = geom::load_obj((fs::path(dir) / j.at("rest_obj").get<std::string>()).string());
  tpl.skeleton.parents = j.at("parents").get<std::vector<int>>();
  tpl.skeleton.names = j.at("names").get<std::vector<std::string>>();
  tpl.keypoint_joints = j.at("keypoint_joints").get<std::vector<int>>();

  auto shape2 = [&](const nlohmann::json& meta) {
    return std::pair<int, int>(meta.at("shape")[0].get<int>(), meta.at("shape")[1].get<int>());
  };
  {
    const auto& meta = j.at("skin_weights");
    const auto [r, c] = shape2(meta);
    tpl.skin_weights =
        io::read_matrix_f64((fs::path(dir) / meta.at("file").get<std::string>()).string(), r, c);
  }
  {
    const auto& meta = j.at("joint_regressor");
    const auto [r, c] = shape2(meta);
    tpl.joint_regressor =
        io::read_matrix_f64((fs::path(dir) / meta.at("file").get<std::string>()).string(), r, c);
  }
  {
    const auto& meta = j.at("shape_basis");
    const int d = meta.at("shape")[0].get<int>();
    const int nv = meta.at("shape")[1].get<int>();
    const MatX stacked = io::read_matrix_f64(
        (fs::path(dir) / meta.at("file").get<std::string>()).string(), d * nv, 3);
    for (int i = 0; i < d; ++i) tpl.shape_basis.push_back(stacked.middleRows(i * nv, nv));
  }
  {
    const auto& meta = j.at("embedding_atlas");
    const auto [r, c] = shape2(meta);
    tpl.embedding_atlas =
        io::read_matrix_f32((fs::path(dir) / meta.at("file").get<std::string>()).string(), r, c);
  }
  tpl.validate();
  return tpl;
}

}  // namespace quadfit::tmpl
