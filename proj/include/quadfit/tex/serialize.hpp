#pragma once

#include "quadfit/io/blob.hpp"
#include "quadfit/tex/field.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace quadfit::tex {

/// Writes `stem.json` (layout) and `stem.f32` (flat parameters).
inline void save_field(const TextureField& f, const std::string& stem) {
  nlohmann::json j;
  j["R"] = f.grid.R;
  j["C"] = f.grid.C;
  j["L_dir"] = f.L_dir;
  j["width"] = static_cast<int>(f.sigma_mlp.W[0].rows());
  j["lo"] = {f.grid.lo[0], f.grid.lo[1], f.grid.lo[2]};
  j["hi"] = {f.grid.hi[0], f.grid.hi[1], f.grid.hi[2]};
  j["n_params"] = f.n_params();
  std::ofstream out(stem + ".json");
  if (!out) throw IoError("cannot write " + stem + ".json");
  out << j.dump(2) << "\n";
  VecX flat(f.n_params());
  f.to_flat(flat);
  MatX row = flat.transpose();
  io::write_matrix_f32(stem + ".f32", row);
}

inline TextureField load_field(const std::string& stem) {
  std::ifstream in(stem + ".json");
  if (!in) throw IoError("cannot open " + stem + ".json");
  nlohmann::json j;
  in >> j;
  TextureField f;
  f.grid.R = j.at("R").get<int>();
  f.grid.C = j.at("C").get<int>();
  f.L_dir = j.at("L_dir").get<int>();
  for (int k = 0; k < 3; ++k) {
    f.grid.lo[k] = j.at("lo")[static_cast<size_t>(k)].get<double>();
    f.grid.hi[k] = j.at("hi")[static_cast<size_t>(k)].get<double>();
  }
  const int width = j.at("width").get<int>();
  Rng rng(0);
  f = TextureField::make(f.grid.R, f.grid.C, width, f.L_dir, f.grid.lo, f.grid.hi, rng);
  const int n = j.at("n_params").get<int>();
  if (n != f.n_params()) throw IoError("field checkpoint: parameter count mismatch");
  const MatX row = io::read_matrix_f32(stem + ".f32", 1, n);
  f.from_flat(row.row(0).transpose());
  return f;
}

}  // namespace quadfit::tex
