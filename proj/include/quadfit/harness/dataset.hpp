#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/image.hpp"
#include "quadfit/data/observations.hpp"
#include "quadfit/harness/synth.hpp"
#include "quadfit/io/blob.hpp"
#include "quadfit/io/png.hpp"
#include "quadfit/tex/serialize.hpp"
#include "quadfit/tmpl/serialize.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace quadfit::harness {

namespace detail {

namespace fs = std::filesystem;

inline std::string frame_name(int t, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d%s", t, ext);
  return buf;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  return j;
}

/// Planar CHW float32 blob with a JSON sidecar giving the shape.
inline void write_image_f32(const fs::path& stem, const Image& img) {
  std::vector<float> buf(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) buf[i] = static_cast<float>(img.data[i]);
  io::write_raw(stem.string() + ".f32", buf.data(), buf.size());
  write_json(stem.string() + ".json", {{"channels", img.channels},
                                       {"height", img.height},
                                       {"width", img.width},
                                       {"dtype", "f32le"},
                                       {"layout", "chw"}});
}

inline Image read_image_f32(const fs::path& stem) {
  const auto j = read_json(stem.string() + ".json");
  Image img(j.at("channels").get<int>(), j.at("height").get<int>(), j.at("width").get<int>());
  const auto buf = io::read_raw<float>(stem.string() + ".f32");
  if (buf.size() != img.data.size()) throw IoError("image blob size mismatch: " + stem.string());
  for (size_t i = 0; i < buf.size(); ++i) img.data[i] = static_cast<double>(buf[i]);
  return img;
}

inline nlohmann::json camera_to_json(const cam::Camera& c) {
  std::vector<double> rot(9);
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) rot[static_cast<size_t>(3 * r + k)] = c.extrinsics.R(r, k);
  return {{"R", rot},
          {"t", std::vector<double>{c.extrinsics.t[0], c.extrinsics.t[1], c.extrinsics.t[2]}},
          {"fx", c.fx},
          {"fy", c.fy},
          {"cx", c.cx},
          {"cy", c.cy},
          {"height", c.height},
          {"width", c.width},
          {"timestamp", c.timestamp}};
}

inline cam::Camera camera_from_json(const nlohmann::json& j) {
  cam::Camera c;
  const auto rot = j.at("R").get<std::vector<double>>();
  const auto t = j.at("t").get<std::vector<double>>();
  if (rot.size() != 9 || t.size() != 3) throw IoError("camera json: bad rotation/translation");
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) c.extrinsics.R(r, k) = rot[static_cast<size_t>(3 * r + k)];
  c.extrinsics.t = Vec3(t[0], t[1], t[2]);
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.timestamp = j.at("timestamp").get<double>();
  return c;
}

inline nlohmann::json keypoints_to_json(const std::vector<data::Keypoint2D>& kps) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& k : kps)
    arr.push_back({{"u", k.uv.x()}, {"v", k.uv.y()}, {"visible", k.visible}});
  return {{"detections", arr}};
}

inline std::vector<data::Keypoint2D> keypoints_from_json(const nlohmann::json& j) {
  std::vector<data::Keypoint2D> out;
  for (const auto& e : j.at("detections")) {
    data::Keypoint2D k;
    k.uv = Vec2(e.at("u").get<double>(), e.at("v").get<double>());
    k.visible = e.at("visible").get<bool>();
    out.push_back(k);
  }
  return out;
}

}  // namespace detail

/// Everything a fit or evaluation needs from disk; ground truth is optional.
struct Dataset {
  tmpl::SkinnedTemplate tpl;
  data::ObservationSet obs;
  bool has_gt = false;
  tmpl::ShapeParams gt_beta;
  std::vector<tmpl::PoseParams> gt_poses;
  tex::TextureField gt_psi;
  double gt_epsilon = 0;
  std::vector<int> gt_track_vertices;
  std::vector<std::vector<data::Keypoint2D>> gt_keypoints;
};

inline void save_dataset(const std::string& dir, const SyntheticScene& sc) {
  namespace fs = std::filesystem;
  using detail::frame_name;
  sc.obs.validate();
  const fs::path root(dir);
  for (const char* sub : {"", "cams", "rgb", "mask", "emb", "kp", "gt", "gt/kp"})
    fs::create_directories(root / sub);

  const int T = sc.obs.n_frames();
  nlohmann::json meta;
  meta["n_frames"] = T;
  meta["height"] = sc.obs.height();
  meta["width"] = sc.obs.width();
  meta["d_embed"] = sc.obs.d_embed();
  meta["n_keypoints"] = sc.obs.frames[0].keypoints.size();
  meta["epsilon"] = sc.epsilon;
  meta["split"] = sc.obs.is_test;
  std::vector<double> stamps;
  for (const auto& f : sc.obs.frames) stamps.push_back(f.camera.timestamp);
  meta["timestamps"] = stamps;
  meta["has_gt"] = true;
  detail::write_json(root / "scene.json", meta);

  tmpl::save_template((root / "template").string(), sc.tpl);

  for (int t = 0; t < T; ++t) {
    const auto& f = sc.obs.frames[static_cast<size_t>(t)];
    detail::write_json(root / "cams" / frame_name(t, ".json"), detail::camera_to_json(f.camera));
    io::save_png((root / "rgb" / frame_name(t, ".png")).string(), f.rgb);
    detail::write_image_f32(root / "rgb" / frame_name(t, ""), f.rgb);
    io::save_png((root / "mask" / frame_name(t, ".png")).string(), f.mask);
    detail::write_image_f32(root / "emb" / frame_name(t, ""), f.embedding);
    detail::write_json(root / "kp" / frame_name(t, ".json"),
                       detail::keypoints_to_json(f.keypoints));
    detail::write_json(root / "gt" / "kp" / frame_name(t, ".json"),
                       detail::keypoints_to_json(sc.gt_keypoints[static_cast<size_t>(t)]));
  }

  // ground truth: withheld from fitting, consumed only by evaluation
  nlohmann::json beta;
  beta["coeffs"] = std::vector<double>(sc.gt_beta.coeffs.data(),
                                       sc.gt_beta.coeffs.data() + sc.gt_beta.coeffs.size());
  beta["track_vertices"] = sc.track_vertices;
  detail::write_json(root / "gt" / "beta.json", beta);
  nlohmann::json poses = nlohmann::json::array();
  for (const auto& p : sc.gt_poses) {
    std::vector<double> rot(9);
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) rot[static_cast<size_t>(3 * r + k)] = p.root.R(r, k);
    poses.push_back(
        {{"root_R", rot},
         {"root_t", std::vector<double>{p.root.t[0], p.root.t[1], p.root.t[2]}},
         {"joint_angles", std::vector<double>(p.joint_angles.data(),
                                              p.joint_angles.data() + p.joint_angles.size())}});
  }
  detail::write_json(root / "gt" / "poses.json", poses);
  tex::save_field(sc.gt_psi, (root / "gt" / "psi").string());
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  using detail::frame_name;
  const fs::path root(dir);
  if (!fs::exists(root / "scene.json")) throw IoError("dataset: no scene.json in " + dir);
  const auto meta = detail::read_json(root / "scene.json");

  Dataset ds;
  ds.tpl = tmpl::load_template((root / "template").string());
  const int T = meta.at("n_frames").get<int>();
  ds.obs.is_test = meta.at("split").get<std::vector<uint8_t>>();
  for (int t = 0; t < T; ++t) {
    data::FrameObservation f;
    f.camera = detail::camera_from_json(detail::read_json(root / "cams" / frame_name(t, ".json")));
    f.rgb = detail::read_image_f32(root / "rgb" / frame_name(t, ""));
    f.mask = io::load_png((root / "mask" / frame_name(t, ".png")).string());
    f.embedding = detail::read_image_f32(root / "emb" / frame_name(t, ""));
    f.keypoints =
        detail::keypoints_from_json(detail::read_json(root / "kp" / frame_name(t, ".json")));
    ds.obs.frames.push_back(std::move(f));
  }
  ds.obs.validate();

  ds.has_gt = meta.value("has_gt", false) && fs::exists(root / "gt" / "beta.json");
  if (ds.has_gt) {
    ds.gt_epsilon = meta.at("epsilon").get<double>();
    const auto beta = detail::read_json(root / "gt" / "beta.json");
    const auto coeffs = beta.at("coeffs").get<std::vector<double>>();
    ds.gt_beta.coeffs = VecX::Zero(static_cast<int>(coeffs.size()));
    for (size_t i = 0; i < coeffs.size(); ++i) ds.gt_beta.coeffs[static_cast<int>(i)] = coeffs[i];
    ds.gt_track_vertices = beta.value("track_vertices", std::vector<int>{});
    for (const auto& pj : detail::read_json(root / "gt" / "poses.json")) {
      tmpl::PoseParams p;
      const auto rot = pj.at("root_R").get<std::vector<double>>();
      const auto t = pj.at("root_t").get<std::vector<double>>();
      for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 3; ++k) p.root.R(r, k) = rot[static_cast<size_t>(3 * r + k)];
      p.root.t = Vec3(t[0], t[1], t[2]);
      const auto ang = pj.at("joint_angles").get<std::vector<double>>();
      p.joint_angles = VecX::Zero(static_cast<int>(ang.size()));
      for (size_t i = 0; i < ang.size(); ++i) p.joint_angles[static_cast<int>(i)] = ang[i];
      ds.gt_poses.push_back(std::move(p));
    }
    ds.gt_psi = tex::load_field((root / "gt" / "psi").string());
    for (int t = 0; t < T; ++t)
      ds.gt_keypoints.push_back(detail::keypoints_from_json(
          detail::read_json(root / "gt" / "kp" / frame_name(t, ".json"))));
  }
  return ds;
}

}  // namespace quadfit::harness
