#pragma once

#include "quadfit/cam/rigid3.hpp"
#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"

#include <nlohmann/json.hpp>

namespace quadfit::cam {

struct PixelProjection {
  Vec2 uv = Vec2::Zero();
  double depth = 0.0;
  bool behind = false;  // z <= 0; uv meaningless, caller masks the term out
};

/// Pinhole camera, world->camera extrinsics, no distortion.
struct Camera {
  Rigid3 extrinsics;
  double fx = 1, fy = 1;
  double cx = 0, cy = 0;
  int height = 0, width = 0;
  double timestamp = 0.0;

  void require_valid() const {
    if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera: focal lengths must be > 0");
    if (height <= 0 || width <= 0) throw ConfigError("camera: empty image size");
    if (cx < 0 || cx >= width || cy < 0 || cy >= height)
      throw ConfigError("camera: principal point outside image");
    extrinsics.require_valid();
  }

  PixelProjection project(const Vec3& point_world) const {
    const Vec3 p = extrinsics.apply(point_world);
    PixelProjection out;
    out.depth = p.z();
    if (!(p.z() > 0)) {
      out.behind = true;
      return out;
    }
    out.uv = Vec2(fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy);
    return out;
  }

  /// World-space ray through continuous pixel coordinates (u, v).
  void unproject_ray(const Vec2& uv, Vec3* origin, Vec3* direction) const {
    const Vec3 d_cam((uv.x() - cx) / fx, (uv.y() - cy) / fy, 1.0);
    *origin = -(extrinsics.R.transpose() * extrinsics.t);  // camera center
    *direction = (extrinsics.R.transpose() * d_cam).normalized();
  }

  Vec3 center() const { return -(extrinsics.R.transpose() * extrinsics.t); }

  /// Render extrinsics for body root g0 in the factorized motion model:
  /// canonical -> camera is g_sfm ∘ g0.
  Camera with_root(const Rigid3& g0) const {
    Camera out = *this;
    out.extrinsics = extrinsics * g0;
    return out;
  }
};

inline nlohmann::json camera_to_json(const Camera& cam) {
  nlohmann::json j;
  std::array<double, 9> r{};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r[static_cast<size_t>(3 * i + k)] = cam.extrinsics.R(i, k);
  j["R"] = r;
  j["t"] = std::array<double, 3>{cam.extrinsics.t[0], cam.extrinsics.t[1], cam.extrinsics.t[2]};
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["H"] = cam.height;
  j["W"] = cam.width;
  j["timestamp"] = cam.timestamp;
  return j;
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera cam;
  const auto r = j.at("R").get<std::array<double, 9>>();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) cam.extrinsics.R(i, k) = r[static_cast<size_t>(3 * i + k)];
  const auto t = j.at("t").get<std::array<double, 3>>();
  cam.extrinsics.t = Vec3(t[0], t[1], t[2]);
  cam.fx = j.at("fx").get<double>();
  cam.fy = j.at("fy").get<double>();
  cam.cx = j.at("cx").get<double>();
  cam.cy = j.at("cy").get<double>();
  cam.height = j.at("H").get<int>();
  cam.width = j.at("W").get<int>();
  cam.timestamp = j.value("timestamp", 0.0);
  cam.require_valid();
  return cam;
}

}  // namespace quadfit::cam
