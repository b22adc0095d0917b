#pragma once

#include "quadfit/cam/camera.hpp"
#include "quadfit/data/observations.hpp"
#include "quadfit/render/render.hpp"
#include "quadfit/tmpl/skinned_template.hpp"

#include <cmath>

#include "test_util.hpp"

namespace testutil {

using namespace quadfit;

// Single-joint ellipsoid rig whose descriptors are the rest positions, so
// nearest-descriptor lookups coincide with nearest-vertex lookups.
inline tmpl::SkinnedTemplate make_ball_template(int subdivisions = 3) {
  tmpl::SkinnedTemplate t;
  t.rest_mesh = make_icosphere(1.0, subdivisions);
  t.rest_mesh.vertices.col(0) *= 1.4;
  t.rest_mesh.vertices.col(1) *= 0.8;
  const int nv = t.rest_mesh.n_vertices();
  t.skeleton.parents = {-1};
  t.skeleton.names = {"root"};
  t.skin_weights = MatX::Ones(nv, 1);
  t.joint_regressor = MatX::Constant(1, nv, 1.0 / nv);
  t.embedding_atlas = t.rest_mesh.vertices;
  t.keypoint_joints = {0};
  t.validate();
  return t;
}

inline cam::Camera look_at_camera(const Vec3& center, const Vec3& target, double fx, int size) {
  const Vec3 z = (target - center).normalized();
  const Vec3 x = Vec3(0, 1, 0).cross(z).normalized();
  const Vec3 y = z.cross(x);
  cam::Camera c;
  c.extrinsics.R.row(0) = x.transpose();
  c.extrinsics.R.row(1) = y.transpose();
  c.extrinsics.R.row(2) = z.transpose();
  c.extrinsics.t = -(c.extrinsics.R * center);
  c.fx = c.fy = fx;
  c.cx = c.cy = size / 2.0;
  c.height = c.width = size;
  return c;
}

// Orbit observations of the unposed template; embedding maps are rendered
// from the true geometry, masks match the embedding coverage exactly.
inline data::ObservationSet make_orbit_observations(const tmpl::SkinnedTemplate& tpl,
                                                    int n_frames, int size, double fx) {
  data::ObservationSet obs;
  for (int t = 0; t < n_frames; ++t) {
    const double angle = 2.0 * kPi * t / n_frames;
    const Vec3 center(4.0 * std::cos(angle), 0.9, 4.0 * std::sin(angle));
    data::FrameObservation f;
    f.camera = look_at_camera(center, Vec3::Zero(), fx, size);
    f.camera.timestamp = n_frames > 1 ? static_cast<double>(t) / (n_frames - 1) : 0.0;
    const auto emb = render::render_embedding_map(f.camera, tpl, tpl.rest_mesh);
    f.embedding = emb.descriptors;
    f.mask = emb.valid;
    f.rgb = Image(3, size, size);
    obs.frames.push_back(std::move(f));
  }
  obs.is_test = data::make_block_split(n_frames, 15, 5);
  return obs;
}

inline double mask_iou(const Image& a, const Image& b) {
  double inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] > 0.5, pb = b.data[i] > 0.5;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni > 0 ? inter / uni : 1.0;
}

}  // namespace testutil
