#pragma once

#include "quadfit/core/parallel.hpp"
#include "quadfit/core/rng.hpp"
#include "quadfit/data/observations.hpp"
#include "quadfit/poseinit/match.hpp"
#include "quadfit/poseinit/pnp.hpp"
#include "quadfit/tmpl/skinned_template.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace quadfit::poseinit {

/// Alignment metric between candidate root poses: rotation geodesic in
/// radians plus translation measured in scene-scale units, so one radian
/// weighs the same as one scene scale of translation.
inline double pose_alignment_distance(const cam::Rigid3& a, const cam::Rigid3& b,
                                      double scene_scale) {
  return rotation_geodesic(a.R, b.R) + (a.t - b.t).norm() / scene_scale;
}

struct CollectiveDiag {
  int n_candidates = 0;
  int n_kept = 0;               // candidates inside the trim window
  double max_rot_spread = 0.0;  // kept candidates vs medoid, radians
  double max_trans_spread = 0.0;
};

/// Reduces per-frame PnP poses to one canonical->world root: candidates
/// g_t = sfm_t^-1 * extrinsics_t, medoid under the alignment metric, then a
/// mean over candidates close to the medoid (chordal rotation mean projected
/// back to SO(3), arithmetic translation mean).
inline cam::Rigid3 collective_refine(const std::vector<std::optional<PnPResult>>& pnp_results,
                                     const std::vector<cam::Rigid3>& sfm_cams, double scene_scale,
                                     CollectiveDiag* diag = nullptr,
                                     double rot_window = 10.0 * kPi / 180.0,
                                     double trans_window_frac = 0.1) {
  if (pnp_results.size() != sfm_cams.size())
    throw DimensionMismatch("collective_refine: results vs cameras");
  if (!(scene_scale > 0)) throw ConfigError("collective_refine: scene scale must be > 0");

  std::vector<cam::Rigid3> candidates;
  for (size_t t = 0; t < pnp_results.size(); ++t)
    if (pnp_results[t])
      candidates.push_back(sfm_cams[t].inverse() * pnp_results[t]->extrinsics);
  if (candidates.empty()) throw NoValidFrames("collective_refine: no successful PnP frames");
  const int m = static_cast<int>(candidates.size());
  if (diag) *diag = CollectiveDiag{m, 0, 0.0, 0.0};
  if (m == 1) {
    if (diag) diag->n_kept = 1;
    return candidates[0];
  }

  int medoid = 0;
  double best_sum = std::numeric_limits<double>::infinity();
  for (int i = 0; i < m; ++i) {
    double sum = 0;
    for (int j = 0; j < m; ++j)
      sum += pose_alignment_distance(candidates[static_cast<size_t>(i)],
                                     candidates[static_cast<size_t>(j)], scene_scale);
    if (sum < best_sum) {
      best_sum = sum;
      medoid = i;
    }
  }

  const cam::Rigid3& center = candidates[static_cast<size_t>(medoid)];
  Mat3 rot_sum = Mat3::Zero();
  Vec3 t_mean = Vec3::Zero();
  int kept = 0;
  double rot_spread = 0, trans_spread = 0;
  for (const auto& c : candidates) {
    const double dr = rotation_geodesic(c.R, center.R);
    const double dt = (c.t - center.t).norm();
    if (dr > rot_window || dt > trans_window_frac * scene_scale) continue;
    rot_sum += c.R;
    t_mean += c.t;
    ++kept;
    rot_spread = std::max(rot_spread, dr);
    trans_spread = std::max(trans_spread, dt);
  }
  if (diag) {
    diag->n_kept = kept;
    diag->max_rot_spread = rot_spread;
    diag->max_trans_spread = trans_spread;
  }
  return {project_to_so3(rot_sum), t_mean / kept};
}

struct InitPoseConfig {
  int stride = 4;
  int ransac_iters = 200;
  double threshold_px = 3.0;
  double descriptor_keep_quantile = 0.9;
  double min_inlier_ratio = 0.1;  // frames below this do not vote
  uint64_t seed = 0;
  int n_threads = 1;

  void validate() const {
    if (stride < 1) throw ConfigError("pose init: stride must be >= 1");
    if (ransac_iters < 1) throw ConfigError("pose init: ransac_iters must be >= 1");
    if (!(threshold_px > 0)) throw ConfigError("pose init: threshold_px must be > 0");
    if (!(descriptor_keep_quantile > 0) || descriptor_keep_quantile > 1)
      throw ConfigError("pose init: descriptor_keep_quantile must be in (0, 1]");
    if (min_inlier_ratio < 0 || min_inlier_ratio > 1)
      throw ConfigError("pose init: min_inlier_ratio must be in [0, 1]");
    if (n_threads < 1) throw ConfigError("pose init: n_threads must be >= 1");
  }
};

struct FrameInitDiag {
  bool used = false;  // contributed a candidate to the collective reduction
  int n_correspondences = 0;
  double inlier_ratio = 0.0;
  double reprojection_rmse = 0.0;
  std::string failure;  // empty when used
};

struct InitPoseResult {
  cam::Rigid3 g_pnp;  // shared canonical -> world root
  std::vector<tmpl::PoseParams> poses;
  std::vector<FrameInitDiag> frames;
  CollectiveDiag collective;
  double scene_scale = 0.0;
};

/// Scene scale used throughout initialization: bounding-sphere radius of the
/// rest mesh around its centroid.
inline double rest_scene_scale(const tmpl::SkinnedTemplate& tpl) {
  const MatX3& v = tpl.rest_mesh.vertices;
  const Eigen::RowVector3d c = v.colwise().mean();
  return (v.rowwise() - c).rowwise().norm().maxCoeff();
}

/// Stage-one root initialization: dense matches -> per-frame PnP-RANSAC ->
/// collective reduction to one root; every frame starts from that root with
/// zero articulation.
inline InitPoseResult init_root_poses(const data::ObservationSet& obs,
                                      const tmpl::SkinnedTemplate& tpl,
                                      const InitPoseConfig& cfg = {}) {
  obs.validate();
  tpl.validate();
  cfg.validate();
  const int n = obs.n_frames();

  InitPoseResult out;
  out.scene_scale = rest_scene_scale(tpl);
  out.frames.assign(static_cast<size_t>(n), FrameInitDiag{});
  std::vector<std::optional<PnPResult>> results(static_cast<size_t>(n));

  parallel_chunks(static_cast<size_t>(n), static_cast<size_t>(n), cfg.n_threads,
                  [&](std::size_t, std::size_t begin, std::size_t end) {
                    for (std::size_t t = begin; t < end; ++t) {
                      const auto& frame = obs.frames[t];
                      auto& diag = out.frames[t];
                      try {
                        auto corrs = match_dense(frame.embedding, frame.mask, tpl, cfg.stride);
                        corrs = filter_by_descriptor_distance(corrs, cfg.descriptor_keep_quantile);
                        diag.n_correspondences = static_cast<int>(corrs.size());
                        const auto res = pnp_ransac(
                            corrs, Intrinsics::of(frame.camera), tpl.rest_mesh.vertices,
                            cfg.ransac_iters, cfg.threshold_px, hash_combine(cfg.seed, t));
                        diag.inlier_ratio = res.inlier_ratio;
                        diag.reprojection_rmse = res.reprojection_rmse;
                        if (res.inlier_ratio < cfg.min_inlier_ratio) {
                          diag.failure = "inlier ratio below threshold";
                        } else {
                          results[t] = res;
                          diag.used = true;
                        }
                      } catch (const Error& e) {
                        diag.failure = e.what();
                      }
                    }
                  });

  std::vector<cam::Rigid3> sfm(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) sfm[static_cast<size_t>(t)] = obs.frames[static_cast<size_t>(t)].camera.extrinsics;
  out.g_pnp = collective_refine(results, sfm, out.scene_scale, &out.collective);

  out.poses.reserve(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) {
    auto p = tmpl::PoseParams::rest(tpl.n_joints());
    p.root = out.g_pnp;
    out.poses.push_back(std::move(p));
  }
  return out;
}

inline nlohmann::json init_result_to_json(const InitPoseResult& r) {
  nlohmann::json j;
  std::array<double, 9> rot{};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) rot[static_cast<size_t>(3 * i + k)] = r.g_pnp.R(i, k);
  j["g_pnp"]["R"] = rot;
  j["g_pnp"]["t"] = std::array<double, 3>{r.g_pnp.t[0], r.g_pnp.t[1], r.g_pnp.t[2]};
  j["scene_scale"] = r.scene_scale;
  j["collective"] = {{"n_candidates", r.collective.n_candidates},
                     {"n_kept", r.collective.n_kept},
                     {"max_rot_spread", r.collective.max_rot_spread},
                     {"max_trans_spread", r.collective.max_trans_spread}};
  j["frames"] = nlohmann::json::array();
  for (const auto& f : r.frames)
    j["frames"].push_back({{"used", f.used},
                           {"n_correspondences", f.n_correspondences},
                           {"inlier_ratio", f.inlier_ratio},
                           {"reprojection_rmse", f.reprojection_rmse},
                           {"failure", f.failure}});
  return j;
}

}  // namespace quadfit::poseinit
