#include "quadfit/poseinit/init.hpp"
#include "quadfit/poseinit/match.hpp"
#include "quadfit/poseinit/pnp.hpp"
#include "quadfit/render/render.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>
#include <tuple>
#include <vector>

#include "test_scene_util.hpp"
#include "test_util.hpp"

using namespace quadfit;
using testutil::look_at_camera;
using testutil::make_ball_template;
using testutil::make_orbit_observations;
using testutil::mask_iou;

namespace {

Image mask_from_valid(const Image& valid) { return valid; }

using CorrKey = std::tuple<int, double, double>;

std::multiset<CorrKey> inlier_keys(const std::vector<poseinit::Correspondence2D3D>& corrs,
                                   const std::vector<int>& inliers) {
  std::multiset<CorrKey> keys;
  for (int i : inliers)
    keys.insert({corrs[static_cast<size_t>(i)].vertex_index,
                 corrs[static_cast<size_t>(i)].pixel.x(), corrs[static_cast<size_t>(i)].pixel.y()});
  return keys;
}

}  // namespace

TEST_CASE("dense matching lands near the true surface point") {
  const auto tpl = make_ball_template();
  const auto cam = look_at_camera(Vec3(2.6, 1.2, 2.4), Vec3::Zero(), 60, 96);
  const auto emb = render::render_embedding_map(cam, tpl, tpl.rest_mesh);
  const Image mask = mask_from_valid(emb.valid);

  const auto corrs = poseinit::match_dense(emb.descriptors, mask, tpl, 4);
  REQUIRE(corrs.size() > 50);

  double mean_edge = 0;
  const auto edges = tpl.rest_mesh.unique_edges();
  for (const auto& [i, j] : edges)
    mean_edge += (tpl.rest_mesh.vertices.row(i) - tpl.rest_mesh.vertices.row(j)).norm();
  mean_edge /= static_cast<double>(edges.size());

  int good = 0;
  for (const auto& c : corrs) {
    const int x = static_cast<int>(c.pixel.x());
    const int y = static_cast<int>(c.pixel.y());
    REQUIRE(mask.at(0, y, x) > 0.5);
    REQUIRE(c.descriptor_distance >= 0.0);
    const auto& hit = emb.hits[static_cast<size_t>(y) * mask.width + x];
    REQUIRE(hit.face_index >= 0);
    Vec3 surface = Vec3::Zero();
    for (int k = 0; k < 3; ++k)
      surface += hit.barycentric[k] *
                 tpl.rest_mesh.vertices.row(tpl.rest_mesh.faces(hit.face_index, k)).transpose();
    const double d = (tpl.rest_mesh.vertices.row(c.vertex_index).transpose() - surface).norm();
    if (d <= 2.0 * mean_edge) ++good;
  }
  REQUIRE(static_cast<double>(good) >= 0.99 * static_cast<double>(corrs.size()));
}

TEST_CASE("dense matching edge cases") {
  const auto tpl = make_ball_template();

  SECTION("empty mask") {
    Image map(3, 8, 8), mask(1, 8, 8);
    REQUIRE_THROWS_AS(poseinit::match_dense(map, mask, tpl, 2), EmptyMask);
  }
  SECTION("stride larger than the image visits one pixel") {
    Image map(3, 8, 8), mask(1, 8, 8, 1.0);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 64; ++i) map.data[static_cast<size_t>(c) * 64 + i] = tpl.embedding_atlas(0, c);
    const auto corrs = poseinit::match_dense(map, mask, tpl, 100);
    REQUIRE(corrs.size() == 1);
    REQUIRE(corrs[0].vertex_index == 0);
    REQUIRE(corrs[0].pixel == Vec2(0.5, 0.5));
  }
  SECTION("shape checks") {
    Image map(3, 8, 8), mask(1, 8, 7, 1.0);
    REQUIRE_THROWS_AS(poseinit::match_dense(map, mask, tpl, 2), ResolutionMismatch);
    Image map2(2, 8, 8), mask2(1, 8, 8, 1.0);
    REQUIRE_THROWS_AS(poseinit::match_dense(map2, mask2, tpl, 2), DimensionMismatch);
    REQUIRE_THROWS_AS(poseinit::match_dense(map, mask2, tpl, 0), ConfigError);
  }
}

TEST_CASE("descriptor distance filter keeps the requested quantile") {
  std::vector<poseinit::Correspondence2D3D> corrs;
  for (int i = 0; i < 10; ++i)
    corrs.push_back({Vec2(i, 0), i, static_cast<double>(9 - i)});
  const auto kept = poseinit::filter_by_descriptor_distance(corrs, 0.9);
  REQUIRE(kept.size() == 9);
  for (size_t i = 0; i + 1 < kept.size(); ++i)  // order preserved
    REQUIRE(kept[i].vertex_index < kept[i + 1].vertex_index);
  for (const auto& c : kept) REQUIRE(c.descriptor_distance <= 8.0);
  REQUIRE(poseinit::filter_by_descriptor_distance({}, 0.9).empty());
  REQUIRE_THROWS_AS(poseinit::filter_by_descriptor_distance(corrs, 0.0), ConfigError);
}

TEST_CASE("pnp recovers an exact camera") {
  const auto tpl = make_ball_template();
  Rng rng(41);
  cam::Rigid3 truth;
  truth.R = testutil::random_rotation(rng);
  truth.t = Vec3(0.1, -0.2, 3.5);
  const poseinit::Intrinsics K{100, 95, 48, 48};

  std::vector<poseinit::Correspondence2D3D> corrs;
  for (int i = 0; i < 200; ++i) {
    const int v = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(tpl.n_vertices())));
    const Vec3 p = truth.apply(tpl.rest_mesh.vertices.row(v).transpose());
    corrs.push_back({K.project(p), v, 0.0});
  }
  const auto res = poseinit::pnp_ransac(corrs, K, tpl.rest_mesh.vertices, 200, 3.0, 1);
  REQUIRE(rotation_geodesic(res.extrinsics.R, truth.R) < 1e-4);
  REQUIRE((res.extrinsics.t - truth.t).norm() < 1e-4);
  REQUIRE(res.inlier_ratio > 0.999);
  REQUIRE(res.reprojection_rmse < 1e-6);
  REQUIRE(res.extrinsics.is_valid());
}

TEST_CASE("pnp tolerates outliers and pixel noise") {
  const auto tpl = make_ball_template();
  const poseinit::Intrinsics K{100, 100, 48, 48};
  int successes = 0;
  double ratio_sum = 0;
  const int n_trials = 20;
  for (int trial = 0; trial < n_trials; ++trial) {
    Rng rng(300 + static_cast<uint64_t>(trial));
    cam::Rigid3 truth;
    truth.R = testutil::random_rotation(rng);
    truth.t = Vec3(0.2 * rng.normal(), 0.2 * rng.normal(), 3.5);

    std::vector<poseinit::Correspondence2D3D> corrs;
    for (int i = 0; i < 140; ++i) {
      const int v = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(tpl.n_vertices())));
      const Vec3 p = truth.apply(tpl.rest_mesh.vertices.row(v).transpose());
      const Vec2 uv = K.project(p) + Vec2(rng.normal(), rng.normal());
      corrs.push_back({uv, v, 0.0});
    }
    for (int i = 0; i < 60; ++i) {  // 30% gross outliers
      const int v = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(tpl.n_vertices())));
      corrs.push_back({Vec2(rng.uniform(0, 96), rng.uniform(0, 96)), v, 0.0});
    }
    const auto res = poseinit::pnp_ransac(corrs, K, tpl.rest_mesh.vertices, 200, 3.0,
                                          static_cast<uint64_t>(trial));
    ratio_sum += res.inlier_ratio;
    if (rotation_geodesic(res.extrinsics.R, truth.R) < 2.0 * kPi / 180.0) ++successes;
  }
  REQUIRE(successes >= 19);
  const double mean_ratio = ratio_sum / n_trials;
  REQUIRE(mean_ratio > 0.6);
  REQUIRE(mean_ratio < 0.8);
}

TEST_CASE("pnp result does not depend on correspondence order") {
  const auto tpl = make_ball_template();
  const poseinit::Intrinsics K{100, 100, 48, 48};
  Rng rng(77);
  cam::Rigid3 truth;
  truth.R = testutil::random_rotation(rng);
  truth.t = Vec3(0.1, 0.0, 4.0);
  std::vector<poseinit::Correspondence2D3D> corrs;
  for (int i = 0; i < 120; ++i) {
    const int v = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(tpl.n_vertices())));
    const Vec3 p = truth.apply(tpl.rest_mesh.vertices.row(v).transpose());
    corrs.push_back({K.project(p) + Vec2(rng.normal(), rng.normal()), v, 0.0});
  }
  for (int i = 0; i < 40; ++i)
    corrs.push_back({Vec2(rng.uniform(0, 96), rng.uniform(0, 96)),
                     static_cast<int>(rng.uniform_int(static_cast<uint64_t>(tpl.n_vertices()))),
                     0.0});

  auto shuffled = corrs;
  for (size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[rng.uniform_int(i)]);

  const auto a = poseinit::pnp_ransac(corrs, K, tpl.rest_mesh.vertices, 150, 3.0, 9);
  const auto b = poseinit::pnp_ransac(shuffled, K, tpl.rest_mesh.vertices, 150, 3.0, 9);
  REQUIRE((a.extrinsics.R - b.extrinsics.R).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a.extrinsics.t - b.extrinsics.t).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(a.inliers.size() == b.inliers.size());
  REQUIRE(inlier_keys(corrs, a.inliers) == inlier_keys(shuffled, b.inliers));
}

TEST_CASE("pnp failure modes") {
  const auto tpl = make_ball_template();
  const poseinit::Intrinsics K{100, 100, 48, 48};

  SECTION("too few correspondences") {
    std::vector<poseinit::Correspondence2D3D> corrs(5, {Vec2(1, 1), 0, 0.0});
    for (int i = 0; i < 5; ++i) corrs[static_cast<size_t>(i)].vertex_index = i;
    REQUIRE_THROWS_AS(poseinit::pnp_ransac(corrs, K, tpl.rest_mesh.vertices, 10, 3.0, 0),
                      TooFewPoints);
  }
  SECTION("coplanar points never yield a model") {
    MatX3 flat(40, 3);
    Rng rng(5);
    for (int i = 0; i < 40; ++i)
      flat.row(i) << rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0;
    cam::Rigid3 pose;
    pose.t = Vec3(0, 0, 4);
    std::vector<poseinit::Correspondence2D3D> corrs;
    for (int i = 0; i < 40; ++i)
      corrs.push_back({K.project(pose.apply(flat.row(i).transpose())), i, 0.0});
    REQUIRE_THROWS_AS(poseinit::pnp_ransac(corrs, K, flat, 50, 3.0, 0),
                      DegenerateConfiguration);
  }
  SECTION("vertex index out of range") {
    std::vector<poseinit::Correspondence2D3D> corrs(8, {Vec2(1, 1), 9999, 0.0});
    REQUIRE_THROWS_AS(poseinit::pnp_ransac(corrs, K, tpl.rest_mesh.vertices, 10, 3.0, 0),
                      IndexError);
  }
}

TEST_CASE("collective refinement recovers a shared root") {
  Rng rng(123);

  SECTION("identical candidates reproduce the root") {
    const cam::Rigid3 g = testutil::random_rigid(rng);
    std::vector<std::optional<poseinit::PnPResult>> results;
    std::vector<cam::Rigid3> sfm;
    for (int t = 0; t < 8; ++t) {
      const cam::Rigid3 cam_t = testutil::random_rigid(rng, 2.0);
      poseinit::PnPResult r;
      r.extrinsics = cam_t * g;
      results.push_back(r);
      sfm.push_back(cam_t);
    }
    const auto out = poseinit::collective_refine(results, sfm, 1.0);
    REQUIRE((out.R - g.R).cwiseAbs().maxCoeff() < 1e-9);
    REQUIRE((out.t - g.t).norm() < 1e-12);
  }

  SECTION("noisy candidates with gross outliers") {
    const cam::Rigid3 g = testutil::random_rigid(rng);
    std::vector<std::optional<poseinit::PnPResult>> results;
    std::vector<cam::Rigid3> sfm;
    std::vector<cam::Rigid3> candidates;
    const int n_good = 16;
    for (int t = 0; t < 20; ++t) {
      cam::Rigid3 cand;
      if (t < n_good) {
        const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
        cand.R = rodrigues(axis * rng.normal() * kPi / 180.0) * g.R;
        cand.t = g.t + 0.01 * Vec3(rng.normal(), rng.normal(), rng.normal());
      } else {
        cand = testutil::random_rigid(rng, 3.0);
      }
      candidates.push_back(cand);
      const cam::Rigid3 cam_t = testutil::random_rigid(rng, 2.0);
      poseinit::PnPResult r;
      r.extrinsics = cam_t * cand;
      results.push_back(r);
      sfm.push_back(cam_t);
    }
    poseinit::CollectiveDiag diag;
    const auto out = poseinit::collective_refine(results, sfm, 1.0, &diag);
    REQUIRE(rotation_geodesic(out.R, g.R) < kPi / 180.0);
    REQUIRE((out.t - g.t).norm() < 0.02);
    REQUIRE(diag.n_candidates == 20);
    REQUIRE(diag.n_kept == n_good);

    // composing the result back into the SfM cameras stays within the
    // measured candidate spread of each per-frame PnP pose
    for (int t = 0; t < n_good; ++t) {
      const cam::Rigid3 pred = sfm[static_cast<size_t>(t)] * out;
      const double dr = rotation_geodesic(pred.R, results[static_cast<size_t>(t)]->extrinsics.R);
      const double dt = (pred.t - results[static_cast<size_t>(t)]->extrinsics.t).norm();
      REQUIRE(dr <= 2.0 * diag.max_rot_spread + 1e-9);
      REQUIRE(dt <= 2.0 * diag.max_trans_spread + 1e-9);
    }
  }

  SECTION("single frame returns its candidate") {
    const cam::Rigid3 g = testutil::random_rigid(rng);
    const cam::Rigid3 cam_t = testutil::random_rigid(rng);
    poseinit::PnPResult r;
    r.extrinsics = cam_t * g;
    std::vector<std::optional<poseinit::PnPResult>> results = {std::nullopt, r, std::nullopt};
    std::vector<cam::Rigid3> sfm = {cam::Rigid3{}, cam_t, cam::Rigid3{}};
    const auto out = poseinit::collective_refine(results, sfm, 1.0);
    REQUIRE((out.R - g.R).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE((out.t - g.t).norm() < 1e-12);
  }

  SECTION("failure modes") {
    std::vector<std::optional<poseinit::PnPResult>> empty(4);
    std::vector<cam::Rigid3> sfm(4);
    REQUIRE_THROWS_AS(poseinit::collective_refine(empty, sfm, 1.0), NoValidFrames);
    std::vector<cam::Rigid3> wrong(3);
    REQUIRE_THROWS_AS(poseinit::collective_refine(empty, wrong, 1.0), DimensionMismatch);
    poseinit::PnPResult r;
    empty[0] = r;
    REQUIRE_THROWS_AS(poseinit::collective_refine(empty, sfm, 0.0), ConfigError);
  }
}

TEST_CASE("root initialization on an orbit sequence") {
  const auto tpl = make_ball_template();
  const int n_frames = 8, size = 96;
  const auto obs = make_orbit_observations(tpl, n_frames, size, 75);

  poseinit::InitPoseConfig cfg;
  cfg.seed = 11;
  cfg.n_threads = 2;
  cfg.stride = 2;
  const auto result = poseinit::init_root_poses(obs, tpl, cfg);

  REQUIRE(rotation_geodesic(result.g_pnp.R, Mat3::Identity()) < kPi / 180.0);
  REQUIRE(result.g_pnp.t.norm() < 0.02 * result.scene_scale);
  REQUIRE(result.poses.size() == static_cast<size_t>(n_frames));
  for (const auto& p : result.poses) {
    REQUIRE(p.joint_angles.size() == tpl.d_pose());
    REQUIRE((p.root.R - result.g_pnp.R).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((p.root.t - result.g_pnp.t).cwiseAbs().maxCoeff() == 0.0);
  }

  int used = 0, iou_ok = 0;
  for (int t = 0; t < n_frames; ++t) {
    const auto& diag = result.frames[static_cast<size_t>(t)];
    if (diag.used) {
      ++used;
      REQUIRE(diag.n_correspondences >= 40);
      REQUIRE(diag.inlier_ratio > 0.7);
    }
    const auto sil = render::render_silhouette(
        obs.frames[static_cast<size_t>(t)].camera.with_root(result.poses[static_cast<size_t>(t)].root),
        tpl.rest_mesh);
    if (mask_iou(sil.mask, obs.frames[static_cast<size_t>(t)].mask) > 0.5) ++iou_ok;
  }
  REQUIRE(used == n_frames);
  REQUIRE(iou_ok >= static_cast<int>(std::ceil(0.9 * n_frames)));

  const auto j = poseinit::init_result_to_json(result);
  REQUIRE(j["frames"].size() == static_cast<size_t>(n_frames));
  REQUIRE(j["frames"][0]["used"].get<bool>());
  REQUIRE(j.contains("g_pnp"));
  REQUIRE(j["collective"]["n_kept"].get<int>() >= 1);
}

TEST_CASE("root initialization flags garbage embeddings") {
  const auto tpl = make_ball_template();
  auto obs = make_orbit_observations(tpl, 4, 96, 60);
  Rng rng(9);
  for (auto& f : obs.frames)
    for (auto& v : f.embedding.data) v = rng.normal();

  poseinit::InitPoseConfig cfg;
  cfg.ransac_iters = 100;
  REQUIRE_THROWS_AS(poseinit::init_root_poses(obs, tpl, cfg), NoValidFrames);
}

TEST_CASE("observation sets validate their shapes") {
  const auto tpl = make_ball_template();
  auto obs = make_orbit_observations(tpl, 2, 32, 20);
  REQUIRE_NOTHROW(obs.validate());

  SECTION("split covers exactly the flagged frames") {
    obs.is_test = {0, 1};
    REQUIRE(obs.train_indices() == std::vector<int>{0});
    REQUIRE(obs.test_indices() == std::vector<int>{1});
  }
  SECTION("resolution mismatch") {
    obs.frames[1].mask = Image(1, 32, 31);
    REQUIRE_THROWS_AS(obs.validate(), ResolutionMismatch);
  }
  SECTION("split size mismatch") {
    obs.is_test = {0};
    REQUIRE_THROWS_AS(obs.validate(), DimensionMismatch);
  }
  SECTION("embedding channel mismatch") {
    obs.frames[1].embedding = Image(5, 32, 32);
    REQUIRE_THROWS_AS(obs.validate(), DimensionMismatch);
  }
  SECTION("block split pattern") {
    const auto flags = data::make_block_split(40, 15, 5);
    int n_test = 0;
    for (int i = 0; i < 40; ++i) {
      REQUIRE((flags[static_cast<size_t>(i)] != 0) == ((i / 5) % 4 == 3));
      n_test += flags[static_cast<size_t>(i)];
    }
    REQUIRE(n_test == 10);
    REQUIRE_THROWS_AS(data::make_block_split(10, 0, 5), ConfigError);
  }
}
