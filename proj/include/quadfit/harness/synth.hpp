#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/parallel.hpp"
#include "quadfit/core/rng.hpp"
#include "quadfit/data/observations.hpp"
#include "quadfit/poseinit/init.hpp"
#include "quadfit/render/render.hpp"
#include "quadfit/tex/field.hpp"
#include "quadfit/tmpl/quadruped.hpp"
#include "quadfit/tmpl/skinned_template.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace quadfit::harness {

struct SceneConfig {
  int n_frames = 30;
  int size = 96;             // square frames
  double focal_scale = 0.8;  // fx = focal_scale * size
  tmpl::QuadrupedConfig quadruped;

  // camera orbit (the stand-in for structure-from-motion cameras)
  double orbit_radius = 4.2;
  double orbit_height = 1.3;
  double orbit_jitter = 0.01;  // positional noise, fraction of the radius
  double look_jitter = 0.02;   // target point noise, world units

  // ground-truth motion
  double beta_range = 0.25;     // |gt beta| bound when sampled
  double gait_amplitude = 0.25;  // leg swing, radians
  double gait_cycles = 2.0;
  double head_amplitude = 0.20;
  double tail_amplitude = 0.35;
  double root_bob = 0.02;        // vertical root wobble, units of scale
  double max_joint_delta = 0.25; // continuity bound, radians per frame

  // ground-truth texture field
  int tex_res = 24;
  int tex_channels = 8;
  int tex_width = 16;
  int tex_L_dir = 2;
  double epsilon_frac = 0.05;  // shell offset as a fraction of scene scale
  int render_samples = 16;

  // observation noise (the predictors being simulated are imperfect)
  double sigma_kp = 1.0;       // keypoint detection noise, pixels
  double embed_noise = 0.05;   // descriptor-space gaussian
  double outlier_frac = 0.05;  // embedding pixels swapped to a random vertex

  int train_block = 15;
  int test_block = 5;
  int n_threads = 1;

  void validate() const {
    if (n_frames < 2) throw ConfigError("scene: need at least 2 frames");
    if (size < 8) throw ConfigError("scene: image size too small");
    if (focal_scale <= 0) throw ConfigError("scene: focal scale must be > 0");
    if (orbit_radius <= 0) throw ConfigError("scene: orbit radius must be > 0");
    if (orbit_jitter < 0 || look_jitter < 0) throw ConfigError("scene: negative jitter");
    if (gait_amplitude < 0 || head_amplitude < 0 || tail_amplitude < 0)
      throw ConfigError("scene: negative motion amplitude");
    if (max_joint_delta <= 0) throw ConfigError("scene: max joint delta must be > 0");
    if (epsilon_frac <= 0) throw ConfigError("scene: epsilon fraction must be > 0");
    if (render_samples < 2) throw ConfigError("scene: need >= 2 ray samples");
    if (sigma_kp < 0 || embed_noise < 0) throw ConfigError("scene: negative noise");
    if (outlier_frac < 0 || outlier_frac > 1) throw ConfigError("scene: outlier fraction in [0,1]");
    if (train_block < 1 || test_block < 1) throw ConfigError("scene: block sizes must be >= 1");
    if (n_threads < 1) throw ConfigError("scene: n_threads must be >= 1");
  }
};

/// Ground truth withheld from fitting plus the noisy observations handed to
/// it. Tracking targets are surface vertices near the landmark joints, not
/// the joints themselves: an interior point cannot be tracked by any surface
/// vertex without a parallax floor.
struct SyntheticScene {
  tmpl::SkinnedTemplate tpl;
  tmpl::ShapeParams gt_beta;
  std::vector<tmpl::PoseParams> gt_poses;
  tex::TextureField gt_psi;
  double epsilon = 0;
  std::vector<int> track_vertices;                          // one per landmark
  std::vector<std::vector<data::Keypoint2D>> gt_keypoints;  // exact projections
  data::ObservationSet obs;
};

namespace detail {

inline int find_joint(const tmpl::SkinnedTemplate& tpl, const std::string& name) {
  for (int j = 0; j < tpl.n_joints(); ++j)
    if (tpl.skeleton.names[static_cast<size_t>(j)] == name) return j;
  throw IndexError("scene: template has no joint named " + name);
}

inline void set_axis_angle(VecX* angles, int joint, const Vec3& w) {
  angles->segment<3>(3 * (joint - 1)) = w;
}

/// Trot gait plus head and tail wander; root bobs vertically.
inline tmpl::PoseParams gait_pose(const tmpl::SkinnedTemplate& tpl, const SceneConfig& cfg,
                                  double tau) {
  tmpl::PoseParams p = tmpl::PoseParams::rest(tpl.n_joints());
  const double scale = cfg.quadruped.scale;
  p.root.t = Vec3(0, 0, cfg.root_bob * scale * std::sin(2 * kPi * cfg.gait_cycles * tau));

  const double g = 2 * kPi * cfg.gait_cycles * tau;
  const struct {
    const char* prefix;
    double phase;
  } legs[] = {{"fl", 0.0}, {"fr", kPi}, {"bl", kPi}, {"br", 0.0}};
  for (const auto& leg : legs) {
    const int hip = find_joint(tpl, std::string(leg.prefix) + "_hip");
    const int knee = find_joint(tpl, std::string(leg.prefix) + "_knee");
    set_axis_angle(&p.joint_angles, hip,
                   Vec3(0, cfg.gait_amplitude * std::sin(g + leg.phase), 0));
    set_axis_angle(&p.joint_angles, knee,
                   Vec3(0, 0.5 * cfg.gait_amplitude * std::sin(g + leg.phase + kPi / 2), 0));
  }
  const double h = 2 * kPi * tau;
  set_axis_angle(&p.joint_angles, find_joint(tpl, "neck"),
                 Vec3(0, 0, cfg.head_amplitude * std::sin(0.7 * h)));
  set_axis_angle(&p.joint_angles, find_joint(tpl, "head"),
                 Vec3(0, 0.5 * cfg.head_amplitude * std::sin(0.4 * h + 1.0), 0));
  set_axis_angle(&p.joint_angles, find_joint(tpl, "tail_base"),
                 Vec3(0, 0, cfg.tail_amplitude * std::sin(1.3 * h)));
  set_axis_angle(&p.joint_angles, find_joint(tpl, "tail_tip"),
                 Vec3(0, 0, 0.5 * cfg.tail_amplitude * std::sin(1.3 * h + 0.8)));
  return p;
}

}  // namespace detail

inline SyntheticScene generate_scene(const SceneConfig& cfg, uint64_t seed) {
  cfg.validate();
  SyntheticScene sc;
  tmpl::QuadrupedConfig qcfg = cfg.quadruped;
  qcfg.seed = hash_combine(seed, 10);
  sc.tpl = tmpl::build_synthetic_quadruped(qcfg);
  const double scale = poseinit::rest_scene_scale(sc.tpl);
  const int T = cfg.n_frames;

  Rng rng(hash_combine(seed, 11));
  sc.gt_beta = tmpl::ShapeParams::zeros(sc.tpl.d_beta());
  for (int i = 0; i < sc.gt_beta.coeffs.size(); ++i)
    sc.gt_beta.coeffs[i] = rng.uniform(-cfg.beta_range, cfg.beta_range);

  sc.gt_poses.reserve(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t)
    sc.gt_poses.push_back(detail::gait_pose(sc.tpl, cfg, static_cast<double>(t) / (T - 1)));
  for (int t = 0; t + 1 < T; ++t) {
    const double delta = (sc.gt_poses[static_cast<size_t>(t + 1)].joint_angles -
                          sc.gt_poses[static_cast<size_t>(t)].joint_angles)
                             .cwiseAbs()
                             .maxCoeff();
    if (delta > cfg.max_joint_delta)
      throw ConfigError("scene: motion violates the per-frame joint delta bound");
  }

  const MatX3 rest_joints = tmpl::regress_joints(sc.tpl, sc.tpl.rest_mesh.vertices);
  for (const int j : sc.tpl.keypoint_joints) {
    int best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int v = 0; v < sc.tpl.n_vertices(); ++v) {
      const double d2 = (sc.tpl.rest_mesh.vertex(v) - rest_joints.row(j).transpose()).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = v;
      }
    }
    sc.track_vertices.push_back(best);
  }

  sc.epsilon = cfg.epsilon_frac * scale;
  const auto shells = render::make_duplex_shells(sc.tpl, sc.epsilon);
  Vec3 lo, hi;
  render::shell_bounds(shells, 0.05, &lo, &hi);
  Rng tex_rng(hash_combine(seed, 12));
  sc.gt_psi = tex::TextureField::make(cfg.tex_res, cfg.tex_channels, cfg.tex_width,
                                      cfg.tex_L_dir, lo, hi, tex_rng);

  // cameras first (sequential: the orbit jitter consumes one rng stream)
  Rng cam_rng(hash_combine(seed, 13));
  std::vector<cam::Camera> cams(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    const double angle = 2 * kPi * t / T;
    Vec3 center(cfg.orbit_radius * std::cos(angle), cfg.orbit_radius * std::sin(angle),
                cfg.orbit_height);
    center += cfg.orbit_jitter * cfg.orbit_radius *
              Vec3(cam_rng.normal(), cam_rng.normal(), cam_rng.normal());
    const Vec3 target = cfg.look_jitter * scale *
                        Vec3(cam_rng.normal(), cam_rng.normal(), cam_rng.normal());
    const Vec3 z = (target - center).normalized();
    const Vec3 x = Vec3(0, 0, 1).cross(z).normalized();
    const Vec3 y = z.cross(x);
    cam::Camera& c = cams[static_cast<size_t>(t)];
    c.extrinsics.R.row(0) = x.transpose();
    c.extrinsics.R.row(1) = y.transpose();
    c.extrinsics.R.row(2) = z.transpose();
    c.extrinsics.t = -(c.extrinsics.R * center);
    c.fx = c.fy = cfg.focal_scale * cfg.size;
    c.cx = c.cy = cfg.size / 2.0;
    c.height = c.width = cfg.size;
    c.timestamp = static_cast<double>(t) / (T - 1);
  }

  sc.obs.frames.resize(static_cast<size_t>(T));
  sc.gt_keypoints.resize(static_cast<size_t>(T));
  parallel_chunks(
      static_cast<size_t>(T), static_cast<size_t>(T), cfg.n_threads,
      [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t t = begin; t < end; ++t) {
          const auto& theta = sc.gt_poses[t];
          data::FrameObservation& f = sc.obs.frames[t];
          f.camera = cams[t];

          geom::TriMesh posed;
          posed.vertices = tmpl::lbs_deform(sc.tpl, sc.gt_beta, theta);
          posed.faces = sc.tpl.rest_mesh.faces;
          f.mask = render::render_silhouette(f.camera, posed).mask;
          auto emb = render::render_embedding_map(f.camera, sc.tpl, posed);
          f.embedding = std::move(emb.descriptors);

          render::RenderConfig rcfg;
          rcfg.n_samples = cfg.render_samples;
          rcfg.seed = hash_combine(seed, 500 + t);
          f.rgb = render::render_rgb(f.camera, sc.tpl, shells, sc.gt_beta, theta, sc.gt_psi,
                                     rcfg)
                      .rgb;

          // predictor noise: additive descriptor noise plus outlier pixels
          // that report a random vertex, and jittered keypoint detections
          Rng nrng(hash_combine(seed, 2000 + t));
          const int de = f.embedding.channels, H = f.embedding.height, W = f.embedding.width;
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
              if (f.mask.at(0, y, x) < 0.5) continue;
              if (cfg.outlier_frac > 0 && nrng.uniform01() < cfg.outlier_frac) {
                const int v =
                    static_cast<int>(nrng.uniform_int(static_cast<uint64_t>(sc.tpl.n_vertices())));
                for (int c = 0; c < de; ++c) f.embedding.at(c, y, x) = sc.tpl.embedding_atlas(v, c);
              }
              if (cfg.embed_noise > 0)
                for (int c = 0; c < de; ++c)
                  f.embedding.at(c, y, x) += cfg.embed_noise * nrng.normal();
            }

          // detections fed to the fit regress joints; tracking targets for
          // evaluation follow designated surface vertices
          const MatX3 joints = tmpl::regress_joints(sc.tpl, posed.vertices);
          for (const int j : sc.tpl.keypoint_joints) {
            const auto proj = f.camera.project(joints.row(j).transpose());
            f.keypoints.push_back(
                {proj.uv + cfg.sigma_kp * Vec2(nrng.normal(), nrng.normal()), !proj.behind});
          }
          for (const int v : sc.track_vertices) {
            const auto proj = f.camera.project(posed.vertices.row(v).transpose());
            sc.gt_keypoints[t].push_back({proj.uv, !proj.behind});
          }
        }
      });

  sc.obs.is_test = data::make_block_split(T, cfg.train_block, cfg.test_block);
  sc.obs.validate();
  return sc;
}

}  // namespace quadfit::harness
