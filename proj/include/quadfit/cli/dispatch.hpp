#pragma once

#include "quadfit/cli/config.hpp"
#include "quadfit/fit/fit_scene.hpp"
#include "quadfit/harness/dataset.hpp"
#include "quadfit/harness/metrics.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

namespace quadfit::cli {

namespace detail {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

/// Effective config: explicit file, else the echo a previous command left in
/// the run directory, else defaults; command-line seed/threads win.
struct ConfigSource {
  std::string path;  // --config
  std::string run;   // --run fallback
  bool has_seed = false;
  uint64_t seed = 0;
  bool has_threads = false;
  int threads = 1;

  RunConfig resolve() const {
    RunConfig c;
    if (!path.empty()) {
      c = load_config(path);
    } else if (!run.empty() && fs::exists(fs::path(run) / "config.resolved.cfg")) {
      c = load_config((fs::path(run) / "config.resolved.cfg").string());
    }
    if (has_seed) c.seed = seed;
    if (has_threads) c.threads = threads;
    c.validate();
    return c;
  }
};

inline void echo_config(const RunConfig& c, const std::string& dir) {
  fs::create_directories(dir);
  write_text(fs::path(dir) / "config.resolved.cfg", resolved_config_text(c));
}

inline void cmd_synth(const RunConfig& c, const std::string& out_dir, std::ostream& out) {
  harness::SceneConfig scfg = c.scene;
  scfg.n_threads = c.threads;
  const auto sc = harness::generate_scene(scfg, c.seed);
  harness::save_dataset(out_dir, sc);
  echo_config(c, out_dir);
  out << "wrote " << sc.obs.n_frames() << " frames (" << scfg.size << "x" << scfg.size << ", "
      << sc.obs.train_indices().size() << " train / " << sc.obs.test_indices().size()
      << " test) to " << out_dir << "\n";
}

inline void cmd_init_pose(const RunConfig& c, const std::string& data, const std::string& out_dir,
                          std::ostream& out) {
  const auto ds = harness::load_dataset(data);
  poseinit::InitPoseConfig ic = c.fit.init;
  ic.seed = hash_combine(c.seed, 1);  // what a fit with this seed would use
  ic.n_threads = c.threads;
  const auto res = poseinit::init_root_poses(ds.obs, ds.tpl, ic);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "init_pose.json",
             poseinit::init_result_to_json(res).dump(2) + "\n");
  echo_config(c, out_dir);
  int used = 0;
  for (const auto& f : res.frames) used += f.used ? 1 : 0;
  out << "root initialized from " << used << "/" << res.frames.size() << " frames ("
      << res.collective.n_kept << " kept after pruning)\n"
      << "diagnostics in " << out_dir << "/init_pose.json\n";
}

inline void cmd_fit(const RunConfig& c, const std::string& data, const std::string& out_dir,
                    std::ostream& out) {
  const auto ds = harness::load_dataset(data);
  fit::FitConfig fc = c.fit;
  fc.seed = c.seed;
  fc.n_threads = c.threads;
  fc.out_dir = out_dir;
  echo_config(c, out_dir);  // before the long run so aborted fits keep it
  const auto [scene, report] = fit::fit_scene(ds.obs, ds.tpl, fc);
  out << "fit " << report.n_train << " train frames, " << fc.iterations << " iterations in "
      << report.wall_seconds << " s\n"
      << "objective " << report.initial_objective << " -> " << report.final_objective << "\n"
      << "checkpoint " << report.checkpoint_path << "\n";
}

inline double resolve_epsilon(const RunConfig& c, const tmpl::SkinnedTemplate& tpl) {
  return c.fit.epsilon < 0 ? 0.05 * poseinit::rest_scene_scale(tpl) : c.fit.epsilon;
}

inline void cmd_eval(const RunConfig& c, const std::string& data, const std::string& run,
                     const std::string& split, const std::string& out_arg, std::ostream& out) {
  const auto ds = harness::load_dataset(data);
  const auto scene = fit::load_scene_state((fs::path(run) / "final").string());
  harness::EvalConfig ec;
  ec.render.n_samples = c.eval_samples;
  ec.render.seed = c.seed;
  ec.n_threads = c.threads;
  ec.epsilon = resolve_epsilon(c, ds.tpl);
  ec.out_dir = out_arg.empty() ? (fs::path(run) / ("eval_" + split)).string() : out_arg;
  const auto rep = harness::evaluate(scene, ds.tpl, ds.obs,
                                     ds.has_gt ? ds.gt_keypoints
                                               : std::vector<std::vector<data::Keypoint2D>>{},
                                     split == "test", ec);
  out << "split " << split << ", " << rep.frames.size() << " frames\n"
      << "iou " << rep.iou << "  iou_w5 " << rep.iou_w5 << "\n"
      << "psnr " << rep.psnr << "  psnr_w5 " << rep.psnr_w5 << "\n"
      << "photo " << rep.photo << "\n"
      << "err_track " << rep.err_track << " (" << rep.n_skipped_track << " skipped)\n"
      << "report in " << ec.out_dir << "/metrics.json\n";
}

inline void cmd_render(const RunConfig& c, const std::string& data, const std::string& run,
                       const std::string& out_dir, int views, std::ostream& out) {
  if (views < 1) throw ConfigError("render: need at least one view");
  const auto ds = harness::load_dataset(data);
  const auto scene = fit::load_scene_state((fs::path(run) / "final").string());
  const auto shells = render::make_duplex_shells(ds.tpl, resolve_epsilon(c, ds.tpl));
  fs::create_directories(out_dir);

  // turntable around the origin reusing the capture intrinsics and distance
  const cam::Camera& ref = ds.obs.frames[0].camera;
  const Vec3 center0 = -(ref.extrinsics.R.transpose() * ref.extrinsics.t);
  const double radius = std::max(1e-6, std::hypot(center0.x(), center0.y()));
  char name[32];
  for (int k = 0; k < views; ++k) {
    const double angle = 2 * kPi * k / views;
    const double tau = views > 1 ? static_cast<double>(k) / (views - 1) : 0.0;
    const Vec3 center(radius * std::cos(angle), radius * std::sin(angle), center0.z());
    const Vec3 z = (-center).normalized();
    const Vec3 x = Vec3(0, 0, 1).cross(z).normalized();
    cam::Camera cam = ref;
    cam.extrinsics.R.row(0) = x.transpose();
    cam.extrinsics.R.row(1) = z.cross(x).transpose();
    cam.extrinsics.R.row(2) = z.transpose();
    cam.extrinsics.t = -(cam.extrinsics.R * center);
    cam.timestamp = tau;

    const auto theta = fit::eval_pose(scene.pose, tau);
    render::RenderConfig rcfg;
    rcfg.n_samples = c.eval_samples;
    rcfg.seed = hash_combine(c.seed, 9000 + static_cast<uint64_t>(k));
    const auto rgb = render::render_rgb(cam, ds.tpl, shells, scene.beta, theta, scene.psi, rcfg);
    geom::TriMesh posed;
    posed.vertices = tmpl::lbs_deform(ds.tpl, scene.beta, theta);
    posed.faces = ds.tpl.rest_mesh.faces;
    const auto sil = render::render_silhouette(cam, posed);
    std::snprintf(name, sizeof(name), "view_%04d.png", k);
    io::save_png((fs::path(out_dir) / name).string(), rgb.rgb);
    std::snprintf(name, sizeof(name), "view_mask_%04d.png", k);
    io::save_png((fs::path(out_dir) / name).string(), sil.mask);
  }
  echo_config(c, out_dir);
  out << "wrote " << views << " turntable views to " << out_dir << "\n";
}

/// Finite differences on the full objective over a tiny built-in scene;
/// exercises every loss, the deformation chain and the renderer.
inline bool cmd_check_grads(const RunConfig& c, double h, double tol, int probes,
                            std::ostream& out) {
  harness::SceneConfig scfg;
  scfg.n_frames = 2;
  scfg.size = 32;
  scfg.quadruped.subdivision = 1;
  scfg.render_samples = 4;
  scfg.gait_cycles = 0.5;
  scfg.gait_amplitude = 0.1;
  scfg.head_amplitude = 0.1;
  scfg.tail_amplitude = 0.1;
  scfg.n_threads = c.threads;
  const auto sc = harness::generate_scene(scfg, hash_combine(c.seed, 40));

  const double scale = poseinit::rest_scene_scale(sc.tpl);
  const auto shells = render::make_duplex_shells(sc.tpl, 0.05 * scale);
  Vec3 lo, hi;
  render::shell_bounds(shells, 0.05, &lo, &hi);

  // nudge every block off its init so all gradient paths are live
  Rng rng(hash_combine(c.seed, 41));
  fit::SceneState state;
  state.beta = tmpl::ShapeParams::zeros(sc.tpl.d_beta());
  for (int i = 0; i < state.beta.coeffs.size(); ++i) state.beta.coeffs[i] = 0.05 * rng.normal();
  state.pose = fit::TemporalPoseModel::make(2, 12, sc.tpl.d_pose(), cam::Rigid3::identity(), rng);
  VecX flat(state.pose.n_params());
  state.pose.mlp.to_flat(flat);
  for (int i = 0; i < flat.size(); ++i) flat[i] += 0.03 * rng.normal();
  state.pose.mlp.from_flat(flat);
  state.psi = tex::TextureField::make(8, 4, 8, 1, lo, hi, rng);

  std::vector<fit::FramePrep> preps;
  std::vector<int> frames;
  for (size_t f = 0; f < sc.obs.frames.size(); ++f) {
    preps.push_back(fit::prepare_frame(sc.obs.frames[f], sc.tpl, 3, 4096,
                                       hash_combine(c.seed, 1000 + f)));
    frames.push_back(static_cast<int>(f));
  }
  const auto neighbors = fit::vertex_neighbors(sc.tpl.rest_mesh);
  const auto edges = sc.tpl.rest_mesh.unique_edges();
  fit::ObjectiveConfig ocfg = c.fit.objective;
  ocfg.render.n_samples = 4;

  const auto obj = fit::make_objective(state, sc.tpl, shells, sc.obs, preps, c.fit.weights, ocfg,
                                       neighbors, edges, frames, c.threads);
  const auto at = fit::scene_to_params(state);
  const auto report = diff::finite_diff_check(obj, at, h, tol, probes, hash_combine(c.seed, 42));
  out << report.to_json().dump(2) << "\n";
  return report.pass;
}

}  // namespace detail

/// Entry point shared by the binary and the tests. Exit codes: 0 success,
/// 1 usage error, 2 runtime failure.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"articulated quadruped fitting"};
  app.require_subcommand(1);
  app.footer(describe_keys());

  std::string config_path, data_dir, run_dir, out_dir, split = "test";
  uint64_t seed = 0;
  int threads = 1, views = 12, probes = 12;
  double fd_h = 1e-5, fd_tol = 1e-4;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key = value config file");
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--threads", threads, "overrides the config thread cap");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth);
  synth->add_option("--out", out_dir, "dataset directory")->required();

  auto* init = app.add_subcommand("init-pose", "stage-1 root initialization diagnostics");
  add_common(init);
  init->add_option("--data", data_dir, "dataset directory")->required();
  init->add_option("--out", out_dir, "output directory")->required();

  auto* fitc = app.add_subcommand("fit", "fit shape, motion and texture to a dataset");
  add_common(fitc);
  fitc->add_option("--data", data_dir, "dataset directory")->required();
  fitc->add_option("--out", out_dir, "run directory for checkpoints and logs")->required();

  auto* render = app.add_subcommand("render", "turntable renders from a fitted checkpoint");
  add_common(render);
  render->add_option("--data", data_dir, "dataset directory")->required();
  render->add_option("--run", run_dir, "fit run directory")->required();
  render->add_option("--out", out_dir, "image output directory")->required();
  render->add_option("--views", views, "number of turntable views");

  auto* evalc = app.add_subcommand("eval", "metrics for a fitted checkpoint on a split");
  add_common(evalc);
  evalc->add_option("--data", data_dir, "dataset directory")->required();
  evalc->add_option("--run", run_dir, "fit run directory")->required();
  evalc->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  evalc->add_option("--out", out_dir, "report directory (default <run>/eval_<split>)");

  auto* grads = app.add_subcommand("check-grads", "finite-difference audit of the objective");
  add_common(grads);
  grads->add_option("--h", fd_h, "finite difference step");
  grads->add_option("--tol", fd_tol, "relative error tolerance");
  grads->add_option("--probes", probes, "probed coordinates per parameter block");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : 1;
  }

  try {
    detail::ConfigSource src;
    src.path = config_path;
    src.run = run_dir;
    CLI::App* active = app.get_subcommands().front();
    src.has_seed = active->count("--seed") > 0;
    src.seed = seed;
    src.has_threads = active->count("--threads") > 0;
    src.threads = threads;
    const RunConfig c = src.resolve();

    if (*synth) {
      detail::cmd_synth(c, out_dir, out);
    } else if (*init) {
      detail::cmd_init_pose(c, data_dir, out_dir, out);
    } else if (*fitc) {
      detail::cmd_fit(c, data_dir, out_dir, out);
    } else if (*render) {
      detail::cmd_render(c, data_dir, run_dir, out_dir, views, out);
    } else if (*evalc) {
      detail::cmd_eval(c, data_dir, run_dir, split, out_dir, out);
    } else if (*grads) {
      if (!detail::cmd_check_grads(c, fd_h, fd_tol, probes, out)) {
        err << "error: gradient check failed\n";
        return 2;
      }
    }
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace quadfit::cli
