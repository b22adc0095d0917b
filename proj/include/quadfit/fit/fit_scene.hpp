#pragma once

#include "quadfit/fit/adam.hpp"
#include "quadfit/fit/objective.hpp"
#include "quadfit/io/blob.hpp"
#include "quadfit/poseinit/init.hpp"
#include "quadfit/render/duplex.hpp"
#include "quadfit/tex/serialize.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace quadfit::fit {

struct FitConfig {
  int iterations = 2000;
  int minibatch = 4;
  double warmup_frac = 0.2;  // photo term off for this leading fraction
  double lr_pose = 1e-3;
  double lr_beta = 1e-3;
  double lr_psi = 5e-3;
  LossWeights weights;
  ObjectiveConfig objective;
  double epsilon = -1.0;  // shell offset; negative = 0.05 x template radius
  int field_res = 48;
  int field_channels = 8;
  int field_width = 32;
  int field_L_dir = 2;
  int pose_L = 4;
  int pose_width = 64;
  int match_stride = 4;
  int chamfer_max_points = 4096;
  poseinit::InitPoseConfig init;  // seed/threads overridden from this config
  uint64_t seed = 0;
  int n_threads = 1;
  int checkpoint_every = 500;
  int divergence_check_every = 100;
  double divergence_factor = 10.0;
  std::string out_dir;  // empty disables checkpoints

  void validate() const {
    if (iterations < 0) throw ConfigError("fit: negative iteration count");
    if (minibatch < 1) throw ConfigError("fit: minibatch must be >= 1");
    if (warmup_frac < 0 || warmup_frac > 1) throw ConfigError("fit: warmup fraction in [0,1]");
    if (lr_pose <= 0 || lr_beta <= 0 || lr_psi <= 0) throw ConfigError("fit: learning rates must be > 0");
    if (field_res < 2 || field_channels < 1 || field_width < 1 || field_L_dir < 0)
      throw ConfigError("fit: field layout");
    if (pose_L < 1 || pose_width < 1) throw ConfigError("fit: pose model layout");
    if (match_stride < 1) throw ConfigError("fit: match stride must be >= 1");
    if (chamfer_max_points < 1) throw ConfigError("fit: chamfer point budget");
    if (checkpoint_every < 1 || divergence_check_every < 1)
      throw ConfigError("fit: intervals must be >= 1");
    if (divergence_factor <= 1) throw ConfigError("fit: divergence factor must be > 1");
    weights.validate();
    objective.validate();
  }
};

struct IterationLog {
  int iter = 0;
  FrameLosses batch;       // raw values summed over the minibatch
  double weighted = 0.0;   // phase-weighted objective of the minibatch
  bool photo_on = false;
};

struct FitReport {
  std::vector<IterationLog> curve;
  double initial_objective = 0.0;  // full train sum, full weights
  double final_objective = 0.0;
  double wall_seconds = 0.0;
  int n_train = 0;
  std::string checkpoint_path;
  nlohmann::json stage1;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["initial_objective"] = initial_objective;
    j["final_objective"] = final_objective;
    j["wall_seconds"] = wall_seconds;
    j["n_train"] = n_train;
    j["checkpoint_path"] = checkpoint_path;
    j["stage1"] = stage1;
    j["iterations"] = nlohmann::json::array();
    for (const auto& it : curve)
      j["iterations"].push_back({{"iter", it.iter},
                                 {"embed", it.batch.embed},
                                 {"keypoint", it.batch.keypoint},
                                 {"photo", it.batch.photo},
                                 {"mask", it.batch.mask},
                                 {"arap", it.batch.arap},
                                 {"edge", it.batch.edge},
                                 {"weighted", it.weighted},
                                 {"photo_on", it.photo_on}});
    return j;
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "iter,embed,keypoint,photo,mask,arap,edge,weighted,photo_on\n";
    for (const auto& it : curve)
      out << it.iter << ',' << it.batch.embed << ',' << it.batch.keypoint << ','
          << it.batch.photo << ',' << it.batch.mask << ',' << it.batch.arap << ','
          << it.batch.edge << ',' << it.weighted << ',' << (it.photo_on ? 1 : 0) << '\n';
  }
};

/// Writes `stem.json` plus `stem_pose.f64` and the `stem_psi.*` field pair.
inline void save_scene_state(const SceneState& s, const std::string& stem) {
  nlohmann::json j;
  j["beta"] = std::vector<double>(s.beta.coeffs.data(), s.beta.coeffs.data() + s.beta.coeffs.size());
  j["bone_log_scales"] = std::vector<double>(
      s.beta.bone_log_scales.data(), s.beta.bone_log_scales.data() + s.beta.bone_log_scales.size());
  std::array<double, 9> rot{};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) rot[static_cast<size_t>(3 * i + k)] = s.pose.base.R(i, k);
  j["pose"] = {{"L_t", s.pose.L_t},
               {"width", static_cast<int>(s.pose.mlp.W[0].rows())},
               {"d_joints", s.pose.d_joints},
               {"n_params", s.pose.n_params()},
               {"base_R", rot},
               {"base_t", std::array<double, 3>{s.pose.base.t[0], s.pose.base.t[1], s.pose.base.t[2]}}};
  std::ofstream out(stem + ".json");
  if (!out) throw IoError("cannot write " + stem + ".json");
  out << j.dump(2) << "\n";
  VecX flat(s.pose.n_params());
  s.pose.mlp.to_flat(flat);
  io::write_matrix_f64(stem + "_pose.f64", flat.transpose());
  tex::save_field(s.psi, stem + "_psi");
}

inline SceneState load_scene_state(const std::string& stem) {
  std::ifstream in(stem + ".json");
  if (!in) throw IoError("cannot open " + stem + ".json");
  nlohmann::json j;
  in >> j;
  SceneState s;
  const auto beta = j.at("beta").get<std::vector<double>>();
  s.beta.coeffs = VecX::Zero(static_cast<int>(beta.size()));
  for (size_t i = 0; i < beta.size(); ++i) s.beta.coeffs[static_cast<int>(i)] = beta[i];
  const auto scales = j.at("bone_log_scales").get<std::vector<double>>();
  s.beta.bone_log_scales = VecX::Zero(static_cast<int>(scales.size()));
  for (size_t i = 0; i < scales.size(); ++i) s.beta.bone_log_scales[static_cast<int>(i)] = scales[i];
  const auto& jp = j.at("pose");
  cam::Rigid3 base;
  const auto rot = jp.at("base_R").get<std::array<double, 9>>();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) base.R(i, k) = rot[static_cast<size_t>(3 * i + k)];
  const auto t = jp.at("base_t").get<std::array<double, 3>>();
  base.t = Vec3(t[0], t[1], t[2]);
  Rng rng(0);
  s.pose = TemporalPoseModel::make(jp.at("L_t").get<int>(), jp.at("width").get<int>(),
                                   jp.at("d_joints").get<int>(), base, rng);
  const int n = jp.at("n_params").get<int>();
  if (n != s.pose.n_params()) throw IoError("scene checkpoint: pose parameter count mismatch");
  const MatX row = io::read_matrix_f64(stem + "_pose.f64", 1, n);
  s.pose.mlp.from_flat(row.row(0).transpose());
  s.psi = tex::load_field(stem + "_psi");
  return s;
}

/// Root-pose initialization followed by joint first-order optimization of
/// shape, temporal pose model and texture field. Deterministic for a fixed
/// config: stage-1 and per-frame render seeds derive from cfg.seed, and
/// per-frame gradients reduce in frame order.
inline std::pair<SceneState, FitReport> fit_scene(const data::ObservationSet& obs,
                                                  const tmpl::SkinnedTemplate& tpl,
                                                  const FitConfig& cfg = {}) {
  const auto t_start = std::chrono::steady_clock::now();
  cfg.validate();
  obs.validate();
  tpl.validate();

  FitReport report;

  // stage 1: shared root from per-frame geometric poses
  poseinit::InitPoseConfig init_cfg = cfg.init;
  init_cfg.seed = hash_combine(cfg.seed, 1);
  init_cfg.n_threads = cfg.n_threads;
  const poseinit::InitPoseResult stage1 = poseinit::init_root_poses(obs, tpl, init_cfg);
  report.stage1 = poseinit::init_result_to_json(stage1);

  // stage 2 state
  const double scale = stage1.scene_scale;
  const double epsilon = cfg.epsilon < 0 ? 0.05 * scale : cfg.epsilon;
  const render::DuplexShells shells = render::make_duplex_shells(tpl, epsilon);
  Vec3 lo, hi;
  render::shell_bounds(shells, 0.05, &lo, &hi);

  Rng rng(hash_combine(cfg.seed, 2));
  SceneState scene;
  scene.beta = tmpl::ShapeParams::zeros(tpl.d_beta());
  scene.pose = TemporalPoseModel::make(cfg.pose_L, cfg.pose_width, tpl.d_pose(), stage1.g_pnp, rng);
  scene.psi = tex::TextureField::make(cfg.field_res, cfg.field_channels, cfg.field_width,
                                      cfg.field_L_dir, lo, hi, rng);

  std::vector<FramePrep> preps;
  preps.reserve(obs.frames.size());
  for (size_t f = 0; f < obs.frames.size(); ++f)
    preps.push_back(prepare_frame(obs.frames[f], tpl, cfg.match_stride, cfg.chamfer_max_points,
                                  hash_combine(cfg.seed, 1000 + f)));
  const auto neighbors = vertex_neighbors(tpl.rest_mesh);
  const auto edges = tpl.rest_mesh.unique_edges();
  const std::vector<int> train = obs.train_indices();
  report.n_train = static_cast<int>(train.size());
  if (train.empty()) throw ConfigError("fit: no training frames");

  diff::ParamVector params = scene_to_params(scene);
  diff::ParamVector lr_blocks = params.zeros_like();
  lr_blocks.block("pose").setConstant(cfg.lr_pose);
  lr_blocks.block("beta").setConstant(cfg.lr_beta);
  lr_blocks.block("psi").setConstant(cfg.lr_psi);
  const VecX lr = lr_blocks.values();
  Adam adam;
  adam.init(params.size());

  const auto full_objective = [&]() {
    return total_objective(scene, tpl, shells, obs, preps, cfg.weights, cfg.objective, neighbors,
                           edges, train, cfg.n_threads);
  };
  report.initial_objective = full_objective();
  if (!std::isfinite(report.initial_objective))
    throw NonFiniteGradient("fit: initial objective not finite");

  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

  const int warmup_iters = static_cast<int>(cfg.warmup_frac * cfg.iterations);
  Rng batch_rng(hash_combine(cfg.seed, 3));
  std::vector<int> pool = train;
  diff::ParamVector grad = params.zeros_like();
  report.curve.reserve(static_cast<size_t>(cfg.iterations));

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    LossWeights phase = cfg.weights;
    const bool photo_on = iter >= warmup_iters;
    if (!photo_on) phase.photo = 0.0;

    // distinct frames per step via a partial shuffle
    const int take = std::min<int>(cfg.minibatch, static_cast<int>(pool.size()));
    for (int i = 0; i < take; ++i) {
      const auto j = i + static_cast<int>(batch_rng.uniform_int(pool.size() - static_cast<size_t>(i)));
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    const std::vector<int> batch(pool.begin(), pool.begin() + take);

    FitGrads fg;
    fg.init_like(scene);
    std::vector<FrameLosses> per_frame;
    const double value = total_objective(scene, tpl, shells, obs, preps, phase, cfg.objective,
                                         neighbors, edges, batch, cfg.n_threads, &fg, &per_frame);
    if (!std::isfinite(value)) throw NonFiniteGradient("fit: minibatch objective not finite");
    grads_to_params(fg, &grad);
    if (!grad.values().allFinite()) throw NonFiniteGradient("fit: gradient not finite");

    adam.step(params.values(), grad.values(), lr);
    params_to_scene(params, &scene);

    IterationLog log;
    log.iter = iter;
    for (const auto& fl : per_frame) log.batch += fl;
    log.weighted = value;
    log.photo_on = photo_on;
    report.curve.push_back(log);

    const bool last = iter + 1 == cfg.iterations;
    if ((iter + 1) % cfg.divergence_check_every == 0 || last) {
      const double full = full_objective();
      if (!std::isfinite(full) || full > cfg.divergence_factor * report.initial_objective)
        throw DivergenceError("fit: objective " + std::to_string(full) + " exceeds " +
                              std::to_string(cfg.divergence_factor) + "x initial " +
                              std::to_string(report.initial_objective));
      report.final_objective = full;
    }
    if (!cfg.out_dir.empty() && ((iter + 1) % cfg.checkpoint_every == 0 || last))
      save_scene_state(scene, cfg.out_dir + "/ckpt_" + std::to_string(iter + 1));
  }
  if (cfg.iterations == 0) report.final_objective = report.initial_objective;

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  if (!cfg.out_dir.empty()) {
    report.checkpoint_path = cfg.out_dir + "/final";
    save_scene_state(scene, report.checkpoint_path);
    report.write_csv(cfg.out_dir + "/loss_curve.csv");
    std::ofstream out(cfg.out_dir + "/fit_report.json");
    if (!out) throw IoError("cannot write fit report");
    out << report.to_json().dump(2) << "\n";
  }
  return {std::move(scene), std::move(report)};
}

}  // namespace quadfit::fit
