#pragma once

#include "quadfit/core/parallel.hpp"
#include "quadfit/data/observations.hpp"
#include "quadfit/diff/gradcheck.hpp"
#include "quadfit/diff/param_vector.hpp"
#include "quadfit/fit/losses.hpp"
#include "quadfit/fit/pose_model.hpp"
#include "quadfit/poseinit/match.hpp"
#include "quadfit/render/render.hpp"
#include "quadfit/tex/field.hpp"

#include <vector>

namespace quadfit::fit {

/// Everything the optimizer updates: shape coefficients, the temporal pose
/// model and the canonical texture field.
struct SceneState {
  tmpl::ShapeParams beta;
  TemporalPoseModel pose;
  tex::TextureField psi;
};

struct LossWeights {
  double embed = 1.0;
  double keypoint = 0.5;
  double photo = 1.0;
  double mask = 0.1;
  double arap = 0.05;
  double edge = 0.05;

  void validate() const {
    if (embed < 0 || keypoint < 0 || photo < 0 || mask < 0 || arap < 0 || edge < 0)
      throw ConfigError("loss weights must be non-negative");
  }
};

/// Raw (unweighted) per-term values plus participation counters.
struct FrameLosses {
  double embed = 0, keypoint = 0, photo = 0, mask = 0, arap = 0, edge = 0;
  int embed_used = 0, keypoint_used = 0, mask_projected = 0;

  double weighted(const LossWeights& w) const {
    return w.embed * embed + w.keypoint * keypoint + w.photo * photo + w.mask * mask +
           w.arap * arap + w.edge * edge;
  }

  FrameLosses& operator+=(const FrameLosses& o) {
    embed += o.embed;
    keypoint += o.keypoint;
    photo += o.photo;
    mask += o.mask;
    arap += o.arap;
    edge += o.edge;
    embed_used += o.embed_used;
    keypoint_used += o.keypoint_used;
    mask_projected += o.mask_projected;
    return *this;
  }
};

/// Per-frame constants derived from the observations once, before the
/// optimization loop. Correspondences keep the raw (unfiltered) matches;
/// the robust norm downweights bad ones.
struct FramePrep {
  std::vector<poseinit::Correspondence2D3D> corrs;
  std::vector<Vec2> mask_pixels;  // subsampled foreground centers
  std::vector<int> roi;           // foreground pixel indices for rendering
  Image eroded;
  uint64_t render_seed = 0;
  bool empty_mask = false;
};

inline FramePrep prepare_frame(const data::FrameObservation& obs,
                               const tmpl::SkinnedTemplate& tpl, int match_stride,
                               int chamfer_max_points, uint64_t render_seed) {
  FramePrep prep;
  prep.render_seed = render_seed;
  prep.eroded = erode_mask(obs.mask);
  try {
    prep.corrs = poseinit::match_dense(obs.embedding, obs.mask, tpl, match_stride);
    prep.mask_pixels = subsample_mask_pixels(obs.mask, chamfer_max_points);
  } catch (const EmptyMask&) {
    prep.empty_mask = true;
    return prep;
  }
  prep.roi.reserve(prep.mask_pixels.size());
  for (int y = 0; y < obs.mask.height; ++y)
    for (int x = 0; x < obs.mask.width; ++x)
      if (obs.mask.at(0, y, x) > 0.5) prep.roi.push_back(y * obs.mask.width + x);
  return prep;
}

/// Gradient accumulator matching SceneState's optimizable blocks.
struct FitGrads {
  Mlp::Grads pose;
  VecX beta;
  tex::TextureField::Grads psi;

  void init_like(const SceneState& s) {
    pose.init_like(s.pose.mlp);
    beta = VecX::Zero(s.beta.coeffs.size());
    psi.init_like(s.psi);
  }

  void accumulate(const FitGrads& o) {
    pose.accumulate(o.pose);
    beta += o.beta;
    psi.accumulate(o.psi);
  }
};

struct ObjectiveConfig {
  render::RenderConfig render;     // per-frame seed comes from FramePrep
  double huber_delta = 4.0;        // pixels, reprojection terms
  double photo_grad_weight = 0.5;  // image-gradient term inside the photo loss

  void validate() const {
    if (huber_delta <= 0) throw ConfigError("objective: huber delta must be > 0");
    if (photo_grad_weight < 0) throw ConfigError("objective: negative gradient weight");
    if (render.n_samples < 1) throw ConfigError("objective: n_samples must be >= 1");
  }
};

/// All loss terms of one frame; gradients (scaled by the loss weights)
/// accumulate into `grads` when given. The photo term is skipped entirely
/// when its weight is zero, so no render happens during warmup.
inline FrameLosses frame_objective(const SceneState& scene, const tmpl::SkinnedTemplate& tpl,
                                   const render::DuplexShells& shells,
                                   const data::FrameObservation& obs, const FramePrep& prep,
                                   const LossWeights& weights, const ObjectiveConfig& cfg,
                                   const std::vector<std::vector<int>>& neighbors,
                                   const std::vector<std::pair<int, int>>& edges,
                                   FitGrads* grads = nullptr) {
  FrameLosses out;
  TemporalPoseModel::Cache pose_cache;
  const tmpl::PoseParams theta =
      eval_pose(scene.pose, obs.camera.timestamp, grads ? &pose_cache : nullptr);
  tmpl::LbsCache lbs_cache;
  const MatX3 posed = tmpl::lbs_deform(tpl, scene.beta, theta, &lbs_cache);

  MatX3 d_posed, d_shaped;
  if (grads) {
    d_posed = MatX3::Zero(posed.rows(), 3);
    d_shaped = MatX3::Zero(posed.rows(), 3);
  }
  MatX3* dp = grads ? &d_posed : nullptr;
  MatX3* ds = grads ? &d_shaped : nullptr;

  out.embed = loss_embedding(prep.corrs, posed, obs.camera, cfg.huber_delta, weights.embed, dp,
                             &out.embed_used);
  out.keypoint = loss_keypoint(obs.keypoints, tpl, posed, obs.camera, cfg.huber_delta,
                               weights.keypoint, dp, &out.keypoint_used);
  if (!prep.empty_mask)
    out.mask = loss_mask(prep.mask_pixels, posed, obs.camera, weights.mask, dp,
                         &out.mask_projected);
  out.arap = loss_arap(neighbors, lbs_cache.shaped, posed, weights.arap, dp, ds);
  out.edge = loss_edge(edges, lbs_cache.shaped, posed, weights.edge, dp, ds);

  render::RenderGrads rgrads;
  bool have_render_grads = false;
  if (weights.photo > 0 && !prep.empty_mask) {
    render::RenderConfig rcfg = cfg.render;
    rcfg.seed = prep.render_seed;
    render::RenderContext rctx;
    const render::RenderOutput rendered =
        render::render_rgb(obs.camera, tpl, shells, scene.beta, theta, scene.psi, rcfg,
                           &prep.roi, grads ? &rctx : nullptr);
    Image d_rgb;
    if (grads) d_rgb = Image(3, obs.rgb.height, obs.rgb.width);
    out.photo = loss_photo(obs.rgb, obs.mask, prep.eroded, rendered.rgb, cfg.photo_grad_weight,
                           weights.photo, grads ? &d_rgb : nullptr);
    if (grads) {
      render::render_rgb_backward(obs.camera, tpl, shells, scene.beta, theta, scene.psi, rcfg,
                                  rctx, d_rgb, nullptr, &rgrads);
      have_render_grads = true;
    }
  }

  if (grads) {
    tmpl::LbsGrads lg;
    tmpl::lbs_backward(tpl, scene.beta, theta, lbs_cache, d_posed, &lg);
    if (have_render_grads) {
      lg.coeffs += rgrads.lbs.coeffs;
      lg.joint_angles += rgrads.lbs.joint_angles;
      lg.root_R += rgrads.lbs.root_R;
      lg.root_t += rgrads.lbs.root_t;
    }
    grads->beta += lg.coeffs;
    // the shaped mesh also feeds arap/edge directly, outside the skinning path
    for (int i = 0; i < tpl.d_beta(); ++i)
      grads->beta[i] += d_shaped.cwiseProduct(tpl.shape_basis[static_cast<size_t>(i)]).sum();
    eval_pose_backward(scene.pose, pose_cache, lg.root_R, lg.root_t, lg.joint_angles,
                       &grads->pose);
    if (have_render_grads) grads->psi.accumulate(rgrads.psi);
  }
  return out;
}

/// Weighted loss sum over the listed frames. Frames evaluate concurrently
/// into slots and reduce in list order, so the result does not depend on the
/// thread count or the order frames finish.
inline double total_objective(const SceneState& scene, const tmpl::SkinnedTemplate& tpl,
                              const render::DuplexShells& shells,
                              const data::ObservationSet& obs,
                              const std::vector<FramePrep>& preps, const LossWeights& weights,
                              const ObjectiveConfig& cfg,
                              const std::vector<std::vector<int>>& neighbors,
                              const std::vector<std::pair<int, int>>& edges,
                              const std::vector<int>& frames, int n_threads = 1,
                              FitGrads* grads = nullptr,
                              std::vector<FrameLosses>* per_frame = nullptr) {
  weights.validate();
  cfg.validate();
  if (preps.size() != obs.frames.size())
    throw DimensionMismatch("total objective: prep count vs frames");
  for (const int f : frames)
    if (f < 0 || f >= static_cast<int>(obs.frames.size()))
      throw IndexError("total objective: frame index out of range");

  std::vector<FrameLosses> slots(frames.size());
  std::vector<FitGrads> grad_slots;
  if (grads) {
    grad_slots.resize(frames.size());
    for (auto& g : grad_slots) g.init_like(scene);
  }
  parallel_chunks(frames.size(), frames.size(), n_threads,
                  [&](std::size_t, std::size_t b, std::size_t e) {
                    for (std::size_t i = b; i < e; ++i) {
                      const int f = frames[i];
                      slots[i] = frame_objective(scene, tpl, shells,
                                                 obs.frames[static_cast<size_t>(f)],
                                                 preps[static_cast<size_t>(f)], weights, cfg,
                                                 neighbors, edges,
                                                 grads ? &grad_slots[i] : nullptr);
                    }
                  });

  double total = 0;
  for (std::size_t i = 0; i < frames.size(); ++i) total += slots[i].weighted(weights);
  if (grads)
    for (const auto& g : grad_slots) grads->accumulate(g);
  if (per_frame) *per_frame = std::move(slots);
  return total;
}

/// Flat parameter layout: blocks "pose", "beta", "psi".
inline diff::ParamVector scene_to_params(const SceneState& s) {
  diff::ParamVector p;
  p.add_block("pose", s.pose.n_params());
  p.add_block("beta", static_cast<int>(s.beta.coeffs.size()));
  p.add_block("psi", s.psi.n_params());
  s.pose.mlp.to_flat(p.block("pose"));
  p.block("beta") = s.beta.coeffs;
  s.psi.to_flat(p.block("psi"));
  return p;
}

/// Writes flat values back into an already shaped SceneState.
inline void params_to_scene(const diff::ParamVector& p, SceneState* s) {
  s->pose.mlp.from_flat(p.block("pose"));
  s->beta.coeffs = p.block("beta");
  s->psi.from_flat(p.block("psi"));
}

inline void grads_to_params(const FitGrads& g, diff::ParamVector* p) {
  g.pose.to_flat(p->block("pose"));
  p->block("beta") = g.beta;
  g.psi.to_flat(p->block("psi"));
}

/// Adapts the scene objective to the generic gradient-check interface. The
/// referenced inputs must outlive the returned closures.
inline diff::Objective make_objective(const SceneState& prototype,
                                      const tmpl::SkinnedTemplate& tpl,
                                      const render::DuplexShells& shells,
                                      const data::ObservationSet& obs,
                                      const std::vector<FramePrep>& preps,
                                      const LossWeights& weights, const ObjectiveConfig& cfg,
                                      const std::vector<std::vector<int>>& neighbors,
                                      const std::vector<std::pair<int, int>>& edges,
                                      const std::vector<int>& frames, int n_threads = 1) {
  diff::Objective obj;
  obj.value = [=, &tpl, &shells, &obs, &preps, &neighbors, &edges](const diff::ParamVector& p) {
    SceneState s = prototype;
    params_to_scene(p, &s);
    return total_objective(s, tpl, shells, obs, preps, weights, cfg, neighbors, edges, frames,
                           n_threads);
  };
  obj.value_and_grad = [=, &tpl, &shells, &obs, &preps, &neighbors, &edges](
                           const diff::ParamVector& p, diff::ParamVector* g) {
    SceneState s = prototype;
    params_to_scene(p, &s);
    FitGrads fg;
    fg.init_like(s);
    const double v = total_objective(s, tpl, shells, obs, preps, weights, cfg, neighbors, edges,
                                     frames, n_threads, &fg);
    grads_to_params(fg, g);
    return v;
  };
  return obj;
}

}  // namespace quadfit::fit
