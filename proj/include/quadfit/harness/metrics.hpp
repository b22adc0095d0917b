#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/image.hpp"
#include "quadfit/core/parallel.hpp"
#include "quadfit/data/observations.hpp"
#include "quadfit/fit/losses.hpp"
#include "quadfit/fit/objective.hpp"
#include "quadfit/io/png.hpp"
#include "quadfit/render/render.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace quadfit::harness {

constexpr double kPsnrCap = 60.0;  // returned when the masked error vanishes

/// |A n B| / |A u B| on {0,1} masks; both empty counts as a perfect match.
inline double frame_iou(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width || a.channels != 1 || b.channels != 1)
    throw ResolutionMismatch("iou: mask shapes differ");
  long inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] > 0.5, pb = b.data[i] > 0.5;
    inter += pa && pb;
    uni += pa || pb;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Mean of the worst 5% of per-frame values (at least one frame).
inline double worst5(std::vector<double> values) {
  if (values.empty()) throw ConfigError("metrics: no frames");
  const int k = std::max<int>(1, static_cast<int>(0.05 * static_cast<double>(values.size())));
  std::sort(values.begin(), values.end());
  double sum = 0;
  for (int i = 0; i < k; ++i) sum += values[static_cast<size_t>(i)];
  return sum / k;
}

inline std::pair<double, double> metric_iou(const std::vector<Image>& pred,
                                            const std::vector<Image>& gt,
                                            std::vector<double>* per_frame = nullptr) {
  if (pred.size() != gt.size() || pred.empty())
    throw DimensionMismatch("iou: frame count mismatch or empty");
  std::vector<double> ious;
  ious.reserve(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) ious.push_back(frame_iou(pred[i], gt[i]));
  const double mean =
      std::accumulate(ious.begin(), ious.end(), 0.0) / static_cast<double>(ious.size());
  const double w5 = worst5(ious);
  if (per_frame) *per_frame = std::move(ious);
  return {mean, w5};
}

/// PSNR over the masked pixels of one frame, capped at 60 dB.
inline double frame_psnr(const Image& pred, const Image& gt, const Image& mask) {
  if (pred.channels != 3 || gt.channels != 3 || mask.channels != 1)
    throw DimensionMismatch("psnr: rgb must be 3-channel, mask 1-channel");
  if (pred.height != gt.height || pred.width != gt.width || pred.height != mask.height ||
      pred.width != mask.width)
    throw ResolutionMismatch("psnr: image shapes differ");
  double se = 0;
  long n = 0;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(0, y, x) < 0.5) continue;
      ++n;
      for (int c = 0; c < 3; ++c) {
        const double d = pred.at(c, y, x) - gt.at(c, y, x);
        se += d * d;
      }
    }
  if (n == 0) return kPsnrCap;  // empty mask: nothing to compare
  const double mse = se / (3.0 * static_cast<double>(n));
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

inline std::pair<double, double> metric_psnr(const std::vector<Image>& pred,
                                             const std::vector<Image>& gt,
                                             const std::vector<Image>& masks,
                                             std::vector<double>* per_frame = nullptr) {
  if (pred.size() != gt.size() || pred.size() != masks.size() || pred.empty())
    throw DimensionMismatch("psnr: frame count mismatch or empty");
  std::vector<double> vals;
  vals.reserve(pred.size());
  for (size_t i = 0; i < pred.size(); ++i)
    vals.push_back(frame_psnr(pred[i], gt[i], masks[i]));
  const double mean =
      std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
  const double w5 = worst5(vals);
  if (per_frame) *per_frame = std::move(vals);
  return {mean, w5};
}

/// Keypoint tracking error: pair each first-frame ground-truth keypoint with
/// the nearest visible projected vertex of the fitted scene, then measure the
/// mean L2 gap on the remaining frames, as a fraction of the image diagonal.
/// Keypoints that cannot be paired or tracked are skipped and counted.
inline double metric_err_track(const std::vector<std::vector<data::Keypoint2D>>& gt_kps,
                               const fit::SceneState& scene, const tmpl::SkinnedTemplate& tpl,
                               const std::vector<cam::Camera>& cams, int* n_skipped = nullptr) {
  if (gt_kps.size() != cams.size()) throw DimensionMismatch("err_track: frames vs cameras");
  if (cams.size() < 2) throw ConfigError("err_track: needs at least 2 frames");
  const size_t n_kp = gt_kps[0].size();
  for (const auto& kps : gt_kps)
    if (kps.size() != n_kp) throw DimensionMismatch("err_track: keypoint count varies");

  std::vector<MatX3> posed(cams.size());
  for (size_t t = 0; t < cams.size(); ++t) {
    const auto theta = fit::eval_pose(scene.pose, cams[t].timestamp);
    posed[t] = tmpl::lbs_deform(tpl, scene.beta, theta);
  }

  int skipped = 0;
  std::vector<int> paired(n_kp, -1);
  for (size_t k = 0; k < n_kp; ++k) {
    if (!gt_kps[0][k].visible) {
      ++skipped;
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    for (int v = 0; v < posed[0].rows(); ++v) {
      const auto proj = cams[0].project(posed[0].row(v).transpose());
      if (proj.behind) continue;
      const double d2 = (proj.uv - gt_kps[0][k].uv).squaredNorm();
      if (d2 < best) {
        best = d2;
        paired[k] = v;
      }
    }
    if (paired[k] < 0) ++skipped;  // no vertex in front of the first camera
  }

  double sum = 0;
  long n = 0;
  for (size_t t = 1; t < cams.size(); ++t) {
    const double diag = std::hypot(static_cast<double>(cams[t].width),
                                   static_cast<double>(cams[t].height));
    for (size_t k = 0; k < n_kp; ++k) {
      if (paired[k] < 0 || !gt_kps[t][k].visible) continue;
      const auto proj = cams[t].project(posed[t].row(paired[k]).transpose());
      if (proj.behind) {
        ++skipped;
        continue;
      }
      sum += (proj.uv - gt_kps[t][k].uv).norm() / diag;
      ++n;
    }
  }
  if (n_skipped) *n_skipped = skipped;
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

struct MetricsReport {
  double iou = 0, iou_w5 = 0;
  double psnr = 0, psnr_w5 = 0;
  double photo = 0;  // mean photometric proxy over evaluated frames
  double err_track = 0;
  int n_skipped_track = 0;
  std::vector<int> frames;  // absolute frame indices evaluated
  std::vector<double> frame_iou, frame_psnr, frame_photo;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["iou"] = iou;
    j["iou_w5"] = iou_w5;
    j["psnr"] = psnr;
    j["psnr_w5"] = psnr_w5;
    j["photo"] = photo;
    j["err_track"] = err_track;
    j["n_skipped_track"] = n_skipped_track;
    j["frames"] = frames;
    j["frame_iou"] = frame_iou;
    j["frame_psnr"] = frame_psnr;
    j["frame_photo"] = frame_photo;
    return j;
  }
};

struct EvalConfig {
  render::RenderConfig render;
  double epsilon = 0.05;  // shell offset, absolute units
  int n_threads = 1;
  std::string out_dir;  // when set: report json + per-frame pngs
};

/// Renders the fitted scene on one split and scores it against the
/// observations; tracking error uses the supplied exact keypoints when
/// available, the observed (noisy) detections otherwise.
inline MetricsReport evaluate(const fit::SceneState& scene, const tmpl::SkinnedTemplate& tpl,
                              const data::ObservationSet& obs,
                              const std::vector<std::vector<data::Keypoint2D>>& gt_keypoints,
                              bool test_split, const EvalConfig& cfg) {
  obs.validate();
  if (!gt_keypoints.empty() && gt_keypoints.size() != obs.frames.size())
    throw DimensionMismatch("evaluate: ground-truth keypoint frame count");
  const std::vector<int> frames = obs.split_indices(test_split);
  if (frames.empty()) throw ConfigError("evaluate: empty split");

  const auto shells = render::make_duplex_shells(tpl, cfg.epsilon);
  const size_t n = frames.size();
  std::vector<Image> pred_rgb(n), pred_mask(n);
  std::vector<Image> gt_rgb(n), gt_mask(n);
  std::vector<double> photo(n);

  parallel_chunks(n, n, cfg.n_threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& f = obs.frames[static_cast<size_t>(frames[i])];
      const auto theta = fit::eval_pose(scene.pose, f.camera.timestamp);

      render::RenderConfig rcfg = cfg.render;
      rcfg.seed = hash_combine(cfg.render.seed, 7000 + static_cast<uint64_t>(frames[i]));
      pred_rgb[i] =
          render::render_rgb(f.camera, tpl, shells, scene.beta, theta, scene.psi, rcfg).rgb;

      geom::TriMesh posed;
      posed.vertices = tmpl::lbs_deform(tpl, scene.beta, theta);
      posed.faces = tpl.rest_mesh.faces;
      pred_mask[i] = render::render_silhouette(f.camera, posed).mask;

      const Image eroded = fit::erode_mask(f.mask);
      photo[i] = fit::loss_photo(f.rgb, f.mask, eroded, pred_rgb[i]);
      gt_rgb[i] = f.rgb;
      gt_mask[i] = f.mask;
    }
  });

  MetricsReport rep;
  rep.frames = frames;
  std::tie(rep.iou, rep.iou_w5) = metric_iou(pred_mask, gt_mask, &rep.frame_iou);
  std::tie(rep.psnr, rep.psnr_w5) = metric_psnr(pred_rgb, gt_rgb, gt_mask, &rep.frame_psnr);
  rep.frame_photo = photo;
  rep.photo = std::accumulate(photo.begin(), photo.end(), 0.0) / static_cast<double>(n);

  if (frames.size() >= 2) {
    std::vector<std::vector<data::Keypoint2D>> kps;
    std::vector<cam::Camera> cams;
    for (const int t : frames) {
      kps.push_back(gt_keypoints.empty() ? obs.frames[static_cast<size_t>(t)].keypoints
                                         : gt_keypoints[static_cast<size_t>(t)]);
      cams.push_back(obs.frames[static_cast<size_t>(t)].camera);
    }
    rep.err_track = metric_err_track(kps, scene, tpl, cams, &rep.n_skipped_track);
  }

  if (!cfg.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    char name[32];
    for (size_t i = 0; i < n; ++i) {
      std::snprintf(name, sizeof(name), "pred_rgb_%04d.png", frames[i]);
      io::save_png((fs::path(cfg.out_dir) / name).string(), pred_rgb[i]);
      std::snprintf(name, sizeof(name), "pred_mask_%04d.png", frames[i]);
      io::save_png((fs::path(cfg.out_dir) / name).string(), pred_mask[i]);
    }
    std::ofstream out((fs::path(cfg.out_dir) / "metrics.json").string());
    out << rep.to_json().dump(2) << "\n";
    if (!out) throw IoError("evaluate: cannot write metrics report");
  }
  return rep;
}

}  // namespace quadfit::harness
