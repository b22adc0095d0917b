#pragma once

#include "quadfit/cam/camera.hpp"
#include "quadfit/core/image.hpp"
#include "quadfit/core/parallel.hpp"
#include "quadfit/core/rng.hpp"
#include "quadfit/render/duplex.hpp"
#include "quadfit/render/ea.hpp"

#include <numeric>
#include <vector>

namespace quadfit::render {

struct RenderConfig {
  int n_samples = 16;
  uint64_t seed = 0;
  double t_min = 1e-9;
  double min_segment = 1e-9;
  int n_threads = 1;
};

/// One valid pixel's march segment; posed hits map to canonical points by
/// shared topology.
struct PixelTask {
  int pixel = -1;
  SegmentKind kind = SegmentKind::Invalid;
  geom::SurfaceHit entry_hit, exit_hit;  // posed-space
  Vec3 entry_c = Vec3::Zero(), exit_c = Vec3::Zero();
  double len = 0.0;
  Vec3 dir = Vec3::UnitZ();
};

/// Forward-pass state the backward pass reuses.
struct RenderContext {
  PosedDuplex posed;
  std::vector<PixelTask> tasks;
  std::size_t n_requested = 0;
};

struct RenderOutput {
  Image rgb;    // 3 x H x W
  Image alpha;  // 1 x H x W
  std::vector<SegmentKind> kind;        // per pixel
  std::vector<geom::SurfaceHit> entry;  // face_index == -1 when invalid
  std::vector<geom::SurfaceHit> exit;
  double coverage = 0.0;  // valid fraction of requested pixels
};

struct RenderGrads {
  tex::TextureField::Grads psi;
  tmpl::LbsGrads lbs;  // summed over both shells
};

namespace detail {

inline geom::Ray pixel_ray(const cam::Camera& cam, int pixel) {
  geom::Ray ray;
  const int x = pixel % cam.width, y = pixel / cam.width;
  cam.unproject_ray(Vec2(x + 0.5, y + 0.5), &ray.origin, &ray.dir);
  return ray;
}

/// Stratified jitter for one pixel; identical across forward and backward.
inline void pixel_jitter(uint64_t seed, int pixel, int n, double* out) {
  Rng rng(hash_combine(seed, static_cast<uint64_t>(pixel)));
  for (int i = 0; i < n; ++i) out[i] = rng.uniform01();
}

/// Routes a canonical-endpoint gradient onto the three posed triangle
/// vertices through the fixed-face intersection barycentrics.
inline void scatter_endpoint_grad(const geom::Ray& ray, const geom::TriMesh& posed,
                                  const geom::TriMesh& canon, int face, const Vec3& d_point,
                                  MatX3* d_verts) {
  BaryVertexJac jac;
  if (!bary_vertex_jacobian(ray, posed.face_vertex(face, 0), posed.face_vertex(face, 1),
                            posed.face_vertex(face, 2), &jac))
    return;
  double db[3];
  for (int k = 0; k < 3; ++k) db[k] = d_point.dot(canon.face_vertex(face, k));
  const double du = db[1] - db[0];
  const double dv = db[2] - db[0];
  for (int k = 0; k < 3; ++k)
    d_verts->row(posed.faces(face, k)) += (du * jac.du[k] + dv * jac.dv[k]).transpose();
}

inline void assemble_samples(const std::vector<PixelTask>& tasks, const RenderConfig& cfg,
                             MatX3* P, MatX3* D) {
  const int ns = cfg.n_samples;
  const int n = static_cast<int>(tasks.size()) * ns;
  P->resize(n, 3);
  D->resize(n, 3);
  std::vector<double> jit(static_cast<size_t>(ns));
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    const auto& t = tasks[ti];
    pixel_jitter(cfg.seed, t.pixel, ns, jit.data());
    const Vec3 span = t.exit_c - t.entry_c;
    for (int i = 0; i < ns; ++i) {
      const double s = (i + jit[static_cast<size_t>(i)]) / ns;
      P->row(static_cast<int>(ti) * ns + i) = (t.entry_c + s * span).transpose();
      D->row(static_cast<int>(ti) * ns + i) = t.dir.transpose();
    }
  }
}

}  // namespace detail

/// Poses the duplex shells, intersects one ray per requested pixel, marches
/// the canonical segments through the field. `roi` lists unique row-major
/// pixel indices; null renders the full frame.
inline RenderOutput render_rgb(const cam::Camera& cam, const tmpl::SkinnedTemplate& tpl,
                               const DuplexShells& shells, const tmpl::ShapeParams& beta,
                               const tmpl::PoseParams& theta, const tex::TextureField& psi,
                               const RenderConfig& cfg, const std::vector<int>* roi = nullptr,
                               RenderContext* ctx_out = nullptr) {
  cam.require_valid();
  if (cfg.n_samples < 1) throw ConfigError("render: n_samples must be >= 1");
  const int H = cam.height, W = cam.width;
  const int n_pix = H * W;

  RenderContext local_ctx;
  RenderContext& ctx = ctx_out ? *ctx_out : local_ctx;
  pose_duplex(tpl, shells, beta, theta, &ctx.posed);
  const geom::Bvh bvh_outer(ctx.posed.posed_outer);
  const geom::Bvh bvh_inner(ctx.posed.posed_inner);

  std::vector<int> all;
  if (!roi) {
    all.resize(static_cast<size_t>(n_pix));
    std::iota(all.begin(), all.end(), 0);
  }
  const std::vector<int>& pixels = roi ? *roi : all;
  for (int p : pixels)
    if (p < 0 || p >= n_pix) throw IndexError("render: roi pixel out of range");
  ctx.n_requested = pixels.size();

  RenderOutput out;
  out.rgb = Image(3, H, W);
  out.alpha = Image(1, H, W);
  out.kind.assign(static_cast<size_t>(n_pix), SegmentKind::Invalid);
  out.entry.assign(static_cast<size_t>(n_pix), geom::SurfaceHit{});
  out.exit.assign(static_cast<size_t>(n_pix), geom::SurfaceHit{});

  std::vector<PixelTask> slots(pixels.size());
  parallel_chunks(pixels.size(), 64, cfg.n_threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const int p = pixels[i];
      const geom::Ray ray = detail::pixel_ray(cam, p);
      const DuplexHit hit = intersect_duplex(ray, bvh_outer, bvh_inner, cfg.t_min);
      if (hit.kind == SegmentKind::Invalid) continue;
      PixelTask t;
      t.pixel = p;
      t.kind = hit.kind;
      t.entry_hit = hit.entry;
      t.exit_hit = hit.exit;
      t.entry_c = geom::barycentric_transport(hit.entry, shells.canon_outer);
      const geom::TriMesh& exit_canon =
          hit.kind == SegmentKind::OuterInner ? shells.canon_inner : shells.canon_outer;
      t.exit_c = geom::barycentric_transport(hit.exit, exit_canon);
      t.len = (t.exit_c - t.entry_c).norm();
      if (t.len < cfg.min_segment) continue;  // degenerate: pixel stays invalid
      t.dir = (t.exit_c - t.entry_c) / t.len;
      slots[i] = t;
    }
  });

  ctx.tasks.clear();
  for (auto& s : slots) {
    if (s.kind == SegmentKind::Invalid) continue;
    out.kind[static_cast<size_t>(s.pixel)] = s.kind;
    out.entry[static_cast<size_t>(s.pixel)] = s.entry_hit;
    out.exit[static_cast<size_t>(s.pixel)] = s.exit_hit;
    ctx.tasks.push_back(std::move(s));
  }
  out.coverage = pixels.empty() ? 0.0
                                : static_cast<double>(ctx.tasks.size()) /
                                      static_cast<double>(pixels.size());
  if (ctx.tasks.empty()) return out;

  MatX3 P, D;
  detail::assemble_samples(ctx.tasks, cfg, &P, &D);
  VecX sigma;
  MatX3 rgb_s;
  psi.eval(P, D, &sigma, &rgb_s);

  const int ns = cfg.n_samples;
  parallel_chunks(ctx.tasks.size(), 64, cfg.n_threads,
                  [&](std::size_t, std::size_t b, std::size_t e) {
                    for (std::size_t ti = b; ti < e; ++ti) {
                      const auto& t = ctx.tasks[ti];
                      const VecX sseg = sigma.segment(static_cast<int>(ti) * ns, ns);
                      const MatX3 cseg = rgb_s.middleRows(static_cast<int>(ti) * ns, ns);
                      const EaResult r = ea_accumulate(sseg, cseg, t.len / ns);
                      const int x = t.pixel % W, y = t.pixel / W;
                      for (int k = 0; k < 3; ++k) out.rgb.at(k, y, x) = r.rgb[k];
                      out.alpha.at(0, y, x) = r.alpha;
                    }
                  });
  return out;
}

/// Reverse pass: recomputes the deterministic field pass, then routes pixel
/// gradients through the march, the canonical transport, and both shells'
/// skinning. `d_alpha` may be null.
inline void render_rgb_backward(const cam::Camera& cam, const tmpl::SkinnedTemplate& tpl,
                                const DuplexShells& shells, const tmpl::ShapeParams& beta,
                                const tmpl::PoseParams& theta, const tex::TextureField& psi,
                                const RenderConfig& cfg, const RenderContext& ctx,
                                const Image& d_rgb, const Image* d_alpha, RenderGrads* grads) {
  grads->psi.init_like(psi);
  grads->lbs = tmpl::LbsGrads{};
  grads->lbs.coeffs = VecX::Zero(tpl.d_beta());
  grads->lbs.bone_log_scales = VecX::Zero(beta.bone_log_scales.size());
  grads->lbs.joint_angles = VecX::Zero(tpl.d_pose());
  if (ctx.tasks.empty()) return;
  if (d_rgb.channels != 3 || d_rgb.height != cam.height || d_rgb.width != cam.width)
    throw ResolutionMismatch("render backward: d_rgb shape");

  const int ns = cfg.n_samples;
  const int n_tasks = static_cast<int>(ctx.tasks.size());
  MatX3 P, D;
  detail::assemble_samples(ctx.tasks, cfg, &P, &D);
  VecX sigma;
  MatX3 rgb_s;
  tex::TextureField::EvalCache cache;
  psi.eval(P, D, &sigma, &rgb_s, &cache);

  VecX d_sigma_all(n_tasks * ns);
  MatX3 d_rgb_all(n_tasks * ns, 3);
  VecX d_delta(n_tasks);
  const int W = cam.width;
  parallel_chunks(ctx.tasks.size(), 64, cfg.n_threads,
                  [&](std::size_t, std::size_t b, std::size_t e) {
                    for (std::size_t ti = b; ti < e; ++ti) {
                      const auto& t = ctx.tasks[ti];
                      const int x = t.pixel % W, y = t.pixel / W;
                      const Vec3 g_rgb(d_rgb.at(0, y, x), d_rgb.at(1, y, x), d_rgb.at(2, y, x));
                      const double g_alpha = d_alpha ? d_alpha->at(0, y, x) : 0.0;
                      const VecX sseg = sigma.segment(static_cast<int>(ti) * ns, ns);
                      const MatX3 cseg = rgb_s.middleRows(static_cast<int>(ti) * ns, ns);
                      VecX ds;
                      MatX3 dc;
                      double dd;
                      ea_accumulate_backward(sseg, cseg, t.len / ns, g_rgb, g_alpha, &ds, &dc, &dd);
                      d_sigma_all.segment(static_cast<int>(ti) * ns, ns) = ds;
                      d_rgb_all.middleRows(static_cast<int>(ti) * ns, ns) = dc;
                      d_delta[static_cast<int>(ti)] = dd;
                    }
                  });

  MatX3 dP, dD;
  psi.eval_backward(cache, d_sigma_all, d_rgb_all, &grads->psi, &dP, &dD);

  const int nv = tpl.n_vertices();
  MatX3 dv_outer = MatX3::Zero(nv, 3);
  MatX3 dv_inner = MatX3::Zero(nv, 3);
  std::vector<double> jit(static_cast<size_t>(ns));
  for (int ti = 0; ti < n_tasks; ++ti) {
    const auto& t = ctx.tasks[static_cast<size_t>(ti)];
    detail::pixel_jitter(cfg.seed, t.pixel, ns, jit.data());
    Vec3 d_entry = Vec3::Zero(), d_exit = Vec3::Zero(), g_dir = Vec3::Zero();
    for (int i = 0; i < ns; ++i) {
      const Vec3 g = dP.row(ti * ns + i).transpose();
      const double s = (i + jit[static_cast<size_t>(i)]) / ns;
      d_entry += (1.0 - s) * g;
      d_exit += s * g;
      g_dir += dD.row(ti * ns + i).transpose();
    }
    const double d_len = d_delta[ti] / ns;
    d_entry -= d_len * t.dir;
    d_exit += d_len * t.dir;
    const Vec3 dv = (g_dir - t.dir * t.dir.dot(g_dir)) / t.len;
    d_entry -= dv;
    d_exit += dv;

    const geom::Ray ray = detail::pixel_ray(cam, t.pixel);
    detail::scatter_endpoint_grad(ray, ctx.posed.posed_outer, shells.canon_outer,
                                  t.entry_hit.face_index, d_entry, &dv_outer);
    if (t.kind == SegmentKind::OuterInner)
      detail::scatter_endpoint_grad(ray, ctx.posed.posed_inner, shells.canon_inner,
                                    t.exit_hit.face_index, d_exit, &dv_inner);
    else
      detail::scatter_endpoint_grad(ray, ctx.posed.posed_outer, shells.canon_outer,
                                    t.exit_hit.face_index, d_exit, &dv_outer);
  }

  tmpl::LbsGrads g_outer, g_inner;
  tmpl::lbs_backward(tpl, beta, theta, ctx.posed.cache_outer, dv_outer, &g_outer);
  tmpl::lbs_backward(tpl, beta, theta, ctx.posed.cache_inner, dv_inner, &g_inner);
  grads->lbs.coeffs = g_outer.coeffs + g_inner.coeffs;
  grads->lbs.joint_angles = g_outer.joint_angles + g_inner.joint_angles;
  grads->lbs.root_R = g_outer.root_R + g_inner.root_R;
  grads->lbs.root_t = g_outer.root_t + g_inner.root_t;
  if (beta.bone_log_scales.size())
    grads->lbs.bone_log_scales = g_outer.bone_log_scales + g_inner.bone_log_scales;
}

struct Silhouette {
  Image mask;  // 1 x H x W in {0,1}
  std::vector<geom::SurfaceHit> hits;
  double coverage = 0.0;
};

/// Any-hit rasterization of an arbitrary mesh; the hit buffer keeps the first
/// intersection per pixel.
inline Silhouette render_silhouette(const cam::Camera& cam, const geom::TriMesh& mesh,
                                    double t_min = 1e-9, int n_threads = 1) {
  cam.require_valid();
  const int H = cam.height, W = cam.width;
  Silhouette out;
  out.mask = Image(1, H, W);
  out.hits.assign(static_cast<size_t>(H) * W, geom::SurfaceHit{});
  const geom::Bvh bvh(mesh);
  std::size_t n_pix = static_cast<std::size_t>(H) * W;
  parallel_chunks(n_pix, 64, n_threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t p = b; p < e; ++p) {
      const geom::Ray ray = detail::pixel_ray(cam, static_cast<int>(p));
      const auto hit = bvh.first_hit(ray, t_min);
      if (!hit) continue;
      out.hits[p] = *hit;
      out.mask.data[p] = 1.0;
    }
  });
  double s = 0;
  for (double v : out.mask.data) s += v;
  out.coverage = s / static_cast<double>(n_pix);
  return out;
}

struct EmbeddingMapRender {
  Image descriptors;  // d_embed x H x W
  Image valid;        // 1 x H x W
  std::vector<geom::SurfaceHit> hits;
};

/// Rasterizes the posed main mesh and interpolates per-vertex descriptors at
/// each hit.
inline EmbeddingMapRender render_embedding_map(const cam::Camera& cam,
                                               const tmpl::SkinnedTemplate& tpl,
                                               const geom::TriMesh& posed_main,
                                               double t_min = 1e-9, int n_threads = 1) {
  cam.require_valid();
  if (posed_main.n_vertices() != tpl.n_vertices())
    throw DimensionMismatch("embedding map: posed mesh vertex count");
  const int H = cam.height, W = cam.width, de = tpl.d_embed();
  EmbeddingMapRender out;
  out.descriptors = Image(de, H, W);
  out.valid = Image(1, H, W);
  out.hits.assign(static_cast<size_t>(H) * W, geom::SurfaceHit{});
  const geom::Bvh bvh(posed_main);
  const std::size_t n_pix = static_cast<std::size_t>(H) * W;
  parallel_chunks(n_pix, 64, n_threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t p = b; p < e; ++p) {
      const geom::Ray ray = detail::pixel_ray(cam, static_cast<int>(p));
      const auto hit = bvh.first_hit(ray, t_min);
      if (!hit) continue;
      out.hits[p] = *hit;
      out.valid.data[p] = 1.0;
      const int x = static_cast<int>(p) % W, y = static_cast<int>(p) / W;
      for (int c = 0; c < de; ++c) {
        double v = 0;
        for (int k = 0; k < 3; ++k)
          v += hit->barycentric[k] * tpl.embedding_atlas(posed_main.faces(hit->face_index, k), c);
        out.descriptors.at(c, y, x) = v;
      }
    }
  });
  return out;
}

}  // namespace quadfit::render
