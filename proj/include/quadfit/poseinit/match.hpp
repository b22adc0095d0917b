#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/image.hpp"
#include "quadfit/poseinit/pnp.hpp"
#include "quadfit/tmpl/skinned_template.hpp"

#include <algorithm>
#include <vector>

namespace quadfit::poseinit {

/// Attaches the nearest-atlas-descriptor vertex to every stride-th foreground
/// pixel of the embedding map.
inline std::vector<Correspondence2D3D> match_dense(const Image& embedding_map, const Image& mask,
                                                   const tmpl::SkinnedTemplate& tpl, int stride) {
  if (stride < 1) throw ConfigError("match_dense: stride must be >= 1");
  if (mask.channels != 1) throw DimensionMismatch("match_dense: mask must be 1-channel");
  if (embedding_map.height != mask.height || embedding_map.width != mask.width)
    throw ResolutionMismatch("match_dense: map/mask size");
  if (embedding_map.channels != tpl.d_embed())
    throw DimensionMismatch("match_dense: map channels vs template descriptor size");

  const int h = mask.height, w = mask.width, de = embedding_map.channels;
  bool any_foreground = false;
  for (int y = 0; y < h && !any_foreground; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(0, y, x) > 0.5) {
        any_foreground = true;
        break;
      }
  if (!any_foreground) throw EmptyMask("match_dense: mask has no foreground");

  std::vector<Correspondence2D3D> out;
  VecX query(de);
  for (int y = 0; y < h; y += stride) {
    for (int x = 0; x < w; x += stride) {
      if (mask.at(0, y, x) <= 0.5) continue;
      for (int c = 0; c < de; ++c) query[c] = embedding_map.at(c, y, x);
      const int k = tmpl::embedding_nn(tpl, query);
      const double dist = (tpl.embedding_atlas.row(k).transpose() - query).norm();
      out.push_back({Vec2(x + 0.5, y + 0.5), k, dist});
    }
  }
  return out;
}

/// Keeps matches whose descriptor distance is at or below the given quantile
/// of the observed distances (order preserved).
inline std::vector<Correspondence2D3D> filter_by_descriptor_distance(
    const std::vector<Correspondence2D3D>& corrs, double keep_quantile = 0.9) {
  if (!(keep_quantile > 0.0) || keep_quantile > 1.0)
    throw ConfigError("correspondence filter: quantile must be in (0, 1]");
  if (corrs.empty()) return {};
  std::vector<double> dists;
  dists.reserve(corrs.size());
  for (const auto& c : corrs) dists.push_back(c.descriptor_distance);
  std::sort(dists.begin(), dists.end());
  const auto cut = static_cast<size_t>(keep_quantile * static_cast<double>(dists.size() - 1));
  const double threshold = dists[cut];
  std::vector<Correspondence2D3D> out;
  for (const auto& c : corrs)
    if (c.descriptor_distance <= threshold) out.push_back(c);
  return out;
}

}  // namespace quadfit::poseinit
