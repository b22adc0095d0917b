#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/fit/fit_scene.hpp"
#include "quadfit/harness/synth.hpp"

#include <nlohmann/json.hpp>

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace quadfit::cli {

/// Union of everything the commands need. Parsed from a flat `key = value`
/// file; unknown keys are rejected so typos cannot silently pick defaults.
struct RunConfig {
  harness::SceneConfig scene;  // synth command (includes the template build)
  fit::FitConfig fit;          // fit + init-pose commands
  int eval_samples = 32;       // ray samples for eval and render commands
  uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    scene.validate();
    fit.validate();
    if (fit.epsilon == 0)
      throw ConfigError(
          "config key 'fit.epsilon': must be nonzero (negative selects 0.05 x template radius)");
    if (fit.objective.render.n_samples < 2)
      throw ConfigError("config key 'fit.render_samples': need >= 2 ray samples");
    if (eval_samples < 2)
      throw ConfigError("config key 'eval.render_samples': need >= 2 ray samples");
    if (threads < 1) throw ConfigError("config key 'threads': must be >= 1");
  }
};

namespace detail {

enum class KeyKind { Int, Real, Seed };

struct KeySpec {
  const char* name;
  KeyKind kind;
  const char* desc;  // includes the unit
  void* (*ref)(RunConfig&);
};

inline const std::vector<KeySpec>& key_table() {
  using K = KeyKind;
#define QF_KEY(NAME, KIND, FIELD, DESC) \
  {NAME, KIND, DESC, +[](RunConfig& c) -> void* { return &(c.FIELD); }}
  static const std::vector<KeySpec> table = {
      QF_KEY("seed", K::Seed, seed, "global random seed; every stochastic step derives from it"),
      QF_KEY("threads", K::Int, threads, "worker thread cap for parallel stages"),
      QF_KEY("eval.render_samples", K::Int, eval_samples,
             "ray samples per pixel for the eval and render commands"),

      QF_KEY("scene.n_frames", K::Int, scene.n_frames, "frames in the generated sequence"),
      QF_KEY("scene.size", K::Int, scene.size, "square image resolution, pixels"),
      QF_KEY("scene.focal_scale", K::Real, scene.focal_scale,
             "focal length as a fraction of the image size"),
      QF_KEY("scene.orbit_radius", K::Real, scene.orbit_radius, "camera orbit radius, world units"),
      QF_KEY("scene.orbit_height", K::Real, scene.orbit_height, "camera height, world units"),
      QF_KEY("scene.orbit_jitter", K::Real, scene.orbit_jitter,
             "camera position noise, fraction of the orbit radius"),
      QF_KEY("scene.look_jitter", K::Real, scene.look_jitter,
             "look-at target noise, world units"),
      QF_KEY("scene.beta_range", K::Real, scene.beta_range,
             "bound on the sampled ground-truth shape coefficients"),
      QF_KEY("scene.gait_amplitude", K::Real, scene.gait_amplitude, "leg swing amplitude, radians"),
      QF_KEY("scene.gait_cycles", K::Real, scene.gait_cycles, "gait cycles across the sequence"),
      QF_KEY("scene.head_amplitude", K::Real, scene.head_amplitude,
             "neck and head swing amplitude, radians"),
      QF_KEY("scene.tail_amplitude", K::Real, scene.tail_amplitude, "tail swing amplitude, radians"),
      QF_KEY("scene.root_bob", K::Real, scene.root_bob,
             "vertical root bob, fraction of the template radius"),
      QF_KEY("scene.max_joint_delta", K::Real, scene.max_joint_delta,
             "continuity bound on per-frame joint change, radians"),
      QF_KEY("scene.tex_res", K::Int, scene.tex_res, "ground-truth texture plane resolution, texels"),
      QF_KEY("scene.tex_channels", K::Int, scene.tex_channels, "ground-truth texture feature channels"),
      QF_KEY("scene.tex_width", K::Int, scene.tex_width, "ground-truth texture decoder width"),
      QF_KEY("scene.tex_L_dir", K::Int, scene.tex_L_dir,
             "ground-truth texture view-direction encoding octaves"),
      QF_KEY("scene.epsilon_frac", K::Real, scene.epsilon_frac,
             "shell half-thickness, fraction of the template radius"),
      QF_KEY("scene.render_samples", K::Int, scene.render_samples,
             "ray samples per pixel when rendering observations"),
      QF_KEY("scene.sigma_kp", K::Real, scene.sigma_kp, "keypoint detection noise, pixels"),
      QF_KEY("scene.embed_noise", K::Real, scene.embed_noise,
             "additive descriptor noise, standard deviation"),
      QF_KEY("scene.outlier_frac", K::Real, scene.outlier_frac,
             "fraction of descriptor pixels replaced by a random vertex"),
      QF_KEY("scene.train_block", K::Int, scene.train_block, "train block length, frames"),
      QF_KEY("scene.test_block", K::Int, scene.test_block, "test block length, frames"),

      QF_KEY("template.subdivision", K::Int, scene.quadruped.subdivision,
             "template sphere subdivision level"),
      QF_KEY("template.d_beta", K::Int, scene.quadruped.d_beta, "shape basis size"),
      QF_KEY("template.d_embed", K::Int, scene.quadruped.d_embed, "surface descriptor dimension"),
      QF_KEY("template.scale", K::Real, scene.quadruped.scale, "overall template size, world units"),

      QF_KEY("fit.iterations", K::Int, fit.iterations, "optimization steps"),
      QF_KEY("fit.minibatch", K::Int, fit.minibatch, "frames per step"),
      QF_KEY("fit.warmup_frac", K::Real, fit.warmup_frac,
             "leading fraction of steps with the photo term off"),
      QF_KEY("fit.lr_pose", K::Real, fit.lr_pose, "learning rate, pose model"),
      QF_KEY("fit.lr_beta", K::Real, fit.lr_beta, "learning rate, shape coefficients"),
      QF_KEY("fit.lr_psi", K::Real, fit.lr_psi, "learning rate, texture field"),
      QF_KEY("fit.epsilon", K::Real, fit.epsilon,
             "shell half-thickness, world units; negative = 0.05 x template radius"),
      QF_KEY("fit.field_res", K::Int, fit.field_res, "fitted texture plane resolution, texels"),
      QF_KEY("fit.field_channels", K::Int, fit.field_channels, "fitted texture feature channels"),
      QF_KEY("fit.field_width", K::Int, fit.field_width, "fitted texture decoder width"),
      QF_KEY("fit.field_L_dir", K::Int, fit.field_L_dir,
             "fitted texture view-direction encoding octaves"),
      QF_KEY("fit.pose_L", K::Int, fit.pose_L, "timestamp encoding octaves of the pose model"),
      QF_KEY("fit.pose_width", K::Int, fit.pose_width, "pose model hidden width"),
      QF_KEY("fit.match_stride", K::Int, fit.match_stride,
             "pixel stride for descriptor correspondences"),
      QF_KEY("fit.chamfer_max_points", K::Int, fit.chamfer_max_points,
             "mask pixel budget of the silhouette term"),
      QF_KEY("fit.render_samples", K::Int, fit.objective.render.n_samples,
             "ray samples per pixel during fitting"),
      QF_KEY("fit.huber_delta", K::Real, fit.objective.huber_delta,
             "robust threshold of the reprojection terms, pixels"),
      QF_KEY("fit.photo_grad_weight", K::Real, fit.objective.photo_grad_weight,
             "image-gradient term weight inside the photo loss"),
      QF_KEY("fit.checkpoint_every", K::Int, fit.checkpoint_every, "iterations between checkpoints"),
      QF_KEY("fit.divergence_check_every", K::Int, fit.divergence_check_every,
             "iterations between divergence checks"),
      QF_KEY("fit.divergence_factor", K::Real, fit.divergence_factor,
             "abort when the objective exceeds this multiple of its initial value"),

      QF_KEY("weights.embed", K::Real, fit.weights.embed, "descriptor correspondence loss weight"),
      QF_KEY("weights.keypoint", K::Real, fit.weights.keypoint, "keypoint reprojection loss weight"),
      QF_KEY("weights.photo", K::Real, fit.weights.photo, "photometric loss weight"),
      QF_KEY("weights.mask", K::Real, fit.weights.mask, "silhouette chamfer loss weight"),
      QF_KEY("weights.arap", K::Real, fit.weights.arap, "local rigidity loss weight"),
      QF_KEY("weights.edge", K::Real, fit.weights.edge, "edge length preservation loss weight"),

      QF_KEY("init.stride", K::Int, fit.init.stride,
             "pixel stride for stage-1 dense correspondences"),
      QF_KEY("init.ransac_iters", K::Int, fit.init.ransac_iters, "consensus rounds per frame"),
      QF_KEY("init.threshold_px", K::Real, fit.init.threshold_px, "inlier threshold, pixels"),
      QF_KEY("init.descriptor_keep_quantile", K::Real, fit.init.descriptor_keep_quantile,
             "fraction of best-matching correspondences kept"),
      QF_KEY("init.min_inlier_ratio", K::Real, fit.init.min_inlier_ratio,
             "frames below this ratio do not vote for the shared root"),
  };
#undef QF_KEY
  return table;
}

inline const KeySpec* find_key(const std::string& name) {
  for (const auto& k : key_table())
    if (name == k.name) return &k;
  return nullptr;
}

inline std::string trimmed(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  const auto b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

inline long long parse_int(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || errno != 0 || end != v.c_str() + v.size())
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as an integer");
  return x;
}

inline uint64_t parse_seed(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  if (!v.empty() && v[0] == '-')
    throw ConfigError("config key '" + key + "': seed must be non-negative");
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || errno != 0 || end != v.c_str() + v.size())
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as an integer");
  return x;
}

inline double parse_real(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || errno != 0 || end != v.c_str() + v.size() || !std::isfinite(x))
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  return x;
}

inline void assign(RunConfig& c, const KeySpec& spec, const std::string& value) {
  switch (spec.kind) {
    case KeyKind::Int: {
      const long long x = parse_int(spec.name, value);
      if (x < INT_MIN || x > INT_MAX)
        throw ConfigError(std::string("config key '") + spec.name + "': out of range");
      *static_cast<int*>(spec.ref(c)) = static_cast<int>(x);
      break;
    }
    case KeyKind::Seed:
      *static_cast<uint64_t*>(spec.ref(c)) = parse_seed(spec.name, value);
      break;
    case KeyKind::Real:
      *static_cast<double*>(spec.ref(c)) = parse_real(spec.name, value);
      break;
  }
}

/// Shortest decimal that parses back to the same double.
inline std::string format_value(RunConfig& c, const KeySpec& spec) {
  switch (spec.kind) {
    case KeyKind::Int:
      return std::to_string(*static_cast<int*>(spec.ref(c)));
    case KeyKind::Seed:
      return std::to_string(*static_cast<uint64_t*>(spec.ref(c)));
    case KeyKind::Real:
      return nlohmann::json(*static_cast<double*>(spec.ref(c))).dump();
  }
  return {};
}

}  // namespace detail

/// Flat `key = value` lines; '#' starts a comment, blank lines are skipped.
/// Unknown and duplicate keys are errors; the result is validated.
inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trimmed(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trimmed(line.substr(0, eq));
    const std::string value = detail::trimmed(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
    const auto* spec = detail::find_key(key);
    if (!spec) throw ConfigError("config: unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("config: duplicate key '" + key + "'");
    detail::assign(c, *spec, value);
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

/// Every key with its effective value; parsing this text reproduces `c`.
inline std::string resolved_config_text(const RunConfig& c) {
  RunConfig copy = c;
  std::ostringstream out;
  for (const auto& spec : detail::key_table())
    out << spec.name << " = " << detail::format_value(copy, spec) << "\n";
  return out.str();
}

/// Help block: one line per key with its default and unit.
inline std::string describe_keys() {
  RunConfig defaults;
  std::ostringstream out;
  out << "config keys (flat `key = value` file, '#' comments):\n";
  for (const auto& spec : detail::key_table()) {
    std::string head = std::string("  ") + spec.name + " = " + detail::format_value(defaults, spec);
    if (head.size() < 40) head.resize(40, ' ');
    out << head << "  " << spec.desc << "\n";
  }
  return out.str();
}

}  // namespace quadfit::cli
