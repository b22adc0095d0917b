#pragma once

#include "quadfit/cam/rigid3.hpp"
#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"
#include "quadfit/geom/trimesh.hpp"

#include <string>
#include <vector>

namespace quadfit::tmpl {

struct Skeleton {
  std::vector<int> parents;  // parents[0] == -1; parents[j] < j
  std::vector<std::string> names;

  int n_joints() const { return static_cast<int>(parents.size()); }

  void validate() const {
    if (parents.empty() || parents[0] != -1) throw ConfigError("skeleton: joint 0 must be the root");
    if (names.size() != parents.size()) throw DimensionMismatch("skeleton: names/parents size");
    for (size_t j = 1; j < parents.size(); ++j)
      if (parents[j] < 0 || parents[j] >= static_cast<int>(j))
        throw ConfigError("skeleton: parents must precede children (single root, acyclic)");
  }
};

struct PoseParams {
  cam::Rigid3 root;
  VecX joint_angles;  // axis-angle triples for joints 1..n-1

  static PoseParams rest(int n_joints) {
    PoseParams p;
    p.joint_angles = VecX::Zero(3 * (n_joints - 1));
    return p;
  }
};

struct ShapeParams {
  VecX coeffs;           // blendshape weights
  VecX bone_log_scales;  // empty = disabled, else one per joint

  static ShapeParams zeros(int d_beta) {
    ShapeParams s;
    s.coeffs = VecX::Zero(d_beta);
    return s;
  }
};

struct SkinnedTemplate {
  geom::TriMesh rest_mesh;
  std::vector<MatX3> shape_basis;  // per-vertex displacement fields
  Skeleton skeleton;
  MatX skin_weights;     // n_verts x n_joints, rows sum to 1
  MatX joint_regressor;  // n_joints x n_verts
  MatX embedding_atlas;  // n_verts x d_embed
  std::vector<int> keypoint_joints;

  int n_vertices() const { return rest_mesh.n_vertices(); }
  int n_joints() const { return skeleton.n_joints(); }
  int d_beta() const { return static_cast<int>(shape_basis.size()); }
  int d_embed() const { return static_cast<int>(embedding_atlas.cols()); }
  int d_pose() const { return 3 * (n_joints() - 1); }

  void validate() const {
    rest_mesh.validate();
    skeleton.validate();
    const int nv = n_vertices(), nj = n_joints();
    if (skin_weights.rows() != nv || skin_weights.cols() != nj)
      throw DimensionMismatch("template: skin_weights shape");
    for (int k = 0; k < nv; ++k) {
      if (skin_weights.row(k).minCoeff() < 0) throw ConfigError("template: negative skin weight");
      if (std::abs(skin_weights.row(k).sum() - 1.0) > 1e-6)
        throw ConfigError("template: skin weight row does not sum to 1");
    }
    if (joint_regressor.rows() != nj || joint_regressor.cols() != nv)
      throw DimensionMismatch("template: joint_regressor shape");
    for (const auto& basis : shape_basis)
      if (basis.rows() != nv) throw DimensionMismatch("template: shape basis size");
    if (embedding_atlas.rows() != nv) throw DimensionMismatch("template: atlas size");
    for (int j : keypoint_joints)
      if (j < 0 || j >= nj) throw IndexError("template: keypoint joint out of range");
  }
};

inline MatX3 regress_joints(const SkinnedTemplate& tpl, const MatX3& vertices) {
  if (vertices.rows() != tpl.joint_regressor.cols())
    throw DimensionMismatch("regress_joints: vertex count");
  return tpl.joint_regressor * vertices;
}

/// Forward intermediates reused by the backward pass.
struct LbsCache {
  MatX3 shaped;
  MatX3 joints;  // regressed from shaped vertices
  std::vector<Mat3> R_local;
  std::vector<Mat3> G_R;
  std::vector<Vec3> G_t;
  std::vector<Vec3> offset;  // scaled rest bone vectors
  MatX blend;                // n_verts x 12: rows of blended [R | t]
  MatX3 skinned;             // before the root transform
  MatX3 posed;
};

/// Shape blendshapes, joint regression, forward kinematics, linear blend
/// skinning, root transform last. `rest_override` substitutes the vertices
/// that get shaped and skinned (e.g. shell vertices sharing the main mesh's
/// weights); joints are always regressed from the main shaped mesh.
inline MatX3 lbs_deform(const SkinnedTemplate& tpl, const ShapeParams& beta,
                        const PoseParams& theta, LbsCache* cache_out = nullptr,
                        const MatX3* rest_override = nullptr) {
  const int nv = tpl.n_vertices(), nj = tpl.n_joints();
  if (beta.coeffs.size() != tpl.d_beta()) throw DimensionMismatch("lbs: beta size");
  if (theta.joint_angles.size() != tpl.d_pose()) throw DimensionMismatch("lbs: joint angle size");
  if (beta.bone_log_scales.size() != 0 && beta.bone_log_scales.size() != nj)
    throw DimensionMismatch("lbs: bone scale size");
  if (rest_override && rest_override->rows() != nv)
    throw DimensionMismatch("lbs: rest_override size");
  theta.root.require_valid();

  LbsCache local;
  LbsCache& c = cache_out ? *cache_out : local;

  c.shaped = rest_override ? *rest_override : tpl.rest_mesh.vertices;
  for (int i = 0; i < tpl.d_beta(); ++i) c.shaped += beta.coeffs[i] * tpl.shape_basis[static_cast<size_t>(i)];

  if (rest_override) {
    MatX3 shaped_main = tpl.rest_mesh.vertices;
    for (int i = 0; i < tpl.d_beta(); ++i)
      shaped_main += beta.coeffs[i] * tpl.shape_basis[static_cast<size_t>(i)];
    c.joints = tpl.joint_regressor * shaped_main;
  } else {
    c.joints = tpl.joint_regressor * c.shaped;
  }

  c.R_local.assign(static_cast<size_t>(nj), Mat3::Identity());
  c.G_R.assign(static_cast<size_t>(nj), Mat3::Identity());
  c.G_t.assign(static_cast<size_t>(nj), Vec3::Zero());
  c.offset.assign(static_cast<size_t>(nj), Vec3::Zero());
  c.G_t[0] = c.joints.row(0).transpose();
  for (int j = 1; j < nj; ++j) {
    const int p = tpl.skeleton.parents[static_cast<size_t>(j)];
    c.R_local[static_cast<size_t>(j)] = rodrigues(theta.joint_angles.segment<3>(3 * (j - 1)));
    const double scale =
        beta.bone_log_scales.size() ? std::exp(beta.bone_log_scales[j]) : 1.0;
    c.offset[static_cast<size_t>(j)] =
        scale * (c.joints.row(j) - c.joints.row(p)).transpose();
    c.G_R[static_cast<size_t>(j)] = c.G_R[static_cast<size_t>(p)] * c.R_local[static_cast<size_t>(j)];
    c.G_t[static_cast<size_t>(j)] =
        c.G_R[static_cast<size_t>(p)] * c.offset[static_cast<size_t>(j)] + c.G_t[static_cast<size_t>(p)];
  }

  // skinning transforms A_j = G_j ∘ translate(-joint_j), stacked as rows
  MatX a_stack(nj, 12);
  for (int j = 0; j < nj; ++j) {
    const Mat3& R = c.G_R[static_cast<size_t>(j)];
    const Vec3 t = c.G_t[static_cast<size_t>(j)] - R * c.joints.row(j).transpose();
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 3; ++col) a_stack(j, 3 * r + col) = R(r, col);
    a_stack.block<1, 3>(j, 9) = t.transpose();
  }
  c.blend = tpl.skin_weights * a_stack;  // n_verts x 12

  c.skinned.resize(nv, 3);
  for (int k = 0; k < nv; ++k) {
    const Vec3 v = c.shaped.row(k).transpose();
    for (int r = 0; r < 3; ++r)
      c.skinned(k, r) = c.blend.row(k).segment<3>(3 * r).dot(v) + c.blend(k, 9 + r);
  }

  c.posed = (c.skinned * theta.root.R.transpose()).rowwise() + theta.root.t.transpose();
  return c.posed;
}

struct LbsGrads {
  VecX coeffs;
  VecX bone_log_scales;
  VecX joint_angles;
  Mat3 root_R = Mat3::Zero();  // raw matrix gradient; caller maps to its chart
  Vec3 root_t = Vec3::Zero();
};

/// Reverse-mode gradient of lbs_deform for a given upstream d_posed.
inline void lbs_backward(const SkinnedTemplate& tpl, const ShapeParams& beta,
                         const PoseParams& theta, const LbsCache& c, const MatX3& d_posed,
                         LbsGrads* grads) {
  const int nv = tpl.n_vertices(), nj = tpl.n_joints();
  if (d_posed.rows() != nv) throw DimensionMismatch("lbs_backward: d_posed size");
  grads->coeffs = VecX::Zero(tpl.d_beta());
  grads->bone_log_scales = VecX::Zero(beta.bone_log_scales.size());
  grads->joint_angles = VecX::Zero(tpl.d_pose());

  grads->root_t = d_posed.colwise().sum().transpose();
  grads->root_R = d_posed.transpose() * c.skinned;
  const MatX3 d_skinned = d_posed * theta.root.R;  // rows are (Rᵀ g)ᵀ

  // through the per-vertex blended transforms
  MatX d_blend(nv, 12);
  MatX3 d_shaped = MatX3::Zero(nv, 3);
  for (int k = 0; k < nv; ++k) {
    const Vec3 g = d_skinned.row(k).transpose();
    const Vec3 v = c.shaped.row(k).transpose();
    for (int r = 0; r < 3; ++r) {
      d_blend.row(k).segment<3>(3 * r) = g[r] * v.transpose();
      d_shaped.row(k) += g[r] * c.blend.row(k).segment<3>(3 * r);
    }
    d_blend.block<1, 3>(k, 9) = g.transpose();
  }
  const MatX d_a_stack = tpl.skin_weights.transpose() * d_blend;  // n_joints x 12

  // unpack to dG and d_joints; A_t = G_t - G_R * j  gives the extra terms
  std::vector<Mat3> dG_R(static_cast<size_t>(nj), Mat3::Zero());
  std::vector<Vec3> dG_t(static_cast<size_t>(nj), Vec3::Zero());
  MatX3 d_joints = MatX3::Zero(nj, 3);
  for (int j = 0; j < nj; ++j) {
    Mat3 dA_R;
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 3; ++col) dA_R(r, col) = d_a_stack(j, 3 * r + col);
    const Vec3 dA_t = d_a_stack.block<1, 3>(j, 9).transpose();
    dG_t[static_cast<size_t>(j)] += dA_t;
    dG_R[static_cast<size_t>(j)] += dA_R - dA_t * c.joints.row(j);
    d_joints.row(j) -= (c.G_R[static_cast<size_t>(j)].transpose() * dA_t).transpose();
  }

  // reverse kinematic chain (children stored after parents)
  for (int j = nj - 1; j >= 1; --j) {
    const int p = tpl.skeleton.parents[static_cast<size_t>(j)];
    const Mat3& dGr = dG_R[static_cast<size_t>(j)];
    const Vec3& dGt = dG_t[static_cast<size_t>(j)];
    dG_R[static_cast<size_t>(p)] += dGr * c.R_local[static_cast<size_t>(j)].transpose() +
                                    dGt * c.offset[static_cast<size_t>(j)].transpose();
    dG_t[static_cast<size_t>(p)] += dGt;
    const Mat3 dR_local = c.G_R[static_cast<size_t>(p)].transpose() * dGr;
    grads->joint_angles.segment<3>(3 * (j - 1)) = rotation_matrix_grad_to_axis_angle(
        theta.joint_angles.segment<3>(3 * (j - 1)), c.R_local[static_cast<size_t>(j)], dR_local);
    const Vec3 d_offset = c.G_R[static_cast<size_t>(p)].transpose() * dGt;
    const double scale =
        beta.bone_log_scales.size() ? std::exp(beta.bone_log_scales[j]) : 1.0;
    if (beta.bone_log_scales.size())
      grads->bone_log_scales[j] = c.offset[static_cast<size_t>(j)].dot(d_offset);
    d_joints.row(j) += scale * d_offset.transpose();
    d_joints.row(p) -= scale * d_offset.transpose();
  }
  d_joints.row(0) += dG_t[0].transpose();  // G_t[0] = joint 0 position

  d_shaped += tpl.joint_regressor.transpose() * d_joints;
  for (int i = 0; i < tpl.d_beta(); ++i)
    grads->coeffs[i] = d_shaped.cwiseProduct(tpl.shape_basis[static_cast<size_t>(i)]).sum();
}

/// Nearest template vertex by descriptor distance, lowest index on ties.
inline int embedding_nn(const SkinnedTemplate& tpl, Eigen::Ref<const VecX> query) {
  if (query.size() != tpl.d_embed()) throw DimensionMismatch("embedding_nn: query size");
  int best = 0;
  double best_d2 = (tpl.embedding_atlas.row(0).transpose() - query).squaredNorm();
  for (int k = 1; k < tpl.n_vertices(); ++k) {
    const double d2 = (tpl.embedding_atlas.row(k).transpose() - query).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

}  // namespace quadfit::tmpl
