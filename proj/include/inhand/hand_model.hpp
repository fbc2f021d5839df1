// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Simplified articulated hand: 21 joints (wrist + 4 per finger), pose as 15
// per-joint axis-angle rotations, shape as 10 grouped bone-length scales.
// Stands in for a licensed parametric hand model behind the same interface:
// the tracker only consumes joint positions and the pose/shape split.

#ifndef INHAND_HAND_MODEL_HPP
#define INHAND_HAND_MODEL_HPP

#include <array>
#include <fstream>
#include <string>

#include <json.hpp>

#include "inhand/geometry.hpp"

namespace inhand {

inline constexpr int kNumJoints = 21;
inline constexpr int kNumArticulated = 15;  // mcp/pip/dip for 5 fingers
inline constexpr int kNumShapeGroups = 10;  // proximal/distal group per finger

/// Canonical skeleton: names, kinematic parents, rest offsets (meters) and
/// the shape group that scales each joint's offset.
struct Skeleton {
  std::array<std::string, kNumJoints> names;
  std::array<int, kNumJoints> parents;       // -1 for the wrist
  std::array<Vec3, kNumJoints> offsets;      // from parent, in parent frame
  std::array<int, kNumJoints> shape_groups;  // -1 for the wrist
  std::array<int, kNumJoints> pose_index;    // -1 when the joint has no rotation
  std::string version;
};

/// Fixed canonical proportions, shipped with the repo as a versioned fixture
/// (data/hand_skeleton_v1.json mirrors these constants).
inline const Skeleton& canonical_skeleton() {
  static const Skeleton skel = [] {
    Skeleton s;
    s.version = "v1";
    const char* fingers[5] = {"thumb", "index", "middle", "ring", "pinky"};
    // Per finger: mcp offset from wrist, then pip/dip/tip offsets down the chain.
    const Vec3 chain[5][4] = {
        {{0.032, 0.022, -0.006}, {0.024, 0.028, 0.000}, {0.018, 0.022, 0.000}, {0.014, 0.018, 0.000}},
        {{0.024, 0.084, 0.000}, {0.000, 0.042, 0.000}, {0.000, 0.026, 0.000}, {0.000, 0.022, 0.000}},
        {{0.004, 0.086, 0.000}, {0.000, 0.046, 0.000}, {0.000, 0.029, 0.000}, {0.000, 0.024, 0.000}},
        {{-0.014, 0.082, 0.000}, {0.000, 0.042, 0.000}, {0.000, 0.027, 0.000}, {0.000, 0.022, 0.000}},
        {{-0.030, 0.074, 0.000}, {0.000, 0.032, 0.000}, {0.000, 0.021, 0.000}, {0.000, 0.018, 0.000}}};
    const char* parts[4] = {"mcp", "pip", "dip", "tip"};
    s.names[0] = "wrist";
    s.parents[0] = -1;
    s.offsets[0] = Vec3::Zero();
    s.shape_groups[0] = -1;
    s.pose_index[0] = -1;
    for (int f = 0; f < 5; ++f) {
      for (int j = 0; j < 4; ++j) {
        int idx = 1 + f * 4 + j;
        s.names[idx] = std::string(fingers[f]) + "_" + parts[j];
        s.parents[idx] = (j == 0) ? 0 : idx - 1;
        s.offsets[idx] = chain[f][j];
        s.shape_groups[idx] = 2 * f + (j < 2 ? 0 : 1);
        s.pose_index[idx] = (j < 3) ? 3 * f + j : -1;
      }
    }
    return s;
  }();
  return skel;
}

inline nlohmann::json skeleton_to_json(const Skeleton& s) {
  nlohmann::json joints = nlohmann::json::array();
  for (int i = 0; i < kNumJoints; ++i) {
    joints.push_back({{"name", s.names[i]},
                      {"parent", s.parents[i]},
                      {"offset", {s.offsets[i].x(), s.offsets[i].y(), s.offsets[i].z()}},
                      {"shape_group", s.shape_groups[i]},
                      {"pose_index", s.pose_index[i]}});
  }
  return nlohmann::json{{"version", s.version}, {"joints", joints}};
}

inline Skeleton skeleton_from_json(const nlohmann::json& j) {
  Skeleton s;
  s.version = j.at("version").get<std::string>();
  const auto& joints = j.at("joints");
  if (joints.size() != kNumJoints)
    throw std::runtime_error("skeleton fixture must define exactly 21 joints");
  for (int i = 0; i < kNumJoints; ++i) {
    const auto& jj = joints[i];
    s.names[i] = jj.at("name").get<std::string>();
    s.parents[i] = jj.at("parent").get<int>();
    auto o = jj.at("offset").get<std::array<double, 3>>();
    s.offsets[i] = Vec3(o[0], o[1], o[2]);
    s.shape_groups[i] = jj.at("shape_group").get<int>();
    s.pose_index[i] = jj.at("pose_index").get<int>();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Grouped bone-length scales. All ones reproduces the canonical skeleton.
struct HandShape {
  Eigen::Matrix<double, kNumShapeGroups, 1> scales =
      Eigen::Matrix<double, kNumShapeGroups, 1>::Ones();

  bool is_valid() const {
    return (scales.array() > 0.5).all() && (scales.array() < 2.0).all();
  }
};

/// Axis-angle rotation per articulated joint (3 per finger, wrist excluded).
struct HandPose {
  Eigen::Matrix<double, 3 * kNumArticulated, 1> joint_rotations =
      Eigen::Matrix<double, 3 * kNumArticulated, 1>::Zero();

  Vec3 rotation(int articulated_index) const {
    return joint_rotations.segment<3>(3 * articulated_index);
  }

  bool is_valid() const {
    for (int i = 0; i < kNumArticulated; ++i)
      if (rotation(i).norm() >= kPi) return false;
    return true;
  }
};

/// Per-frame rigid transform of the hand root (the frame's R_t, T_t).
struct HandFrameState {
  RigidTransform root;
};

// ---------------------------------------------------------------------------
// Forward kinematics
// ---------------------------------------------------------------------------

using JointArray = std::array<Vec3, kNumJoints>;

/// Joint positions for (shape, pose) under a root transform. When
/// world_transforms is non-null the per-joint world frames are stored there
/// (used by the Jacobian assembly).
inline JointArray forward_kinematics(const Skeleton& skel, const HandShape& shape,
                                     const HandPose& pose, const RigidTransform& root,
                                     std::array<RigidTransform, kNumJoints>* world_transforms = nullptr) {
  JointArray joints;
  std::array<RigidTransform, kNumJoints> world;
  for (int i = 0; i < kNumJoints; ++i) {
    double scale = skel.shape_groups[i] >= 0 ? shape.scales[skel.shape_groups[i]] : 1.0;
    RigidTransform local;
    local.translation = scale * skel.offsets[i];
    if (skel.pose_index[i] >= 0) local.rotation = rodrigues(pose.rotation(skel.pose_index[i]));
    const RigidTransform& parent = skel.parents[i] >= 0 ? world[skel.parents[i]] : root;
    world[i] = parent.compose(local);
    joints[i] = world[i].translation;
  }
  if (world_transforms) *world_transforms = world;
  return joints;
}

inline JointArray forward_kinematics(const HandShape& shape, const HandPose& pose,
                                     const RigidTransform& root) {
  return forward_kinematics(canonical_skeleton(), shape, pose, root);
}

/// True when a is on the kinematic chain from the wrist to b (inclusive).
inline bool is_ancestor_or_self(const Skeleton& skel, int a, int b) {
  int cur = b;
  while (cur >= 0) {
    if (cur == a) return true;
    cur = skel.parents[cur];
  }
  return false;
}

/// Jacobians of all joint positions (stacked 63-vector, xyz per joint) with
/// respect to pose (45), shape (10) and the root parameterized as an
/// axis-angle delta composed on the left plus translation (6). The supplied
/// root must already fold the delta in: R = exp(root_delta) * R_base.
struct FkJacobians {
  Eigen::Matrix<double, 3 * kNumJoints, 3 * kNumArticulated> d_pose;
  Eigen::Matrix<double, 3 * kNumJoints, kNumShapeGroups> d_shape;
  Eigen::Matrix<double, 3 * kNumJoints, 6> d_root;  // [axis-angle delta | translation]
};

inline FkJacobians fk_jacobians(const Skeleton& skel, const HandShape& shape,
                                const HandPose& pose, const RigidTransform& root,
                                const Vec3& root_delta = Vec3::Zero()) {
  std::array<RigidTransform, kNumJoints> world;
  JointArray joints = forward_kinematics(skel, shape, pose, root, &world);

  FkJacobians jac;
  jac.d_pose.setZero();
  jac.d_shape.setZero();
  jac.d_root.setZero();

  // Root: joint = exp(delta) * v + T with v = exp(delta)^T (joint - T).
  Mat3 r_delta_t = rodrigues(root_delta).transpose();
  for (int m = 0; m < kNumJoints; ++m) {
    Vec3 v = r_delta_t * (joints[m] - root.translation);
    jac.d_root.block<3, 3>(3 * m, 0) = rotate_point_jacobian(root_delta, v);
    jac.d_root.block<3, 3>(3 * m, 3) = Mat3::Identity();
  }

  // Shape: the offset at joint j shifts every joint whose chain passes
  // through j by the offset rotated into world coordinates.
  for (int j = 0; j < kNumJoints; ++j) {
    int g = skel.shape_groups[j];
    if (g < 0) continue;
    const RigidTransform& parent = skel.parents[j] >= 0 ? world[skel.parents[j]] : root;
    Vec3 contrib = parent.rotation * skel.offsets[j];
    for (int m = j; m < kNumJoints; ++m) {
      if (!is_ancestor_or_self(skel, j, m)) continue;
      jac.d_shape.block<3, 1>(3 * m, g) += contrib;
    }
  }

  // Pose: joint_m = parent_j o Tr(scaled offset) o R(theta_j) o s, so
  // d/dtheta = R(parent_j) * d(R(theta_j) s)/dtheta with s in joint-j frame.
  for (int j = 0; j < kNumJoints; ++j) {
    int pi = skel.pose_index[j];
    if (pi < 0) continue;
    Vec3 theta = pose.rotation(pi);
    for (int m = j + 1; m < kNumJoints; ++m) {
      if (!is_ancestor_or_self(skel, j, m)) continue;
      Vec3 s = world[j].inverse().apply(joints[m]);
      const RigidTransform& parent = skel.parents[j] >= 0 ? world[skel.parents[j]] : root;
      jac.d_pose.block<3, 3>(3 * m, 3 * pi) = parent.rotation * rotate_point_jacobian(theta, s);
    }
  }
  return jac;
}

// ---------------------------------------------------------------------------
// Bounding sphere (near/far bounds for rays)
// ---------------------------------------------------------------------------

/// Ritter's approximate smallest enclosing sphere, radius scaled by margin.
inline SphereBounds keypoint_bounding_sphere(const Vec3* points, int count,
                                             double margin = 1.5) {
  if (count <= 0) throw std::invalid_argument("bounding sphere needs at least one point");
  // Pick the two roughly-extremal points, then grow.
  int a = 0;
  for (int i = 1; i < count; ++i)
    if ((points[i] - points[0]).squaredNorm() > (points[a] - points[0]).squaredNorm()) a = i;
  int b = a;
  for (int i = 0; i < count; ++i)
    if ((points[i] - points[a]).squaredNorm() > (points[b] - points[a]).squaredNorm()) b = i;
  Vec3 center = 0.5 * (points[a] + points[b]);
  double radius = 0.5 * (points[a] - points[b]).norm();
  for (int i = 0; i < count; ++i) {
    double d = (points[i] - center).norm();
    if (d > radius) {
      double new_radius = 0.5 * (radius + d);
      center += (d - new_radius) / d * (points[i] - center);
      radius = new_radius;
    }
  }
  return {center, radius * margin};
}

inline SphereBounds keypoint_bounding_sphere(const JointArray& joints, double margin = 1.5) {
  return keypoint_bounding_sphere(joints.data(), kNumJoints, margin);
}

}  // namespace inhand

#endif  // INHAND_HAND_MODEL_HPP
