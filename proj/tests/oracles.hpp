// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used as oracles by the test suites.
// These deliberately recompute results through different code paths than the
// library (homogeneous 4x4 pipelines, per-element loops, Eigen's own
// rotation types) so they can catch sign/convention slips.

#ifndef INHAND_TESTS_ORACLES_HPP
#define INHAND_TESTS_ORACLES_HPP

#include <Eigen/Geometry>

#include "inhand/core.hpp"
#include "inhand/hand_model.hpp"
#include "inhand/hand_tracking.hpp"

namespace oracles {

using namespace inhand;

/// Projection via explicit 4x4 homogeneous matrices.
inline Vec2 project_homogeneous(const Mat3& k, const Mat3& r, const Vec3& t, const Vec3& p) {
  Mat4 extr = Mat4::Identity();
  extr.topLeftCorner<3, 3>() = r;
  extr.topRightCorner<3, 1>() = t;
  Eigen::Matrix<double, 3, 4> proj = Eigen::Matrix<double, 3, 4>::Zero();
  proj.topLeftCorner<3, 3>() = k;
  Vec4 ph(p.x(), p.y(), p.z(), 1.0);
  Vec3 h = proj * (extr * ph);
  return Vec2(h.x() / h.z(), h.y() / h.z());
}

/// Forward kinematics as a plain chain of explicit 4x4 matrices.
inline JointArray fk_homogeneous(const Skeleton& skel, const HandShape& shape,
                                 const HandPose& pose, const RigidTransform& root) {
  auto to_mat4 = [](const Mat3& r, const Vec3& t) {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = r;
    m.topRightCorner<3, 1>() = t;
    return m;
  };
  std::array<Mat4, kNumJoints> world;
  JointArray joints;
  for (int i = 0; i < kNumJoints; ++i) {
    double s = skel.shape_groups[i] >= 0 ? shape.scales[skel.shape_groups[i]] : 1.0;
    Mat3 rot = Mat3::Identity();
    if (skel.pose_index[i] >= 0) {
      Vec3 aa = pose.rotation(skel.pose_index[i]);
      double angle = aa.norm();
      rot = angle < 1e-14
                ? Mat3::Identity()
                : Eigen::AngleAxisd(angle, aa / angle).toRotationMatrix();
    }
    Mat4 local = to_mat4(rot, s * skel.offsets[i]);
    Mat4 parent = skel.parents[i] >= 0 ? world[skel.parents[i]]
                                       : to_mat4(root.rotation, root.translation);
    world[i] = parent * local;
    joints[i] = world[i].topRightCorner<3, 1>();
  }
  return joints;
}

/// Rotation via Eigen's AngleAxis (independent of the library's rodrigues).
inline Vec3 rotate_angle_axis(const Vec3& axis_angle, const Vec3& p) {
  double angle = axis_angle.norm();
  if (angle < 1e-14) return p;
  return Eigen::AngleAxisd(angle, axis_angle / angle) * p;
}

/// Reprojection energy as a naive per-point loop.
inline double energy_2d_loop(const HandSequenceParams& params, const KeypointObservations& obs,
                             const Camera& camera) {
  double e = 0.0;
  for (std::size_t t = 0; t < obs.frames.size(); ++t) {
    JointArray joints = forward_kinematics(params.shape, params.pose, params.frames[t].root);
    for (int j = 0; j < kNumJoints; ++j) {
      const Vec3& ob = obs.frames[t].points[j];
      if (ob.z() <= 0.0) continue;
      Vec3 pc = camera.extrinsics.rotation * joints[j] + camera.extrinsics.translation;
      if (pc.z() <= 0.0) {
        e += ob.z() * kBehindCameraPenalty;
        continue;
      }
      double u = camera.intrinsics(0, 0) * pc.x() / pc.z() + camera.intrinsics(0, 2);
      double v = camera.intrinsics(1, 1) * pc.y() / pc.z() + camera.intrinsics(1, 2);
      double du = u - ob.x(), dv = v - ob.y();
      e += ob.z() * (du * du + dv * dv);
    }
  }
  return e;
}

inline double energy_temporal_loop(const HandSequenceParams& params) {
  double e = 0.0;
  for (std::size_t t = 1; t < params.frames.size(); ++t) {
    double fr = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double d = params.frames[t].root.rotation(i, j) - params.frames[t - 1].root.rotation(i, j);
        fr += d * d;
      }
    e += std::sqrt(fr);
    double tt = 0.0;
    for (int i = 0; i < 3; ++i) {
      double d = params.frames[t].root.translation[i] - params.frames[t - 1].root.translation[i];
      tt += d * d;
    }
    e += std::sqrt(tt);
  }
  return e;
}

inline double energy_reg_loop(const HandSequenceParams& params) {
  double per = 0.0;
  for (int i = 0; i < 45; ++i) per += params.pose.joint_rotations[i] * params.pose.joint_rotations[i];
  for (int i = 0; i < 10; ++i) {
    double d = params.shape.scales[i] - 1.0;
    per += d * d;
  }
  return per * static_cast<double>(params.frames.size());
}

/// Ray/sphere entry and exit via the textbook quadratic formula on the
/// unnormalized polynomial (different arrangement than the library).
inline bool ray_sphere_quadratic(const Vec3& o, const Vec3& d, const Vec3& c, double r,
                                 double* t0, double* t1) {
  double a = d.dot(d);
  double b = 2.0 * d.dot(o - c);
  double cc = (o - c).dot(o - c) - r * r;
  double disc = b * b - 4.0 * a * cc;
  if (disc < 0.0) return false;
  double sq = std::sqrt(disc);
  *t0 = (-b - sq) / (2.0 * a);
  *t1 = (-b + sq) / (2.0 * a);
  return true;
}

}  // namespace oracles

#endif  // INHAND_TESTS_ORACLES_HPP
