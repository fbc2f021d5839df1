// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Rigid transforms, pinhole cameras, rays, and the progress-windowed
// positional encoding shared by the tracking and reconstruction stages.

#ifndef INHAND_GEOMETRY_HPP
#define INHAND_GEOMETRY_HPP

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>

#include <json.hpp>

#include "inhand/core.hpp"

namespace inhand {

// ---------------------------------------------------------------------------
// SO(3) helpers
// ---------------------------------------------------------------------------

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

/// Rodrigues formula: rotation matrix for an axis-angle vector.
inline Mat3 rodrigues(const Vec3& a) {
  double theta2 = a.squaredNorm();
  if (theta2 < 1e-16) {
    // Second-order series keeps the result orthonormal to machine precision.
    Mat3 s = skew(a);
    return Mat3::Identity() + s + 0.5 * s * s;
  }
  double theta = std::sqrt(theta2);
  Vec3 axis = a / theta;
  Mat3 s = skew(axis);
  return Mat3::Identity() + std::sin(theta) * s + (1.0 - std::cos(theta)) * s * s;
}

/// Axis-angle vector of a rotation matrix (inverse of rodrigues).
inline Vec3 rotation_log(const Mat3& r) {
  double cos_theta = std::min(1.0, std::max(-1.0, (r.trace() - 1.0) * 0.5));
  double theta = std::acos(cos_theta);
  Vec3 w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  if (theta < 1e-9) return 0.5 * w;
  if (theta > kPi - 1e-6) {
    // Near pi the off-diagonal construction is degenerate; use the symmetric part.
    Mat3 b = 0.5 * (r + Mat3::Identity());
    Vec3 axis(std::sqrt(std::max(0.0, b(0, 0))), std::sqrt(std::max(0.0, b(1, 1))),
              std::sqrt(std::max(0.0, b(2, 2))));
    // Fix signs from the skew part.
    if (w.x() < 0) axis.x() = -axis.x();
    if (w.y() < 0) axis.y() = -axis.y();
    if (w.z() < 0) axis.z() = -axis.z();
    if (axis.norm() < 1e-12) axis = Vec3(1, 0, 0);
    return theta * axis.normalized();
  }
  return (theta / (2.0 * std::sin(theta))) * w;
}

/// Jacobian of R(a)*v with respect to the axis-angle vector a, one column per
/// component of a (Gallego & Yezzi, closed form; series fallback near zero).
inline Mat3 rotate_point_jacobian(const Vec3& a, const Vec3& v) {
  double theta2 = a.squaredNorm();
  if (theta2 < 1e-14) {
    // d(R(a)v)/da at a ~ 0: -[v]_x + 0.5*(a v^T - 2 v a^T + (a.v) I) ... first
    // order is enough at this scale for the series branch.
    return -skew(v) + 0.5 * (a * v.transpose() - 2.0 * v * a.transpose() +
                             a.dot(v) * Mat3::Identity());
  }
  Mat3 r = rodrigues(a);
  return (-r * skew(v)) *
         ((a * a.transpose() + (r.transpose() - Mat3::Identity()) * skew(a)) / theta2);
}

// ---------------------------------------------------------------------------
// RigidTransform
// ---------------------------------------------------------------------------

/// Rotation + translation, applied as p -> R p + t.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from_axis_angle(const Vec3& a, const Vec3& t) {
    return {rodrigues(a), t};
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform compose(const RigidTransform& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }

  RigidTransform inverse() const {
    Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  bool is_valid(double tol = 1e-9) const {
    Mat3 should_be_identity = rotation * rotation.transpose();
    double ortho_err = (should_be_identity - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho_err < tol && std::abs(rotation.determinant() - 1.0) < tol &&
           translation.allFinite();
  }
};

/// Geodesic angle between two rotations, in radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
  double c = ((a.transpose() * b).trace() - 1.0) * 0.5;
  return std::acos(std::min(1.0, std::max(-1.0, c)));
}

// ---------------------------------------------------------------------------
// Camera
// ---------------------------------------------------------------------------

struct BehindCameraError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Pinhole camera. Extrinsics map world to camera coordinates.
struct Camera {
  Mat3 intrinsics = Mat3::Identity();
  int width = 0;
  int height = 0;
  RigidTransform extrinsics;

  static Camera make(double focal, double cx, double cy, int width, int height,
                     RigidTransform extr = {}) {
    Camera cam;
    cam.intrinsics << focal, 0, cx, 0, focal, cy, 0, 0, 1;
    cam.width = width;
    cam.height = height;
    cam.extrinsics = extr;
    return cam;
  }

  /// Default intrinsics used when a dataset ships no calibration: focal set
  /// from the image size, principal point at the center.
  static Camera from_image_size(int width, int height) {
    double f = static_cast<double>(std::max(width, height));
    return make(f, 0.5 * width, 0.5 * height, width, height);
  }

  bool is_valid() const {
    return intrinsics(0, 0) > 0 && intrinsics(1, 1) > 0 &&
           std::abs(intrinsics(2, 2) - 1.0) < 1e-12 && intrinsics(1, 0) == 0 &&
           intrinsics(2, 0) == 0 && intrinsics(2, 1) == 0 && width > 0 && height > 0 &&
           intrinsics(0, 2) >= 0 && intrinsics(0, 2) <= width && intrinsics(1, 2) >= 0 &&
           intrinsics(1, 2) <= height;
  }

  /// Depth of a world point along the camera z axis.
  double depth(const Vec3& p_world) const { return extrinsics.apply(p_world).z(); }

  std::optional<Vec2> try_project(const Vec3& p_world) const {
    Vec3 pc = extrinsics.apply(p_world);
    if (pc.z() <= 0.0) return std::nullopt;
    Vec3 h = intrinsics * pc;
    return Vec2(h.x() / h.z(), h.y() / h.z());
  }

  Vec2 project(const Vec3& p_world) const {
    auto uv = try_project(p_world);
    if (!uv) throw BehindCameraError("point has non-positive depth in camera frame");
    return *uv;
  }

  /// World-space ray through pixel (u, v); direction is unit length.
  void pixel_ray(double u, double v, Vec3* origin, Vec3* dir) const {
    Vec3 dc(
        (u - intrinsics(0, 2)) / intrinsics(0, 0),
        (v - intrinsics(1, 2)) / intrinsics(1, 1), 1.0);
    RigidTransform cam_to_world = extrinsics.inverse();
    *origin = cam_to_world.translation;
    *dir = (cam_to_world.rotation * dc).normalized();
  }
};

inline void to_json(nlohmann::json& j, const Camera& c) {
  std::array<double, 9> k{};
  std::array<double, 9> r{};
  for (int i = 0; i < 3; ++i)
    for (int jj = 0; jj < 3; ++jj) {
      k[i * 3 + jj] = c.intrinsics(i, jj);
      r[i * 3 + jj] = c.extrinsics.rotation(i, jj);
    }
  j = nlohmann::json{{"K", k},
                     {"width", c.width},
                     {"height", c.height},
                     {"rotation", r},
                     {"translation",
                      {c.extrinsics.translation.x(), c.extrinsics.translation.y(),
                       c.extrinsics.translation.z()}}};
}

inline void from_json(const nlohmann::json& j, Camera& c) {
  auto k = j.at("K").get<std::array<double, 9>>();
  auto r = j.at("rotation").get<std::array<double, 9>>();
  auto t = j.at("translation").get<std::array<double, 3>>();
  for (int i = 0; i < 3; ++i)
    for (int jj = 0; jj < 3; ++jj) {
      c.intrinsics(i, jj) = k[i * 3 + jj];
      c.extrinsics.rotation(i, jj) = r[i * 3 + jj];
    }
  c.extrinsics.translation = Vec3(t[0], t[1], t[2]);
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
}

// ---------------------------------------------------------------------------
// Ray
// ---------------------------------------------------------------------------

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3::UnitZ();  // unit length
  double z_near = 0.0;
  double z_far = 0.0;
  int pixel_row = 0;
  int pixel_col = 0;
  int frame_index = 0;
  bool hits_bounds = true;  // false: missed the scene bounding sphere

  Vec3 at(double z) const { return origin + z * dir; }
};

// ---------------------------------------------------------------------------
// Windowed positional encoding
// ---------------------------------------------------------------------------

struct EncodingConfig {
  int num_bands = 6;
  bool include_identity = true;

  int encoded_dim(int input_dim) const {
    return (include_identity ? input_dim : 0) + 2 * num_bands * input_dim;
  }
};

/// Band weight of the coarse-to-fine schedule. progress = n_s / N_s; every
/// band is closed at progress 0 and fully open from progress 0.5 on.
inline double encoding_window(int band, int num_bands, double progress) {
  double x = 2.0 * progress * num_bands - band;
  x = std::min(1.0, std::max(0.0, x));
  return 0.5 * (1.0 - std::cos(x * kPi));
}

/// Windowed encoding: (x, ..., w_k sin(2^k pi x), w_k cos(2^k pi x), ...).
/// Layout: [identity | band 0 sin(all dims), band 0 cos(all dims), band 1 ...].
inline VecX encode(const EncodingConfig& cfg, const VecX& x, double progress) {
  int n = static_cast<int>(x.size());
  VecX out(cfg.encoded_dim(n));
  int at = 0;
  if (cfg.include_identity) {
    out.head(n) = x;
    at = n;
  }
  for (int k = 0; k < cfg.num_bands; ++k) {
    double w = encoding_window(k, cfg.num_bands, progress);
    double freq = std::ldexp(kPi, k);  // 2^k * pi
    for (int d = 0; d < n; ++d) out[at + d] = w * std::sin(freq * x[d]);
    at += n;
    for (int d = 0; d < n; ++d) out[at + d] = w * std::cos(freq * x[d]);
    at += n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ray/sphere intersection (near/far bound computation)
// ---------------------------------------------------------------------------

struct SphereBounds {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
};

/// Entry/exit depths of a unit-direction ray against a sphere. Returns false
/// when the ray misses. Depths are clamped to t >= min_depth.
inline bool ray_sphere_bounds(const Vec3& origin, const Vec3& dir, const SphereBounds& s,
                              double* t_near, double* t_far, double min_depth = 1e-3) {
  Vec3 oc = origin - s.center;
  double b = oc.dot(dir);
  double c = oc.squaredNorm() - s.radius * s.radius;
  double disc = b * b - c;
  if (disc < 0.0) return false;
  double sq = std::sqrt(disc);
  double t0 = -b - sq;
  double t1 = -b + sq;
  if (t1 <= min_depth) return false;
  *t_near = std::max(t0, min_depth);
  *t_far = std::max(t1, *t_near + min_depth);  // tangency guard
  return true;
}

}  // namespace inhand

#endif  // INHAND_GEOMETRY_HPP
