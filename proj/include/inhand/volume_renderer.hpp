// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// SDF-to-radiance quadrature along rays: the unbiased opacity construction,
// transmittance products, accumulated weight for mask supervision, and exact
// adjoints of all of it (including the trainable sharpness).

#ifndef INHAND_VOLUME_RENDERER_HPP
#define INHAND_VOLUME_RENDERER_HPP

#include <algorithm>
#include <vector>

#include "inhand/geometry.hpp"

namespace inhand {

/// Logistic CDF with sharpness h.
template <typename S>
S phi_sigmoid(S h, S x) {
  S hx = h * x;
  if (hx > S(35)) return S(1);
  if (hx < S(-35)) return std::exp(hx);  // keeps Phi > 0 for the ratio below
  return S(1) / (S(1) + std::exp(-hx));
}

template <typename S>
S phi_sigmoid_dx(S h, S x) {
  S p = phi_sigmoid(h, x);
  return h * p * (S(1) - p);
}

/// Discrete opacities, transmittances and weights from SDF samples along a
/// ray with ascending depths. alpha[last] is zero (no next sample).
template <typename S>
void sdf_to_weights(const Eigen::Matrix<S, Eigen::Dynamic, 1>& sdf, S sharpness,
                    Eigen::Matrix<S, Eigen::Dynamic, 1>* alpha,
                    Eigen::Matrix<S, Eigen::Dynamic, 1>* transmittance,
                    Eigen::Matrix<S, Eigen::Dynamic, 1>* weights) {
  const int n = static_cast<int>(sdf.size());
  alpha->setZero(n);
  transmittance->setZero(n);
  weights->setZero(n);
  S t = S(1);
  for (int j = 0; j < n; ++j) {
    S a = S(0);
    if (j + 1 < n) {
      S p0 = phi_sigmoid(sharpness, sdf[j]);
      S p1 = phi_sigmoid(sharpness, sdf[j + 1]);
      a = std::max((p0 - p1) / p0, S(0));
    }
    (*alpha)[j] = a;
    (*transmittance)[j] = t;
    (*weights)[j] = t * a;
    t *= (S(1) - a);
  }
}

/// Adjoint of sdf_to_weights. Accumulates into sdf_bar and sharpness_bar.
template <typename S>
void sdf_to_weights_backward(const Eigen::Matrix<S, Eigen::Dynamic, 1>& sdf, S sharpness,
                             const Eigen::Matrix<S, Eigen::Dynamic, 1>& alpha,
                             const Eigen::Matrix<S, Eigen::Dynamic, 1>& transmittance,
                             const Eigen::Matrix<S, Eigen::Dynamic, 1>& weights,
                             const Eigen::Matrix<S, Eigen::Dynamic, 1>& weights_bar,
                             Eigen::Matrix<S, Eigen::Dynamic, 1>* sdf_bar,
                             S* sharpness_bar) {
  const int n = static_cast<int>(sdf.size());
  // alpha_bar[j] = wbar_j T_j - (sum_{m>j} wbar_m w_m) / (1 - alpha_j)
  S suffix = S(0);
  for (int j = n - 1; j >= 0; --j) {
    if (j + 1 < n && alpha[j] > S(0)) {
      S abar = weights_bar[j] * transmittance[j];
      if (alpha[j] < S(1)) abar -= suffix / (S(1) - alpha[j]);
      // r = 1 - Phi(s_{j+1}) / Phi(s_j), alpha = max(r, 0) and r > 0 here.
      S p0 = phi_sigmoid(sharpness, sdf[j]);
      S p1 = phi_sigmoid(sharpness, sdf[j + 1]);
      S d0 = phi_sigmoid_dx(sharpness, sdf[j]);
      S d1 = phi_sigmoid_dx(sharpness, sdf[j + 1]);
      (*sdf_bar)[j] += abar * p1 * d0 / (p0 * p0);
      (*sdf_bar)[j + 1] -= abar * d1 / p0;
      if (sharpness_bar) {
        // dPhi/dh = x sigma'(h x); sigma'(hx) = Phi (1 - Phi).
        S dh0 = sdf[j] * p0 * (S(1) - p0);
        S dh1 = sdf[j + 1] * p1 * (S(1) - p1);
        *sharpness_bar += abar * (p1 * dh0 - p0 * dh1) / (p0 * p0);
      }
    }
    suffix += weights_bar[j] * weights[j];
  }
}

/// Per-ray quadrature outputs.
template <typename S>
struct RenderResult {
  Eigen::Matrix<S, 3, 1> color = Eigen::Matrix<S, 3, 1>::Zero();
  Eigen::Matrix<S, 3, 1> logits = Eigen::Matrix<S, 3, 1>::Zero();
  S accumulated = S(0);  // O-hat, the foreground opacity proxy
};

template <typename S>
RenderResult<S> render_quadrature(const Eigen::Matrix<S, Eigen::Dynamic, 1>& weights,
                                  const Eigen::Matrix<S, 3, Eigen::Dynamic>& colors,
                                  const Eigen::Matrix<S, 3, Eigen::Dynamic>& logits) {
  RenderResult<S> out;
  out.color = colors * weights;
  out.logits = logits * weights;
  out.accumulated = weights.sum();
  return out;
}

// ---------------------------------------------------------------------------
// Depth sampling
// ---------------------------------------------------------------------------

/// One jittered sample per uniform stratum of [z_near, z_far].
inline std::vector<double> stratified_depths(double z_near, double z_far, int count,
                                             Pcg32* rng) {
  std::vector<double> z(count);
  double span = (z_far - z_near) / count;
  for (int i = 0; i < count; ++i) z[i] = z_near + (i + rng->uniform()) * span;
  return z;
}

/// Inverse-CDF resampling proportional to coarse interval weights (plus a
/// small uniform floor so empty regions keep nonzero probability).
inline std::vector<double> importance_depths(const std::vector<double>& coarse_z,
                                             const std::vector<double>& coarse_weights,
                                             int count, Pcg32* rng,
                                             double uniform_floor = 0.01) {
  const int bins = static_cast<int>(coarse_z.size()) - 1;
  if (bins < 1) return {};
  std::vector<double> cdf(bins + 1, 0.0);
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    double w = 0.5 * (coarse_weights[b] + coarse_weights[b + 1]) + uniform_floor / bins;
    total += w;
    cdf[b + 1] = total;
  }
  std::vector<double> z(count);
  for (int i = 0; i < count; ++i) {
    double u = (i + rng->uniform()) / count * total;  // stratified in the CDF
    int b = static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin()) - 1;
    b = std::min(std::max(b, 0), bins - 1);
    double seg = cdf[b + 1] - cdf[b];
    double frac = seg > 0 ? (u - cdf[b]) / seg : 0.5;
    z[i] = coarse_z[b] + frac * (coarse_z[b + 1] - coarse_z[b]);
  }
  return z;
}

/// Merge-sort of coarse + fine depths into one ascending set.
inline std::vector<double> merge_depths(std::vector<double> a, const std::vector<double>& b) {
  a.insert(a.end(), b.begin(), b.end());
  std::sort(a.begin(), a.end());
  return a;
}

// ---------------------------------------------------------------------------
// Ray construction
// ---------------------------------------------------------------------------

/// Builds the canonical-space ray for a pixel: tracked world-to-camera pose,
/// then a left-composed world-space correction (axis-angle, translation) on
/// the camera-to-world side. Near/far come from the scene bounding sphere;
/// rays that miss are flagged and render to zero.
inline Ray make_ray(const Camera& camera, const RigidTransform& world_to_camera,
                    const Vec3& correction_rotation, const Vec3& correction_translation,
                    double pixel_row, double pixel_col, const SphereBounds& bounds) {
  Vec3 dc((pixel_col - camera.intrinsics(0, 2)) / camera.intrinsics(0, 0),
          (pixel_row - camera.intrinsics(1, 2)) / camera.intrinsics(1, 1), 1.0);
  RigidTransform cam_to_world = world_to_camera.inverse();
  Vec3 o0 = cam_to_world.translation;
  Vec3 d0 = (cam_to_world.rotation * dc).normalized();

  Mat3 r = rodrigues(correction_rotation);
  Ray ray;
  ray.origin = r * o0 + correction_translation;
  ray.dir = r * d0;
  ray.pixel_row = static_cast<int>(pixel_row);
  ray.pixel_col = static_cast<int>(pixel_col);
  ray.hits_bounds = ray_sphere_bounds(ray.origin, ray.dir, bounds, &ray.z_near, &ray.z_far);
  return ray;
}

/// d(origin)/d(correction) and d(dir)/d(correction) for the pose-refinement
/// chain; columns [axis-angle | translation].
inline void ray_jacobians(const Camera& camera, const RigidTransform& world_to_camera,
                          const Vec3& correction_rotation, double pixel_row, double pixel_col,
                          Eigen::Matrix<double, 3, 6>* d_origin,
                          Eigen::Matrix<double, 3, 6>* d_dir) {
  Vec3 dc((pixel_col - camera.intrinsics(0, 2)) / camera.intrinsics(0, 0),
          (pixel_row - camera.intrinsics(1, 2)) / camera.intrinsics(1, 1), 1.0);
  RigidTransform cam_to_world = world_to_camera.inverse();
  Vec3 o0 = cam_to_world.translation;
  Vec3 d0 = (cam_to_world.rotation * dc).normalized();
  d_origin->setZero();
  d_dir->setZero();
  d_origin->leftCols<3>() = rotate_point_jacobian(correction_rotation, o0);
  d_origin->rightCols<3>() = Mat3::Identity();
  d_dir->leftCols<3>() = rotate_point_jacobian(correction_rotation, d0);
}

}  // namespace inhand

#endif  // INHAND_VOLUME_RENDERER_HPP
