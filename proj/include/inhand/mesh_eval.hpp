// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Mesh evaluation protocol: area-weighted surface sampling, exact nearest
// neighbors, Chamfer Distance, point-to-point ICP with similarity solve,
// object-region PSNR, and the temporal occupancy-fusion baseline.

#ifndef INHAND_MESH_EVAL_HPP
#define INHAND_MESH_EVAL_HPP

#include <Eigen/SVD>

#include <algorithm>
#include <numeric>

#include "inhand/image.hpp"
#include "inhand/mesh.hpp"

namespace inhand {

// ---------------------------------------------------------------------------
// Exact nearest neighbor queries
// ---------------------------------------------------------------------------

/// Median-split kd-tree over points; queries are exact.
class KdTree3 {
 public:
  explicit KdTree3(std::vector<Vec3> points) : points_(std::move(points)) {
    if (points_.empty()) throw std::invalid_argument("kd-tree needs at least one point");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(2 * points_.size());
    root_ = build(0, static_cast<int>(points_.size()));
  }

  /// Index of the nearest point and its squared distance.
  int nearest(const Vec3& q, double* sq_dist = nullptr) const {
    int best = -1;
    double best_sq = std::numeric_limits<double>::infinity();
    search(root_, q, &best, &best_sq);
    if (sq_dist) *sq_dist = best_sq;
    return order_[best];
  }

  const std::vector<Vec3>& points() const { return points_; }

 private:
  struct Node {
    int begin = 0, end = 0;  // leaf range in order_
    int axis = -1;
    double split = 0.0;
    int left = -1, right = -1;
  };

  int build(int begin, int end) {
    Node node;
    node.begin = begin;
    node.end = end;
    if (end - begin <= 8) {
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size()) - 1;
    }
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (int i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) { return points_[a][axis] < points_[b][axis]; });
    node.axis = axis;
    node.split = points_[order_[mid]][axis];
    int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    int left = build(begin, mid);
    int right = build(mid, end);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
  }

  void search(int ni, const Vec3& q, int* best, double* best_sq) const {
    const Node& node = nodes_[ni];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        double d = (points_[order_[i]] - q).squaredNorm();
        if (d < *best_sq) {
          *best_sq = d;
          *best = i;
        }
      }
      return;
    }
    double delta = q[node.axis] - node.split;
    int near = delta < 0 ? node.left : node.right;
    int far = delta < 0 ? node.right : node.left;
    search(near, q, best, best_sq);
    if (delta * delta < *best_sq) search(far, q, best, best_sq);
  }

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// ---------------------------------------------------------------------------
// Surface sampling and Chamfer Distance
// ---------------------------------------------------------------------------

/// Area-weighted surface samples; deterministic for a given seed.
inline std::vector<Vec3> sample_surface(const TriMesh& mesh, int count,
                                        std::uint64_t seed = 0x5u) {
  if (mesh.empty()) return {};
  std::vector<double> cumulative(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    total += mesh.face_area(static_cast<int>(f));
    cumulative[f] = total;
  }
  Pcg32 rng(seed, 0x9e3779b9u);
  std::vector<Vec3> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    double u = rng.uniform() * total;
    auto it = std::lower_bound(cumulative.begin(), cumulative.end(), u);
    std::size_t f = std::min<std::size_t>(it - cumulative.begin(), mesh.faces.size() - 1);
    const auto& tri = mesh.faces[f];
    double r1 = std::sqrt(rng.uniform());
    double r2 = rng.uniform();
    out.push_back((1 - r1) * mesh.vertices[tri[0]] + r1 * (1 - r2) * mesh.vertices[tri[1]] +
                  r1 * r2 * mesh.vertices[tri[2]]);
  }
  return out;
}

/// Worst value reported for Chamfer against an empty mesh.
inline constexpr double kChamferWorst = 1e6;

struct ChamferOptions {
  int samples = 100000;
  std::uint64_t seed = 0xc0ffee;
  bool normalize = true;  // scale-only unit-size normalization, no recentering
};

/// Symmetric mean nearest-neighbor distance, x100, after scale-only unit-size
/// normalization of each mesh. Empty input yields kChamferWorst with
/// *degenerate set (never silently).
inline double chamfer(const TriMesh& a, const TriMesh& b, const ChamferOptions& opt = {},
                      bool* degenerate = nullptr) {
  if (degenerate) *degenerate = false;
  if (a.empty() || b.empty()) {
    if (degenerate) *degenerate = true;
    return kChamferWorst;
  }
  double sa = opt.normalize ? a.normalization_scale() : 1.0;
  double sb = opt.normalize ? b.normalization_scale() : 1.0;
  std::vector<Vec3> pa = sample_surface(a, opt.samples, opt.seed);
  std::vector<Vec3> pb = sample_surface(b, opt.samples, opt.seed + 1);
  for (auto& p : pa) p *= sa;
  for (auto& p : pb) p *= sb;
  KdTree3 ta(pa), tb(pb);
  double sum_ab = 0.0, sum_ba = 0.0;
  for (const auto& p : pa) {
    double sq;
    tb.nearest(p, &sq);
    sum_ab += std::sqrt(sq);
  }
  for (const auto& p : pb) {
    double sq;
    ta.nearest(p, &sq);
    sum_ba += std::sqrt(sq);
  }
  double mean = 0.5 * (sum_ab / pa.size() + sum_ba / pb.size());
  return 100.0 * mean;
}

// ---------------------------------------------------------------------------
// ICP (point-to-point, similarity)
// ---------------------------------------------------------------------------

struct AlignmentResult {
  double scale = 1.0;
  RigidTransform transform;  // applied after scaling: p -> R (s p) + t
  double final_chamfer = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> error_trace;  // mean correspondence distance per iteration
};

/// Point-to-point ICP with a closed-form similarity solve per iteration
/// (rotation from the SVD of the cross-covariance, scale from the variance
/// ratio). Throws on degenerate correspondence geometry.
inline AlignmentResult icp_align(const TriMesh& source, const TriMesh& target,
                                 int max_iterations = 50, double rel_tol = 1e-6,
                                 int sample_count = 4000) {
  if (source.empty() || target.empty())
    throw std::invalid_argument("icp_align needs non-empty meshes");
  std::vector<Vec3> src = sample_surface(source, sample_count, 0xa11ce);
  std::vector<Vec3> tgt = sample_surface(target, 4 * sample_count, 0xb0b);
  KdTree3 tree(tgt);

  AlignmentResult res;
  double prev_err = std::numeric_limits<double>::infinity();
  std::vector<Vec3> moved = src;
  for (int it = 0; it < max_iterations; ++it) {
    // Correspondences. RMS error: both ICP half-steps decrease it exactly.
    std::vector<Vec3> matched(moved.size());
    double err = 0.0;
    for (std::size_t i = 0; i < moved.size(); ++i) {
      double sq;
      matched[i] = tgt[tree.nearest(moved[i], &sq)];
      err += sq;
    }
    err = std::sqrt(err / static_cast<double>(moved.size()));
    res.error_trace.push_back(err);
    res.iterations = it + 1;
    if (prev_err - err <= rel_tol * std::max(1.0, prev_err) && it > 0) {
      res.converged = true;
      break;
    }
    prev_err = err;

    // Umeyama similarity solve on (src -> matched).
    Vec3 mu_s = Vec3::Zero(), mu_t = Vec3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
      mu_s += moved[i];
      mu_t += matched[i];
    }
    mu_s /= static_cast<double>(src.size());
    mu_t /= static_cast<double>(src.size());
    Mat3 cov = Mat3::Zero();
    double var_s = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      Vec3 ds = moved[i] - mu_s;
      Vec3 dt = matched[i] - mu_t;
      cov += dt * ds.transpose();
      var_s += ds.squaredNorm();
    }
    cov /= static_cast<double>(src.size());
    var_s /= static_cast<double>(src.size());
    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (svd.singularValues()(2) < 1e-12 * std::max(1.0, svd.singularValues()(0)))
      throw std::runtime_error("icp_align: degenerate correspondence geometry");
    Mat3 d = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2, 2) = -1.0;
    Mat3 r = svd.matrixU() * d * svd.matrixV().transpose();
    double step_scale = (svd.singularValues().asDiagonal() * d).trace() / var_s;
    Vec3 t = mu_t - step_scale * (r * mu_s);

    for (auto& p : moved) p = step_scale * (r * p) + t;
    res.scale *= step_scale;
    res.transform.rotation = r * res.transform.rotation;
    res.transform.translation = step_scale * (r * res.transform.translation) + t;
  }

  TriMesh aligned = source;
  for (auto& v : aligned.vertices) v = res.transform.apply(res.scale * v);
  res.final_chamfer = chamfer(aligned, target);
  return res;
}

/// Applies an alignment to a mesh copy.
inline TriMesh apply_alignment(const TriMesh& mesh, const AlignmentResult& a) {
  TriMesh out = mesh;
  for (auto& v : out.vertices) v = a.transform.apply(a.scale * v);
  return out;
}

// ---------------------------------------------------------------------------
// PSNR over a masked region
// ---------------------------------------------------------------------------

/// PSNR in dB over mask-selected pixels, colors in [0,1]. Identical images
/// report the 99 dB sentinel. Throws when the mask selects nothing.
inline double psnr_object_region(const Image& rendered, const Image& reference,
                                 const Image& mask) {
  if (!rendered.same_shape(reference))
    throw std::invalid_argument("psnr: image shapes differ");
  if (mask.width != rendered.width || mask.height != rendered.height)
    throw std::invalid_argument("psnr: mask shape differs");
  double se = 0.0;
  long count = 0;
  for (int r = 0; r < rendered.height; ++r) {
    for (int c = 0; c < rendered.width; ++c) {
      if (mask.at(r, c, 0) == 0) continue;
      for (int ch = 0; ch < rendered.channels; ++ch) {
        double d = rendered.value(r, c, ch) - reference.value(r, c, ch);
        se += d * d;
      }
      count += rendered.channels;
    }
  }
  if (count == 0) throw std::invalid_argument("psnr: empty mask");
  double mse = se / static_cast<double>(count);
  if (mse <= 1e-12) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

// ---------------------------------------------------------------------------
// Occupancy-average temporal fusion baseline
// ---------------------------------------------------------------------------

namespace fuse_detail {

/// Parity fill of one mesh into a voxel occupancy grid (1 inside, 0 outside).
/// Rays run along +x through voxel centers, with a small deterministic jitter
/// so they do not thread triangle edges.
inline void voxelize(const TriMesh& mesh, const Vec3& lo, const Vec3& hi, int res,
                     std::vector<float>* occupancy) {
  Vec3 cell = (hi - lo) / res;
  occupancy->assign(static_cast<std::size_t>(res) * res * res, 0.0f);
  const double jy = 0.5 + 1.2345e-4, jz = 0.5 + 2.3456e-4;
  for (int k = 0; k < res; ++k) {
    double z = lo.z() + (k + jz) * cell.z();
    for (int j = 0; j < res; ++j) {
      double y = lo.y() + (j + jy) * cell.y();
      // Collect x-crossings of all triangles with the row line.
      std::vector<double> xs;
      for (const auto& f : mesh.faces) {
        const Vec3& a = mesh.vertices[f[0]];
        const Vec3& b = mesh.vertices[f[1]];
        const Vec3& c = mesh.vertices[f[2]];
        // Solve for intersection of line {y,z fixed} with triangle plane in
        // barycentric coordinates of the (y,z) projection.
        double d = (b.y() - a.y()) * (c.z() - a.z()) - (b.z() - a.z()) * (c.y() - a.y());
        if (std::abs(d) < 1e-18) continue;
        double u = ((y - a.y()) * (c.z() - a.z()) - (z - a.z()) * (c.y() - a.y())) / d;
        double v = ((b.y() - a.y()) * (z - a.z()) - (b.z() - a.z()) * (y - a.y())) / d;
        if (u < 0.0 || v < 0.0 || u + v > 1.0) continue;
        xs.push_back(a.x() + u * (b.x() - a.x()) + v * (c.x() - a.x()));
      }
      if (xs.empty()) continue;
      std::sort(xs.begin(), xs.end());
      // Parity fill between crossing pairs.
      for (std::size_t p = 0; p + 1 < xs.size(); p += 2) {
        int i0 = static_cast<int>(std::ceil((xs[p] - lo.x()) / cell.x() - 0.5));
        int i1 = static_cast<int>(std::floor((xs[p + 1] - lo.x()) / cell.x() - 0.5));
        for (int i = std::max(0, i0); i <= std::min(res - 1, i1); ++i)
          (*occupancy)[i + static_cast<std::size_t>(res) * (j + static_cast<std::size_t>(res) * k)] = 1.0f;
      }
    }
  }
}

}  // namespace fuse_detail

/// Averages per-frame occupancy volumes (each mesh first moved by its pose),
/// thresholds, and extracts the fused mesh. Voxels are inside when their
/// average occupancy is strictly greater than the threshold.
inline TriMesh occupancy_fuse(const std::vector<TriMesh>& meshes,
                              const std::vector<RigidTransform>& poses, int resolution,
                              double threshold = 0.5) {
  if (meshes.empty()) throw std::invalid_argument("occupancy_fuse needs at least one mesh");
  if (!poses.empty() && poses.size() != meshes.size())
    throw std::invalid_argument("occupancy_fuse pose/mesh count mismatch");

  std::vector<TriMesh> placed;
  placed.reserve(meshes.size());
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    TriMesh m = meshes[i];
    if (!poses.empty()) m.apply_transform(poses[i]);
    placed.push_back(std::move(m));
  }
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
  for (const auto& m : placed) {
    if (m.vertices.empty()) continue;
    Vec3 mlo, mhi;
    m.bounding_box(&mlo, &mhi);
    lo = lo.cwiseMin(mlo);
    hi = hi.cwiseMax(mhi);
  }
  if (!lo.allFinite()) return {};
  Vec3 pad = 0.05 * (hi - lo) + Vec3::Constant(1e-6);
  lo -= pad;
  hi += pad;

  std::vector<double> average(static_cast<std::size_t>(resolution) * resolution * resolution,
                              0.0);
  std::vector<float> occ;
  for (const auto& m : placed) {
    if (m.empty()) continue;  // empty frame contributes zero occupancy
    fuse_detail::voxelize(m, lo, hi, resolution, &occ);
    for (std::size_t i = 0; i < occ.size(); ++i) average[i] += occ[i];
  }
  for (auto& v : average) v /= static_cast<double>(placed.size());

  // Signed field: negative inside (above threshold), sampled at voxel centers.
  ScalarGrid grid;
  grid.nx = grid.ny = grid.nz = resolution - 1;
  Vec3 cell = (hi - lo) / resolution;
  grid.lo = lo + 0.5 * cell;
  grid.hi = hi - 0.5 * cell;
  grid.values.resize(static_cast<std::size_t>(resolution) * resolution * resolution);
  for (int k = 0; k < resolution; ++k)
    for (int j = 0; j < resolution; ++j)
      for (int i = 0; i < resolution; ++i) {
        std::size_t idx =
            i + static_cast<std::size_t>(resolution) * (j + static_cast<std::size_t>(resolution) * k);
        grid.values[idx] = threshold - average[idx];
      }
  return marching_cubes(grid);
}

}  // namespace inhand

#endif  // INHAND_MESH_EVAL_HPP
