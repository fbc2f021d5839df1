// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Joint optimization of the SDF/color/semantic field, the deformation
// network, per-frame embeddings and camera-pose corrections against the
// five-term objective, with semantics-guided ray sampling and the
// coarse-to-fine encoding schedule.

#ifndef INHAND_TRAINER_HPP
#define INHAND_TRAINER_HPP

#include <filesystem>

#include "inhand/field_eval.hpp"
#include "inhand/hand_tracking.hpp"
#include "inhand/image.hpp"
#include "inhand/mesh.hpp"
#include "inhand/synthetic_scenes.hpp"
#include "inhand/volume_renderer.hpp"

namespace inhand {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lambda_mask = 5.0;
  double lambda_eikonal = 0.1;
  double lambda_semantic = 0.1;
  double lambda_deform = 10.0;

  int total_steps = 20000;   // N_s
  int rays_per_step = 512;   // N_r
  int samples_per_ray = 64;  // N_p: half stratified, half importance
  double object_ray_fraction_final = 0.8;
  double annealing_fraction = 0.5;  // horizon for encoding window and sampling

  double lr_field = 5e-4;
  double lr_pose = 1e-4;
  double h_lr_multiplier = 10.0;  // sharpness anneals on the desk-scale budget
  std::uint64_t seed = 1;

  bool refine_poses = false;
  bool use_deformation = false;
  bool guided_sampling = false;

  double init_pose_noise_deg = 0.0;  // perturbation applied to input poses
  double init_pose_noise_frac = 0.0;
  bool random_pose_init = false;  // replace input poses with random ones

  int log_every = 100;
  int checkpoint_every = 5000;
  int mesh_resolution = 128;
  double sphere_margin = 1.5;
  int chunk_rays = 32;
  int threads = 0;
  double divergence_step = 1e-3;  // central-difference step of the div probe
  bool importance_sampling = true;  // off: stratified-only (gradient checks)
  int stop_at_step = 0;  // > 0: interrupt training at this step (resume later)

  FieldConfig field;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lambda_mask", c.lambda_mask},
                     {"lambda_eikonal", c.lambda_eikonal},
                     {"lambda_semantic", c.lambda_semantic},
                     {"lambda_deform", c.lambda_deform},
                     {"total_steps", c.total_steps},
                     {"rays_per_step", c.rays_per_step},
                     {"samples_per_ray", c.samples_per_ray},
                     {"object_ray_fraction_final", c.object_ray_fraction_final},
                     {"annealing_fraction", c.annealing_fraction},
                     {"lr_field", c.lr_field},
                     {"lr_pose", c.lr_pose},
                     {"h_lr_multiplier", c.h_lr_multiplier},
                     {"seed", c.seed},
                     {"refine_poses", c.refine_poses},
                     {"use_deformation", c.use_deformation},
                     {"guided_sampling", c.guided_sampling},
                     {"init_pose_noise_deg", c.init_pose_noise_deg},
                     {"init_pose_noise_frac", c.init_pose_noise_frac},
                     {"random_pose_init", c.random_pose_init},
                     {"log_every", c.log_every},
                     {"checkpoint_every", c.checkpoint_every},
                     {"mesh_resolution", c.mesh_resolution},
                     {"sphere_margin", c.sphere_margin},
                     {"chunk_rays", c.chunk_rays},
                     {"threads", c.threads},
                     {"divergence_step", c.divergence_step},
                     {"importance_sampling", c.importance_sampling},
                     {"stop_at_step", c.stop_at_step},
                     {"field", c.field}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lambda_mask = j.value("lambda_mask", d.lambda_mask);
  c.lambda_eikonal = j.value("lambda_eikonal", d.lambda_eikonal);
  c.lambda_semantic = j.value("lambda_semantic", d.lambda_semantic);
  c.lambda_deform = j.value("lambda_deform", d.lambda_deform);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.rays_per_step = j.value("rays_per_step", d.rays_per_step);
  c.samples_per_ray = j.value("samples_per_ray", d.samples_per_ray);
  c.object_ray_fraction_final = j.value("object_ray_fraction_final", d.object_ray_fraction_final);
  c.annealing_fraction = j.value("annealing_fraction", d.annealing_fraction);
  c.lr_field = j.value("lr_field", d.lr_field);
  c.lr_pose = j.value("lr_pose", d.lr_pose);
  c.h_lr_multiplier = j.value("h_lr_multiplier", d.h_lr_multiplier);
  c.seed = j.value("seed", d.seed);
  c.refine_poses = j.value("refine_poses", d.refine_poses);
  c.use_deformation = j.value("use_deformation", d.use_deformation);
  c.guided_sampling = j.value("guided_sampling", d.guided_sampling);
  c.init_pose_noise_deg = j.value("init_pose_noise_deg", d.init_pose_noise_deg);
  c.init_pose_noise_frac = j.value("init_pose_noise_frac", d.init_pose_noise_frac);
  c.random_pose_init = j.value("random_pose_init", d.random_pose_init);
  c.log_every = j.value("log_every", d.log_every);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.mesh_resolution = j.value("mesh_resolution", d.mesh_resolution);
  c.sphere_margin = j.value("sphere_margin", d.sphere_margin);
  c.chunk_rays = j.value("chunk_rays", d.chunk_rays);
  c.threads = j.value("threads", d.threads);
  c.divergence_step = j.value("divergence_step", d.divergence_step);
  c.importance_sampling = j.value("importance_sampling", d.importance_sampling);
  c.stop_at_step = j.value("stop_at_step", d.stop_at_step);
  if (j.contains("field")) c.field = j.at("field").get<FieldConfig>();
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct TrainDataset {
  int frames = 0;
  int width = 0;
  int height = 0;
  Camera camera;                      // shared intrinsics, identity extrinsics
  std::vector<RigidTransform> poses;  // canonical -> camera per frame
  std::vector<RigidTransform> gt_poses;  // empty when unavailable
  std::vector<Image> color, mask, semantics;

  SphereBounds bounds;  // canonical space, margined
  // Per frame and per class {background, hand, object}: linear pixel indices.
  std::vector<std::array<std::vector<int>, 3>> class_pixels;

  bool has_gt_poses() const { return !gt_poses.empty(); }
};

inline TrainDataset load_train_dataset(const std::string& dataset_dir,
                                       const std::string& poses_path, double margin = 1.5) {
  TrainDataset ds;
  std::ifstream mf(dataset_dir + "/manifest.json");
  if (!mf) throw std::runtime_error("cannot open dataset manifest in " + dataset_dir);
  nlohmann::json manifest;
  mf >> manifest;
  ds.frames = manifest.at("frames").get<int>();
  ds.width = manifest.at("width").get<int>();
  ds.height = manifest.at("height").get<int>();

  HandSequenceParams tracked = load_sequence_params(poses_path);
  if (static_cast<int>(tracked.frames.size()) != ds.frames)
    throw std::runtime_error("pose file frame count does not match the dataset");
  for (const auto& f : tracked.frames) ds.poses.push_back(f.root);

  {
    std::ifstream cf(dataset_dir + "/cameras.json");
    if (!cf) throw std::runtime_error("cannot open cameras.json in " + dataset_dir);
    nlohmann::json cams;
    cf >> cams;
    Camera c0 = cams.at(0).get<Camera>();
    ds.camera = Camera::make(c0.intrinsics(0, 0), c0.intrinsics(0, 2), c0.intrinsics(1, 2),
                             c0.width, c0.height);
  }

  if (std::filesystem::exists(dataset_dir + "/gt/poses.json")) {
    HandSequenceParams gt = load_sequence_params(dataset_dir + "/gt/poses.json");
    for (const auto& f : gt.frames) ds.gt_poses.push_back(f.root);
  }

  char name[64];
  for (int t = 0; t < ds.frames; ++t) {
    std::snprintf(name, sizeof(name), "/frames/%04d_color.png", t);
    ds.color.push_back(read_png(dataset_dir + name));
    std::snprintf(name, sizeof(name), "/frames/%04d_mask.png", t);
    ds.mask.push_back(read_png(dataset_dir + name));
    std::snprintf(name, sizeof(name), "/frames/%04d_sem.png", t);
    ds.semantics.push_back(read_png(dataset_dir + name));
  }

  // Scene bounds from the tracked hand joints in canonical space.
  JointArray joints = forward_kinematics(tracked.shape, tracked.pose,
                                         RigidTransform::identity());
  ds.bounds = keypoint_bounding_sphere(joints, margin);

  ds.class_pixels.resize(ds.frames);
  for (int t = 0; t < ds.frames; ++t) {
    for (int r = 0; r < ds.height; ++r) {
      for (int c = 0; c < ds.width; ++c) {
        int cls = ds.semantics[t].at(r, c, 0);
        if (cls > 2) cls = 0;
        if (ds.mask[t].at(r, c, 0) == 0) cls = 0;
        ds.class_pixels[t][cls].push_back(r * ds.width + c);
      }
    }
  }
  return ds;
}

/// Canonical -> normalized-scene mapping (unit bounding sphere).
struct SceneNormalization {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;

  Vec3 to_normalized(const Vec3& p) const { return (p - center) / radius; }
  Vec3 to_canonical(const Vec3& p) const { return center + radius * p; }
};

inline SceneNormalization make_normalization(const TrainDataset& ds) {
  return {ds.bounds.center, ds.bounds.radius};
}

/// World-to-camera extrinsics re-expressed in normalized scene coordinates.
inline RigidTransform normalized_extrinsics(const RigidTransform& world_to_camera,
                                            const SceneNormalization& norm) {
  RigidTransform c2w = world_to_camera.inverse();
  RigidTransform c2w_n{c2w.rotation, (c2w.translation - norm.center) / norm.radius};
  return c2w_n.inverse();
}

// ---------------------------------------------------------------------------
// Ray batches
// ---------------------------------------------------------------------------

struct RayRecord {
  int frame = 0;
  int row = 0, col = 0;
  Vec3 gt_color = Vec3::Zero();
  int gt_mask = 0;
  int gt_class = 0;
};

struct SampleBatch {
  std::vector<RayRecord> rays;
  int frame = 0;
};

/// Semantics-guided ray sampling: per-region quotas interpolate linearly from
/// area-proportional at step 0 to (object 80%, rest split by area) at the
/// annealing horizon. Quotas use largest-remainder rounding; empty regions
/// redistribute proportionally.
inline SampleBatch sample_rays(const TrainDataset& ds, int step, const TrainConfig& cfg,
                               Pcg32* rng) {
  SampleBatch batch;
  batch.frame = static_cast<int>(rng->uniform_u32(static_cast<std::uint32_t>(ds.frames)));
  const auto& pixels = ds.class_pixels[batch.frame];

  double areas[3];
  double total_area = 0.0;
  for (int c = 0; c < 3; ++c) {
    areas[c] = static_cast<double>(pixels[c].size());
    total_area += areas[c];
  }

  double fractions[3];
  double horizon = std::max(1.0, cfg.annealing_fraction * cfg.total_steps);
  double t = cfg.guided_sampling ? std::min(1.0, step / horizon) : 0.0;
  double hb_area = areas[0] + areas[1];
  for (int c = 0; c < 3; ++c) {
    double area_frac = total_area > 0 ? areas[c] / total_area : 0.0;
    double final_frac =
        c == 2 ? cfg.object_ray_fraction_final
               : (1.0 - cfg.object_ray_fraction_final) * (hb_area > 0 ? areas[c] / hb_area : 0.0);
    fractions[c] = (1.0 - t) * area_frac + t * final_frac;
  }
  // Remove empty regions and renormalize.
  double live = 0.0;
  for (int c = 0; c < 3; ++c) {
    if (pixels[c].empty()) fractions[c] = 0.0;
    live += fractions[c];
  }
  if (live <= 0.0) throw std::runtime_error("sample_rays: frame has no pixels");

  int quotas[3];
  double remainders[3];
  int assigned = 0;
  for (int c = 0; c < 3; ++c) {
    double want = cfg.rays_per_step * fractions[c] / live;
    quotas[c] = static_cast<int>(want);
    remainders[c] = want - quotas[c];
    assigned += quotas[c];
  }
  while (assigned < cfg.rays_per_step) {
    int best = 0;
    for (int c = 1; c < 3; ++c)
      if (remainders[c] > remainders[best]) best = c;
    ++quotas[best];
    remainders[best] = -1;
    ++assigned;
  }

  for (int cls = 0; cls < 3; ++cls) {
    for (int i = 0; i < quotas[cls]; ++i) {
      int pix = pixels[cls][rng->uniform_u32(static_cast<std::uint32_t>(pixels[cls].size()))];
      RayRecord rec;
      rec.frame = batch.frame;
      rec.row = pix / ds.width;
      rec.col = pix % ds.width;
      const Image& img = ds.color[batch.frame];
      rec.gt_color = Vec3(img.value(rec.row, rec.col, 0), img.value(rec.row, rec.col, 1),
                          img.value(rec.row, rec.col, 2));
      rec.gt_mask = ds.mask[batch.frame].at(rec.row, rec.col, 0) > 0 ? 1 : 0;
      rec.gt_class = cls;
      batch.rays.push_back(rec);
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Loss evaluation with gradients
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double color = 0.0, mask = 0.0, eikonal = 0.0, semantic = 0.0, deform = 0.0;
  double total() const { return color + mask + eikonal + semantic + deform; }
  // Note: the weighted lambdas are already folded into each term.
};

namespace trainer_detail {

inline double clamp01(double v, double eps) { return std::min(1.0 - eps, std::max(eps, v)); }

/// Captured per-ray sampling so finite-difference harnesses can hold the
/// (detached) sample locations fixed while perturbing parameters.
struct FixedSampling {
  bool filled = false;
  std::vector<std::vector<double>> depths;  // indexed by batch ray
  std::vector<char> hits;
  // Detached divergence weights (rho = discrete opacity); held fixed so a
  // finite-difference harness probes the same objective the gradient is of.
  std::vector<std::vector<double>> rho;
};

/// Processes a contiguous chunk of rays of one batch: renders them, adds all
/// loss terms, and accumulates parameter gradients. Pure given its inputs, so
/// chunks can run on any thread; reduction order is fixed by the caller.
template <typename S>
void process_chunk(const FieldParams<S>& params, const TrainDataset& ds,
                   const SceneNormalization& norm, const TrainConfig& cfg,
                   const SampleBatch& batch, int begin, int end, double progress, int step,
                   FieldGrads<S>* grads, LossBreakdown* loss,
                   FixedSampling* fixed = nullptr) {
  const int n_rays = end - begin;
  if (n_rays <= 0) return;
  const int n_coarse = cfg.samples_per_ray / 2;
  const int n_fine = cfg.samples_per_ray - n_coarse;
  const int n_p = cfg.samples_per_ray;
  const double n_r_total = cfg.rays_per_step;
  const S h = params.sharpness();
  const SphereBounds unit_sphere{Vec3::Zero(), 1.0};

  // Build rays (with the current pose corrections).
  std::vector<Ray> rays(n_rays);
  std::vector<RigidTransform> extr(n_rays);
  for (int i = 0; i < n_rays; ++i) {
    const RayRecord& rec = batch.rays[begin + i];
    extr[i] = normalized_extrinsics(ds.poses[rec.frame], norm);
    auto corr = params.pose_correction(rec.frame);
    Vec3 crot(corr[0], corr[1], corr[2]);
    Vec3 ctra(corr[3], corr[4], corr[5]);
    rays[i] = make_ray(ds.camera, extr[i], crot, ctra, rec.row + 0.5, rec.col + 0.5,
                       unit_sphere);
    rays[i].frame_index = rec.frame;
  }

  // Depth samples: stratified + importance against the coarse SDF (detached).
  std::vector<std::vector<double>> depths(n_rays);
  std::vector<int> hit_rays;
  for (int i = 0; i < n_rays; ++i) {
    if (fixed && fixed->filled) {
      if (!fixed->hits[begin + i]) continue;
      depths[i] = fixed->depths[begin + i];
      hit_rays.push_back(i);
      continue;
    }
    if (!rays[i].hits_bounds) continue;
    Pcg32 ray_rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (step + 1)),
                  0x5eedULL + static_cast<std::uint64_t>(begin + i));
    if (!cfg.importance_sampling) {
      depths[i] = stratified_depths(rays[i].z_near, rays[i].z_far, n_p, &ray_rng);
      hit_rays.push_back(i);
      continue;
    }
    std::vector<double> coarse =
        stratified_depths(rays[i].z_near, rays[i].z_far, n_coarse, &ray_rng);
    MatS<S> pts(3, n_coarse);
    for (int j = 0; j < n_coarse; ++j) pts.col(j) = rays[i].at(coarse[j]).cast<S>();
    std::vector<int> frames(n_coarse, rays[i].frame_index);
    VecS<S> sdf;
    field_sdf(params, progress, pts, frames, cfg.use_deformation, &sdf);
    VecS<S> alpha, trans, w;
    sdf_to_weights(sdf, h, &alpha, &trans, &w);
    std::vector<double> wv(n_coarse);
    for (int j = 0; j < n_coarse; ++j) wv[j] = static_cast<double>(w[j]);
    std::vector<double> fine = importance_depths(coarse, wv, n_fine, &ray_rng);
    depths[i] = merge_depths(std::move(coarse), fine);
    hit_rays.push_back(i);
  }
  if (fixed && !fixed->filled) {
    for (int i = 0; i < n_rays; ++i) {
      fixed->depths[begin + i] = depths[i];
      fixed->hits[begin + i] = rays[i].hits_bounds ? 1 : 0;
    }
  }
  const bool use_fixed_hits = fixed && fixed->filled;

  const int n_hit = static_cast<int>(hit_rays.size());
  const int n_samples = n_hit * n_p;

  FieldForward<S> fwd;
  std::vector<int> sample_frames(n_samples);
  MatS<S> positions(3, std::max(1, n_samples)), dirs(3, std::max(1, n_samples));
  for (int k = 0; k < n_hit; ++k) {
    const Ray& ray = rays[hit_rays[k]];
    for (int j = 0; j < n_p; ++j) {
      positions.col(k * n_p + j) = ray.at(depths[hit_rays[k]][j]).cast<S>();
      dirs.col(k * n_p + j) = ray.dir.cast<S>();
      sample_frames[k * n_p + j] = ray.frame_index;
    }
  }
  if (n_samples > 0) field_forward(params, progress, positions, dirs, sample_frames, &fwd);

  // Per-ray rendering + adjoint seeds.
  FieldAdjoints<S> adj;
  adj.s_bar = VecS<S>::Zero(std::max(1, n_samples));
  adj.n_bar = MatS<S>::Zero(3, std::max(1, n_samples));
  adj.c_bar = MatS<S>::Zero(3, std::max(1, n_samples));
  adj.l_bar = MatS<S>::Zero(3, std::max(1, n_samples));
  MatS<S> p_bar = MatS<S>::Zero(3, std::max(1, n_samples));
  MatS<S> d_bar = MatS<S>::Zero(3, std::max(1, n_samples));

  std::vector<VecS<S>> ray_alpha(n_hit);
  double sharp_bar = 0.0;  // d(loss)/d(sharpness h)

  const double ce_eps = 1e-6;
  for (int k = 0; k < n_hit; ++k) {
    int i = hit_rays[k];
    const RayRecord& rec = batch.rays[begin + i];
    VecS<S> sdf = fwd.s.segment(k * n_p, n_p);
    VecS<S> alpha, trans, w;
    sdf_to_weights(sdf, h, &alpha, &trans, &w);
    ray_alpha[k] = alpha;

    Eigen::Matrix<S, 3, 1> c_hat = Eigen::Matrix<S, 3, 1>::Zero();
    Eigen::Matrix<S, 3, 1> l_hat = Eigen::Matrix<S, 3, 1>::Zero();
    S o_hat = S(0);
    for (int j = 0; j < n_p; ++j) {
      c_hat += w[j] * fwd.color_out.col(k * n_p + j);
      l_hat += w[j] * fwd.logits.col(k * n_p + j);
      o_hat += w[j];
    }

    // Color term.
    Vec3 c_res = c_hat.template cast<double>() - rec.gt_color;
    loss->color += c_res.squaredNorm() / n_r_total;
    Vec3 c_hat_bar = 2.0 / n_r_total * c_res;

    // Mask term (binary cross-entropy on the clamped accumulated weight).
    double o = trainer_detail::clamp01(static_cast<double>(o_hat), ce_eps);
    double m = rec.gt_mask;
    loss->mask += -cfg.lambda_mask / n_r_total * (m * std::log(o) + (1 - m) * std::log(1 - o));
    double o_bar = 0.0;
    if (static_cast<double>(o_hat) > ce_eps && static_cast<double>(o_hat) < 1.0 - ce_eps)
      o_bar = cfg.lambda_mask / n_r_total * (o - m) / (o * (1 - o));

    // Semantic term (softmax cross-entropy of the rendered logits).
    Vec3 lh = l_hat.template cast<double>();
    double lmax = lh.maxCoeff();
    Vec3 ex = (lh.array() - lmax).exp();
    double denom = ex.sum();
    Vec3 softmax = ex / denom;
    loss->semantic += -cfg.lambda_semantic / n_r_total *
                      std::log(std::max(softmax[rec.gt_class], 1e-300));
    Vec3 l_hat_bar = cfg.lambda_semantic / n_r_total * softmax;
    l_hat_bar[rec.gt_class] -= cfg.lambda_semantic / n_r_total;

    // Weight adjoints from all three rendered quantities.
    VecS<S> w_bar(n_p);
    for (int j = 0; j < n_p; ++j) {
      double wb = c_hat_bar.dot(fwd.color_out.col(k * n_p + j).template cast<double>()) +
                  l_hat_bar.dot(fwd.logits.col(k * n_p + j).template cast<double>()) + o_bar;
      w_bar[j] = static_cast<S>(wb);
      adj.c_bar.col(k * n_p + j) = (w[j] * c_hat_bar.cast<S>().array()).matrix();
      adj.l_bar.col(k * n_p + j) = (w[j] * l_hat_bar.cast<S>().array()).matrix();
    }

    VecS<S> s_bar = VecS<S>::Zero(n_p);
    S ray_sharp_bar = S(0);
    sdf_to_weights_backward(sdf, h, alpha, trans, w, w_bar, &s_bar, &ray_sharp_bar);
    adj.s_bar.segment(k * n_p, n_p) += s_bar;
    sharp_bar += static_cast<double>(ray_sharp_bar);

    // Eikonal term over every rendered sample.
    for (int j = 0; j < n_p; ++j) {
      Vec3 g = fwd.grad_s.col(k * n_p + j).template cast<double>();
      double gn = g.norm();
      loss->eikonal += cfg.lambda_eikonal / (n_r_total * n_p) * (gn - 1.0) * (gn - 1.0);
      Vec3 nb = 2.0 * cfg.lambda_eikonal / (n_r_total * n_p) * (gn - 1.0) / std::max(gn, 1e-12) * g;
      adj.n_bar.col(k * n_p + j) += nb.cast<S>();
    }
  }

  // Rays that miss the bounds render empty; only the mask term sees them.
  for (int i = 0; i < n_rays; ++i) {
    if (use_fixed_hits ? fixed->hits[begin + i] : rays[i].hits_bounds) continue;
    double m = batch.rays[begin + i].gt_mask;
    double o = ce_eps;
    loss->mask += -cfg.lambda_mask / n_r_total * (m * std::log(o) + (1 - m) * std::log(1 - o));
  }

  // Deformation divergence regularizer, weighted by the detached discrete
  // opacity; zero-opacity samples contribute exactly nothing and are skipped.
  if (cfg.use_deformation && cfg.lambda_deform > 0 && n_samples > 0) {
    std::vector<int> active;  // sample indices with alpha > 0
    std::vector<double> rho;
    if (fixed && fixed->filled) {
      for (int k = 0; k < n_hit; ++k) {
        const auto& stored = fixed->rho[begin + hit_rays[k]];
        for (int j = 0; j < n_p; ++j)
          if (stored[j] > 0.0) {
            active.push_back(k * n_p + j);
            rho.push_back(stored[j]);
          }
      }
    } else {
      for (int k = 0; k < n_hit; ++k)
        for (int j = 0; j < n_p; ++j)
          if (ray_alpha[k][j] > S(0)) {
            active.push_back(k * n_p + j);
            rho.push_back(static_cast<double>(ray_alpha[k][j]));
          }
      if (fixed) {
        for (int k = 0; k < n_hit; ++k) {
          auto& stored = fixed->rho[begin + hit_rays[k]];
          stored.assign(n_p, 0.0);
          for (int j = 0; j < n_p; ++j) stored[j] = static_cast<double>(ray_alpha[k][j]);
        }
      }
    }
    if (!active.empty()) {
      const double fd_h = cfg.divergence_step;
      const int na = static_cast<int>(active.size());
      MatS<S> probe_pts(3, 6 * na);
      std::vector<int> probe_frames(6 * na);
      for (int a = 0; a < na; ++a) {
        Vec3 p = positions.col(active[a]).template cast<double>();
        for (int d = 0; d < 3; ++d) {
          Vec3 e = Vec3::Zero();
          e[d] = fd_h;
          probe_pts.col(6 * a + 2 * d) = (p + e).cast<S>();
          probe_pts.col(6 * a + 2 * d + 1) = (p - e).cast<S>();
          probe_frames[6 * a + 2 * d] = sample_frames[active[a]];
          probe_frames[6 * a + 2 * d + 1] = sample_frames[active[a]];
        }
      }
      FieldForward<S> probe_fwd;
      MatS<S> disp;
      deform_probe_forward(params, progress, probe_pts, probe_frames, &probe_fwd, &disp);

      MatS<S> disp_bar = MatS<S>::Zero(3, 6 * na);
      for (int a = 0; a < na; ++a) {
        double div = 0.0;
        for (int d = 0; d < 3; ++d)
          div += (static_cast<double>(disp(d, 6 * a + 2 * d)) -
                  static_cast<double>(disp(d, 6 * a + 2 * d + 1))) /
                 (2.0 * fd_h);
        double scale = cfg.lambda_deform / (n_r_total * n_p) * rho[a];
        loss->deform += scale * div * div;
        double dbar = scale * 2.0 * div / (2.0 * fd_h);
        disp_bar(0, 6 * a + 0) += static_cast<S>(dbar);
        disp_bar(0, 6 * a + 1) -= static_cast<S>(dbar);
        disp_bar(1, 6 * a + 2) += static_cast<S>(dbar);
        disp_bar(1, 6 * a + 3) -= static_cast<S>(dbar);
        disp_bar(2, 6 * a + 4) += static_cast<S>(dbar);
        disp_bar(2, 6 * a + 5) -= static_cast<S>(dbar);
      }
      MatS<S> probe_p_bar = MatS<S>::Zero(3, 6 * na);
      deform_probe_backward(params, probe_fwd, disp_bar, grads, &probe_p_bar);
      // Probe points move with the sample point: accumulate their adjoints.
      for (int a = 0; a < na; ++a)
        for (int c = 0; c < 6; ++c) p_bar.col(active[a]) += probe_p_bar.col(6 * a + c);
    }
  }

  if (n_samples > 0) {
    field_backward(params, fwd, adj, grads, &p_bar, &d_bar);
    grads->log_h_inv(params) += static_cast<S>(-static_cast<double>(h) * sharp_bar);
  }

  // Chain ray-space adjoints into the pose corrections.
  if (cfg.refine_poses && n_samples > 0) {
    for (int k = 0; k < n_hit; ++k) {
      int i = hit_rays[k];
      const RayRecord& rec = batch.rays[begin + i];
      auto corr = params.pose_correction(rec.frame);
      Vec3 crot(corr[0], corr[1], corr[2]);
      Eigen::Matrix<double, 3, 6> d_o, d_d;
      ray_jacobians(ds.camera, extr[i], crot, rec.row + 0.5, rec.col + 0.5, &d_o, &d_d);
      Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
      for (int j = 0; j < n_p; ++j) {
        Vec3 pb = p_bar.col(k * n_p + j).template cast<double>();
        Vec3 db = d_bar.col(k * n_p + j).template cast<double>();
        double z = depths[i][j];
        g += (d_o + z * d_d).transpose() * pb + d_d.transpose() * db;
      }
      grads->pose_correction(params, rec.frame) += g.cast<S>();
    }
  }
}

}  // namespace trainer_detail

// ---------------------------------------------------------------------------
// Optimizer (adaptive moments, cosine-decayed learning rates)
// ---------------------------------------------------------------------------

template <typename S>
struct AdamState {
  VecS<S> m, v;
  int step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamState(int n) : m(VecS<S>::Zero(n)), v(VecS<S>::Zero(n)) {}

  void update(FieldParams<S>* params, const FieldGrads<S>& grads, double lr_field,
              double lr_pose, double lr_sharpness) {
    ++step;
    double c1 = 1.0 - std::pow(beta1, step);
    double c2 = 1.0 - std::pow(beta2, step);
    const int pose_begin = params->pose_offset;
    const int pose_end = params->pose_offset + params->config.num_frames * 6;
    for (int i = 0; i < params->total; ++i) {
      double g = static_cast<double>(grads.values[i]);
      double mi = beta1 * static_cast<double>(m[i]) + (1 - beta1) * g;
      double vi = beta2 * static_cast<double>(v[i]) + (1 - beta2) * g * g;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      double lr = (i >= pose_begin && i < pose_end) ? lr_pose : lr_field;
      if (i == params->log_h_inv_offset) lr = lr_sharpness;
      double stepv = lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
      params->values[i] -= static_cast<S>(stepv);
    }
  }
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainLogRow {
  int step = 0;
  double l_color = 0, l_mask = 0, l_eikonal = 0, l_semantic = 0, l_deform = 0, total = 0;
  double pose_err_deg = std::numeric_limits<double>::quiet_NaN();
  double h_inv = 0;
};

inline void save_train_log(const std::vector<TrainLogRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "step,l_color,l_mask,l_eikonal,l_semantic,l_deform,total,pose_err_deg,h_inv\n";
  for (const auto& r : rows) {
    out << r.step << "," << format_double(r.l_color) << "," << format_double(r.l_mask) << ","
        << format_double(r.l_eikonal) << "," << format_double(r.l_semantic) << ","
        << format_double(r.l_deform) << "," << format_double(r.total) << ","
        << format_double(r.pose_err_deg) << "," << format_double(r.h_inv) << "\n";
  }
}

/// Mean rotation error (degrees) of the corrected poses against ground truth.
template <typename S>
double mean_pose_error_deg(const FieldParams<S>& params, const TrainDataset& ds,
                           const SceneNormalization& norm) {
  if (!ds.has_gt_poses()) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  for (int t = 0; t < ds.frames; ++t) {
    auto corr = params.pose_correction(t);
    Mat3 delta = rodrigues(Vec3(static_cast<double>(corr[0]), static_cast<double>(corr[1]),
                                static_cast<double>(corr[2])));
    // Corrected camera-to-world rotation in normalized space equals
    // delta * R_c2w; ground truth comparison is rotation-only.
    Mat3 c2w = ds.poses[t].inverse().rotation;
    Mat3 gt_c2w = ds.gt_poses[t].inverse().rotation;
    sum += rad2deg(rotation_angle_between(delta * c2w, gt_c2w));
  }
  return sum / ds.frames;
}

template <typename S>
struct TrainResult {
  FieldParams<S> params;
  std::vector<TrainLogRow> log;
  int nan_recoveries = 0;
};

/// Perturbs or replaces the dataset poses (experiment harness for the pose
/// ablations); modifies ds in place.
inline void perturb_dataset_poses(TrainDataset* ds, const TrainConfig& cfg) {
  if (cfg.random_pose_init) {
    Pcg32 rng(cfg.seed, 0x9a9dULL);
    for (auto& pose : ds->poses) {
      Vec3 axis(rng.normal(), rng.normal(), rng.normal());
      axis.normalize();
      double dist = pose.translation.norm();
      pose.rotation = rodrigues(axis * rng.uniform(0.0, kPi));
      pose.translation = Vec3(0.05 * rng.normal(), 0.05 * rng.normal(), dist);
    }
    return;
  }
  if (cfg.init_pose_noise_deg <= 0 && cfg.init_pose_noise_frac <= 0) return;
  Pcg32 rng(cfg.seed, 0x901feULL);
  for (auto& pose : ds->poses) {
    Vec3 axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    pose.rotation = rodrigues(axis * deg2rad(cfg.init_pose_noise_deg)) * pose.rotation;
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    pose.translation += dir * (cfg.init_pose_noise_frac * pose.translation.norm());
  }
}

template <typename S>
TrainResult<S> train_field(const TrainDataset& ds, const TrainConfig& config,
                           const std::string& checkpoint_dir = "",
                           const std::string& resume_path = "") {
  TrainConfig cfg = config;
  cfg.field.num_frames = ds.frames;
  cfg.field.use_deformation = cfg.use_deformation;
  SceneNormalization norm = make_normalization(ds);

  TrainResult<S> result{make_field_params<S>(cfg.field), {}, 0};
  AdamState<S> adam(result.params.total);
  Pcg32 rng(cfg.seed, 0x7ea1ULL);
  int start_step = 0;

  if (!resume_path.empty()) {
    nlohmann::json state;
    std::vector<VecS<S>> blocks;
    result.params = load_checkpoint<S>(resume_path, &state, &blocks);
    if (blocks.size() != 2) throw std::runtime_error("checkpoint missing optimizer state");
    adam.m = blocks[0];
    adam.v = blocks[1];
    adam.step = state.at("adam_step").get<int>();
    start_step = state.at("train_step").get<int>();
    rng.restore(std::stoull(state.at("rng_state").get<std::string>()),
                std::stoull(state.at("rng_inc").get<std::string>()));
  } else {
    geometric_init(&result.params, cfg.seed);
  }

  auto write_checkpoint = [&](int step, const std::string& path) {
    nlohmann::json state{{"train_step", step},
                         {"adam_step", adam.step},
                         {"rng_state", std::to_string(rng.state())},
                         {"rng_inc", std::to_string(rng.inc())}};
    save_checkpoint(result.params, path, state, {&adam.m, &adam.v});
  };

  // In-memory snapshot for the non-finite-loss recovery path.
  struct Snapshot {
    VecS<S> params, m, v;
    int adam_step = 0, train_step = 0;
    std::uint64_t rng_state = 0, rng_inc = 0;
  } snap;
  auto take_snapshot = [&](int step) {
    snap.params = result.params.values;
    snap.m = adam.m;
    snap.v = adam.v;
    snap.adam_step = adam.step;
    snap.train_step = step;
    snap.rng_state = rng.state();
    snap.rng_inc = rng.inc();
  };
  take_snapshot(start_step);

  double lr_scale = 1.0;
  int retries = 0;
  const int threads = cfg.threads > 0 ? cfg.threads
                                      : static_cast<int>(std::thread::hardware_concurrency());

  const int end_step = cfg.stop_at_step > 0 ? std::min(cfg.stop_at_step, cfg.total_steps)
                                            : cfg.total_steps;
  for (int step = start_step; step < end_step; ++step) {
    // The coarse-to-fine encoding window belongs to the camera-refinement
    // strategy; without pose refinement the full encoding is active from the
    // start, as in the plain surface-reconstruction baseline.
    double progress = 1.0;
    if (cfg.refine_poses && cfg.total_steps > 0)
      progress = static_cast<double>(step) / cfg.total_steps;
    SampleBatch batch = sample_rays(ds, step, cfg, &rng);

    const int n_rays = static_cast<int>(batch.rays.size());
    const int n_chunks = (n_rays + cfg.chunk_rays - 1) / cfg.chunk_rays;
    std::vector<FieldGrads<S>> chunk_grads(n_chunks, FieldGrads<S>(result.params));
    std::vector<LossBreakdown> chunk_loss(n_chunks);
    parallel_chunks(
        n_chunks,
        [&](int c) {
          int lo = c * cfg.chunk_rays;
          int hi = std::min(n_rays, lo + cfg.chunk_rays);
          trainer_detail::process_chunk(result.params, ds, norm, cfg, batch, lo, hi, progress,
                                        step, &chunk_grads[c], &chunk_loss[c]);
        },
        threads);

    FieldGrads<S>& grads = chunk_grads[0];
    LossBreakdown loss = chunk_loss[0];
    for (int c = 1; c < n_chunks; ++c) {
      grads.values += chunk_grads[c].values;
      loss.color += chunk_loss[c].color;
      loss.mask += chunk_loss[c].mask;
      loss.eikonal += chunk_loss[c].eikonal;
      loss.semantic += chunk_loss[c].semantic;
      loss.deform += chunk_loss[c].deform;
    }

    if (!std::isfinite(loss.total())) {
      if (++retries > 3)
        throw std::runtime_error("training diverged: non-finite loss after 3 retries");
      // Restore the last snapshot and continue with a halved learning rate.
      result.params.values = snap.params;
      adam.m = snap.m;
      adam.v = snap.v;
      adam.step = snap.adam_step;
      rng.restore(snap.rng_state, snap.rng_inc);
      step = snap.train_step - 1;
      lr_scale *= 0.5;
      ++result.nan_recoveries;
      continue;
    }

    // Cosine-decayed learning rates with a floor.
    double decay = 0.05 + 0.95 * 0.5 * (1.0 + std::cos(kPi * progress));
    if (!cfg.refine_poses) {
      // Freeze the corrections entirely.
      std::fill(grads.values.data() + result.params.pose_offset,
                grads.values.data() + result.params.pose_offset + ds.frames * 6, S(0));
    }
    adam.update(&result.params, grads, lr_scale * cfg.lr_field * decay,
                lr_scale * cfg.lr_pose * decay,
                lr_scale * cfg.lr_field * cfg.h_lr_multiplier * decay);

    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      TrainLogRow row;
      row.step = step;
      row.l_color = loss.color;
      row.l_mask = loss.mask;
      row.l_eikonal = loss.eikonal;
      row.l_semantic = loss.semantic;
      row.l_deform = loss.deform;
      row.total = loss.total();
      row.pose_err_deg = mean_pose_error_deg(result.params, ds, norm);
      row.h_inv = static_cast<double>(result.params.h_inv());
      result.log.push_back(row);
      take_snapshot(step + 1);
      if (!checkpoint_dir.empty()) save_train_log(result.log, checkpoint_dir + "/train_log.csv");
    }
    if (!checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0) {
      write_checkpoint(step + 1, checkpoint_dir + "/checkpoint.bin");
    }
  }
  if (!checkpoint_dir.empty()) write_checkpoint(end_step, checkpoint_dir + "/checkpoint.bin");
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation renders and mesh extraction
// ---------------------------------------------------------------------------

struct ViewRender {
  Image color;
  Image weight;     // accumulated weight, grayscale
  Image semantics;  // argmax class in the red channel
};

template <typename S>
ViewRender render_view(const FieldParams<S>& params, const TrainDataset& ds, int frame,
                       double progress = 1.0, int samples_per_ray = 64,
                       std::uint64_t seed = 9, int threads = 0) {
  SceneNormalization norm = make_normalization(ds);
  ViewRender out;
  out.color = Image::make(ds.width, ds.height, 3, 0);
  out.weight = Image::make(ds.width, ds.height, 1, 0);
  out.semantics = Image::make(ds.width, ds.height, 3, 0);
  const SphereBounds unit{Vec3::Zero(), 1.0};
  const S h = params.sharpness();
  const int n_c = samples_per_ray / 2, n_f = samples_per_ray - n_c;
  RigidTransform extr = normalized_extrinsics(ds.poses[frame], norm);
  auto corr = params.pose_correction(frame);
  Vec3 crot(static_cast<double>(corr[0]), static_cast<double>(corr[1]),
            static_cast<double>(corr[2]));
  Vec3 ctra(static_cast<double>(corr[3]), static_cast<double>(corr[4]),
            static_cast<double>(corr[5]));

  const int rows_per_chunk = 8;
  int n_chunks = (ds.height + rows_per_chunk - 1) / rows_per_chunk;
  parallel_chunks(
      n_chunks,
      [&](int chunk) {
        FieldForward<S> fwd;
        for (int r = chunk * rows_per_chunk;
             r < std::min(ds.height, (chunk + 1) * rows_per_chunk); ++r) {
          for (int c = 0; c < ds.width; ++c) {
            Ray ray = make_ray(ds.camera, extr, crot, ctra, r + 0.5, c + 0.5, unit);
            if (!ray.hits_bounds) continue;
            Pcg32 ray_rng(seed, 0xf00dULL + static_cast<std::uint64_t>(r) * ds.width + c);
            std::vector<double> coarse = stratified_depths(ray.z_near, ray.z_far, n_c, &ray_rng);
            MatS<S> pts(3, n_c);
            for (int j = 0; j < n_c; ++j) pts.col(j) = ray.at(coarse[j]).cast<S>();
            std::vector<int> fr(n_c, frame);
            VecS<S> sdf;
            field_sdf(params, progress, pts, fr, params.config.use_deformation, &sdf);
            VecS<S> alpha, trans, w;
            sdf_to_weights(sdf, h, &alpha, &trans, &w);
            std::vector<double> wv(n_c);
            for (int j = 0; j < n_c; ++j) wv[j] = static_cast<double>(w[j]);
            std::vector<double> z = merge_depths(coarse, importance_depths(coarse, wv, n_f, &ray_rng));

            const int np = static_cast<int>(z.size());
            MatS<S> positions(3, np), dirs(3, np);
            std::vector<int> frames(np, frame);
            for (int j = 0; j < np; ++j) {
              positions.col(j) = ray.at(z[j]).cast<S>();
              dirs.col(j) = ray.dir.cast<S>();
            }
            field_forward(params, progress, positions, dirs, frames, &fwd);
            VecS<S> a2, t2, w2;
            sdf_to_weights(fwd.s, h, &a2, &t2, &w2);
            auto res = render_quadrature<S>(w2, fwd.color_out, fwd.logits);
            for (int ch = 0; ch < 3; ++ch) {
              double v = std::min(1.0, std::max(0.0, static_cast<double>(res.color[ch])));
              out.color.at(r, c, ch) = static_cast<unsigned char>(std::lround(255 * v));
            }
            double ow = std::min(1.0, std::max(0.0, static_cast<double>(res.accumulated)));
            out.weight.at(r, c) = static_cast<unsigned char>(std::lround(255 * ow));
            if (ow > 0.5) {
              int cls = 0;
              res.logits.maxCoeff(&cls);
              out.semantics.at(r, c, 0) = static_cast<unsigned char>(cls);
            }
          }
        }
      },
      threads);
  return out;
}

/// Marching cubes over the canonical-space field at the zero level set;
/// vertices carry argmax semantic labels (view-independent by construction).
template <typename S>
TriMesh extract_field_mesh(const FieldParams<S>& params, const TrainDataset& ds,
                           int resolution, double progress = 1.0, int threads = 0) {
  SceneNormalization norm = make_normalization(ds);
  ScalarGrid grid;
  grid.lo = Vec3::Constant(-1.0);
  grid.hi = Vec3::Constant(1.0);
  grid.nx = grid.ny = grid.nz = resolution;
  grid.values.resize(static_cast<std::size_t>(resolution + 1) * (resolution + 1) *
                     (resolution + 1));

  const int rows = resolution + 1;
  parallel_chunks(
      rows,
      [&](int k) {
        MatS<S> pts(3, rows * rows);
        std::vector<int> frames(rows * rows, 0);
        int at = 0;
        for (int j = 0; j < rows; ++j)
          for (int i = 0; i < rows; ++i) pts.col(at++) = grid.position(i, j, k).cast<S>();
        VecS<S> sdf;
        field_sdf(params, progress, pts, frames, false, &sdf);
        at = 0;
        for (int j = 0; j < rows; ++j)
          for (int i = 0; i < rows; ++i) grid.at(i, j, k) = static_cast<double>(sdf[at++]);
      },
      threads);

  TriMesh mesh = marching_cubes(grid);

  // Vertex labels from the semantic head (canonical space, no deformation).
  if (!mesh.vertices.empty()) {
    mesh.labels.resize(mesh.vertices.size());
    const int chunk = 4096;
    int n_chunks = (static_cast<int>(mesh.vertices.size()) + chunk - 1) / chunk;
    parallel_chunks(
        n_chunks,
        [&](int ci) {
          int lo = ci * chunk;
          int hi = std::min<int>(static_cast<int>(mesh.vertices.size()), lo + chunk);
          MatS<S> pts(3, hi - lo), dirs(3, hi - lo);
          std::vector<int> frames(hi - lo, 0);
          for (int i = lo; i < hi; ++i) {
            pts.col(i - lo) = mesh.vertices[i].cast<S>();
            dirs.col(i - lo) = Vec3::UnitZ().cast<S>();
          }
          FieldForward<S> fwd;
          field_forward(params, progress, pts, dirs, frames, &fwd);
          for (int i = lo; i < hi; ++i) {
            int cls = 0;
            fwd.logits.col(i - lo).maxCoeff(&cls);
            mesh.labels[i] = static_cast<std::uint8_t>(cls);
          }
        },
        threads);
  }

  // Back to canonical coordinates.
  for (auto& v : mesh.vertices) v = norm.to_canonical(v);
  return mesh;
}

}  // namespace inhand

#endif  // INHAND_TRAINER_HPP
