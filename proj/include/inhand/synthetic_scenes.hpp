// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Ground-truth factory: an analytic hand-proxy + object rig with scripted
// relative motion, sphere-traced reference renders with exact masks and
// semantics, noisy keypoints, and dataset export. Everything a capture stack
// would provide, with analytic ground truth attached.

#ifndef INHAND_SYNTHETIC_SCENES_HPP
#define INHAND_SYNTHETIC_SCENES_HPP

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "inhand/hand_tracking.hpp"
#include "inhand/image.hpp"
#include "inhand/mesh.hpp"

namespace inhand {

// ---------------------------------------------------------------------------
// Scene specification
// ---------------------------------------------------------------------------

struct ScenePrimitive {
  enum class Kind { Sphere, Box, Torus };
  Kind kind = Kind::Sphere;
  Vec3 center = Vec3::Zero();        // in object frame
  double radius = 0.03;              // sphere radius / torus minor radius
  Vec3 half_extents = Vec3::Zero();  // box
  double major_radius = 0.0;         // torus
  Vec3 albedo = Vec3(0.8, 0.3, 0.25);
};

struct SceneSpec {
  std::string name = "scene";
  std::uint64_t seed = 1;
  int frames = 40;
  int width = 128;
  int height = 128;

  std::vector<ScenePrimitive> object;     // union of primitives
  Vec3 object_center = Vec3(0.015, 0.105, 0.035);  // object frame origin, canonical space

  double hand_capsule_radius = 0.009;
  double palm_radius = 0.021;
  Vec3 hand_albedo = Vec3(0.80, 0.62, 0.52);
  double grasp_curl = 0.55;  // finger flexion of the fixed grasp, radians

  double camera_distance = 0.55;
  double rotation_sweep_deg = 130.0;
  double elevation_sweep_deg = 25.0;
  double wobble = 0.015;  // translation drift amplitude, scene units

  double jitter_rot_deg = 0.0;  // object-relative SE(3) drift amplitudes
  double jitter_trans = 0.0;

  double keypoint_noise_px = 0.0;
  double outlier_frame_rate = 0.0;

  Vec3 light_dir = Vec3(0.35, -0.45, -0.82);  // camera space, toward the light
  double ambient = 0.25;

  int gt_mesh_resolution = 160;
};

inline void to_json(nlohmann::json& j, const ScenePrimitive& p) {
  const char* kinds[] = {"sphere", "box", "torus"};
  j = nlohmann::json{{"kind", kinds[static_cast<int>(p.kind)]},
                     {"center", {p.center.x(), p.center.y(), p.center.z()}},
                     {"radius", p.radius},
                     {"half_extents", {p.half_extents.x(), p.half_extents.y(), p.half_extents.z()}},
                     {"major_radius", p.major_radius},
                     {"albedo", {p.albedo.x(), p.albedo.y(), p.albedo.z()}}};
}

inline void from_json(const nlohmann::json& j, ScenePrimitive& p) {
  std::string kind = j.value("kind", "sphere");
  if (kind == "sphere") p.kind = ScenePrimitive::Kind::Sphere;
  else if (kind == "box") p.kind = ScenePrimitive::Kind::Box;
  else if (kind == "torus") p.kind = ScenePrimitive::Kind::Torus;
  else throw std::runtime_error("unknown primitive kind: " + kind);
  auto vec = [&](const char* key, Vec3 fallback) {
    if (!j.contains(key)) return fallback;
    auto a = j.at(key).get<std::array<double, 3>>();
    return Vec3(a[0], a[1], a[2]);
  };
  p.center = vec("center", Vec3::Zero());
  p.radius = j.value("radius", 0.03);
  p.half_extents = vec("half_extents", Vec3::Zero());
  p.major_radius = j.value("major_radius", 0.0);
  p.albedo = vec("albedo", Vec3(0.8, 0.3, 0.25));
}

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = nlohmann::json{
      {"name", s.name},
      {"seed", s.seed},
      {"frames", s.frames},
      {"width", s.width},
      {"height", s.height},
      {"object", s.object},
      {"object_center", {s.object_center.x(), s.object_center.y(), s.object_center.z()}},
      {"hand_capsule_radius", s.hand_capsule_radius},
      {"palm_radius", s.palm_radius},
      {"hand_albedo", {s.hand_albedo.x(), s.hand_albedo.y(), s.hand_albedo.z()}},
      {"grasp_curl", s.grasp_curl},
      {"camera_distance", s.camera_distance},
      {"rotation_sweep_deg", s.rotation_sweep_deg},
      {"elevation_sweep_deg", s.elevation_sweep_deg},
      {"wobble", s.wobble},
      {"jitter_rot_deg", s.jitter_rot_deg},
      {"jitter_trans", s.jitter_trans},
      {"keypoint_noise_px", s.keypoint_noise_px},
      {"outlier_frame_rate", s.outlier_frame_rate},
      {"light_dir", {s.light_dir.x(), s.light_dir.y(), s.light_dir.z()}},
      {"ambient", s.ambient},
      {"gt_mesh_resolution", s.gt_mesh_resolution}};
}

inline void from_json(const nlohmann::json& j, SceneSpec& s) {
  SceneSpec d;
  auto vec = [&](const char* key, Vec3 fallback) {
    if (!j.contains(key)) return fallback;
    auto a = j.at(key).get<std::array<double, 3>>();
    return Vec3(a[0], a[1], a[2]);
  };
  s.name = j.value("name", d.name);
  s.seed = j.value("seed", d.seed);
  s.frames = j.value("frames", d.frames);
  s.width = j.value("width", d.width);
  s.height = j.value("height", d.height);
  if (j.contains("object")) s.object = j.at("object").get<std::vector<ScenePrimitive>>();
  s.object_center = vec("object_center", d.object_center);
  s.hand_capsule_radius = j.value("hand_capsule_radius", d.hand_capsule_radius);
  s.palm_radius = j.value("palm_radius", d.palm_radius);
  s.hand_albedo = vec("hand_albedo", d.hand_albedo);
  s.grasp_curl = j.value("grasp_curl", d.grasp_curl);
  s.camera_distance = j.value("camera_distance", d.camera_distance);
  s.rotation_sweep_deg = j.value("rotation_sweep_deg", d.rotation_sweep_deg);
  s.elevation_sweep_deg = j.value("elevation_sweep_deg", d.elevation_sweep_deg);
  s.wobble = j.value("wobble", d.wobble);
  s.jitter_rot_deg = j.value("jitter_rot_deg", d.jitter_rot_deg);
  s.jitter_trans = j.value("jitter_trans", d.jitter_trans);
  s.keypoint_noise_px = j.value("keypoint_noise_px", d.keypoint_noise_px);
  s.outlier_frame_rate = j.value("outlier_frame_rate", d.outlier_frame_rate);
  s.light_dir = vec("light_dir", d.light_dir);
  s.ambient = j.value("ambient", d.ambient);
  s.gt_mesh_resolution = j.value("gt_mesh_resolution", d.gt_mesh_resolution);
  if (s.object.empty()) {
    ScenePrimitive sphere;
    sphere.radius = 0.035;
    s.object.push_back(sphere);
  }
}

// ---------------------------------------------------------------------------
// Scene geometry
// ---------------------------------------------------------------------------

namespace scenes {

inline double sphere_sdf(const Vec3& p, double r) { return p.norm() - r; }

inline double box_sdf(const Vec3& p, const Vec3& b) {
  Vec3 q = p.cwiseAbs() - b;
  return q.cwiseMax(0.0).norm() + std::min(0.0, q.maxCoeff());
}

inline double torus_sdf(const Vec3& p, double major, double minor) {
  double qx = std::sqrt(p.x() * p.x() + p.z() * p.z()) - major;
  return std::sqrt(qx * qx + p.y() * p.y()) - minor;
}

inline double capsule_sdf(const Vec3& p, const Vec3& a, const Vec3& b, double r) {
  Vec3 pa = p - a, ba = b - a;
  double denom = ba.squaredNorm();
  double h = denom > 0 ? std::min(1.0, std::max(0.0, pa.dot(ba) / denom)) : 0.0;
  return (pa - h * ba).norm() - r;
}

}  // namespace scenes

/// The fixed grasp pose used for the hand proxy: every finger flexed by the
/// configured curl (thumb a bit less).
inline HandPose grasp_pose(double curl) {
  HandPose pose;
  for (int f = 0; f < 5; ++f) {
    double c = f == 0 ? 0.6 * curl : curl;
    pose.joint_rotations[3 * (3 * f) + 0] = 0.8 * c;
    pose.joint_rotations[3 * (3 * f + 1) + 0] = c;
    pose.joint_rotations[3 * (3 * f + 2) + 0] = 0.6 * c;
  }
  return pose;
}

/// Instantiated scene: canonical-space hand capsules, per-frame object poses
/// (base + smooth jitter), per-frame hand-to-camera roots, and the camera.
class SyntheticScene {
 public:
  explicit SyntheticScene(const SceneSpec& spec) : spec_(spec) {
    camera_ = Camera::from_image_size(spec.width, spec.height);
    pose_ = grasp_pose(spec.grasp_curl);
    joints_ = forward_kinematics(HandShape{}, pose_, RigidTransform::identity());

    // Hand capsules: one per bone, plus a thick palm capsule.
    const Skeleton& skel = canonical_skeleton();
    for (int i = 1; i < kNumJoints; ++i) {
      capsules_.push_back({joints_[skel.parents[i]], joints_[i], spec.hand_capsule_radius});
    }
    capsules_.push_back({Vec3(0, -0.01, 0), 0.55 * (joints_[5] + joints_[9]), spec.palm_radius});

    // Hand-to-camera trajectory: rotation sweep with elevation and drift.
    for (int t = 0; t < spec.frames; ++t) {
      double phase = spec.frames > 1 ? static_cast<double>(t) / (spec.frames - 1) : 0.5;
      double yaw = deg2rad(spec.rotation_sweep_deg) * (phase - 0.5);
      double pitch = deg2rad(spec.elevation_sweep_deg) * std::sin(phase * 2.0 * kPi);
      Mat3 r = rodrigues(Vec3(kPi, 0, 0)) * rodrigues(Vec3(0, yaw, 0)) *
               rodrigues(Vec3(pitch, 0, 0));
      Vec3 center_offset = -r * hand_center();  // keep the grasp centered in view
      Vec3 drift(spec.wobble * std::sin(phase * 3.1), spec.wobble * std::cos(phase * 2.3),
                 0.15 * spec.wobble * std::sin(phase * 4.7));
      RigidTransform root{r, Vec3(0, 0, spec.camera_distance) + center_offset + drift};
      roots_.push_back(root);
    }

    // Object jitter: integrated Gaussian increments, zero at frame 0.
    Pcg32 rng(spec.seed, kObjectStream);
    Vec3 rot_walk = Vec3::Zero(), trans_walk = Vec3::Zero();
    double rot_step = deg2rad(spec.jitter_rot_deg) / std::sqrt(std::max(1, spec.frames));
    double trans_step = spec.jitter_trans / std::sqrt(std::max(1, spec.frames));
    for (int t = 0; t < spec.frames; ++t) {
      object_poses_.push_back(RigidTransform::from_axis_angle(rot_walk, trans_walk));
      rot_walk += rot_step * Vec3(rng.normal(), rng.normal(), rng.normal());
      trans_walk += trans_step * Vec3(rng.normal(), rng.normal(), rng.normal());
    }
  }

  const SceneSpec& spec() const { return spec_; }
  const Camera& camera() const { return camera_; }
  const HandPose& hand_pose() const { return pose_; }
  const JointArray& joints() const { return joints_; }
  const RigidTransform& root(int frame) const { return roots_.at(frame); }
  const RigidTransform& object_pose(int frame) const { return object_poses_.at(frame); }
  int frames() const { return spec_.frames; }

  HandSequenceParams ground_truth_params() const {
    HandSequenceParams p;
    p.pose = pose_;
    for (const auto& r : roots_) p.frames.push_back({r});
    return p;
  }

  /// Signed distance + semantic label + albedo of the full scene at a
  /// canonical-space point, with the object posed for the given frame.
  double sdf(const Vec3& p, int frame, std::uint8_t* label = nullptr,
             Vec3* albedo = nullptr) const {
    double best = std::numeric_limits<double>::infinity();
    if (label) *label = kLabelBackground;
    for (const auto& c : capsules_) {
      double d = scenes::capsule_sdf(p, c.a, c.b, c.radius);
      if (d < best) {
        best = d;
        if (label) *label = kLabelHand;
        if (albedo) *albedo = spec_.hand_albedo;
      }
    }
    double od = object_sdf(p, frame, albedo ? albedo : nullptr, best);
    if (od < best) {
      best = od;
      if (label) *label = kLabelObject;
    }
    return best;
  }

  /// Object-only SDF (canonical space, frame pose applied).
  double object_sdf(const Vec3& p, int frame, Vec3* albedo = nullptr,
                    double current_best = std::numeric_limits<double>::infinity()) const {
    const RigidTransform& pose = frame >= 0 ? object_poses_.at(frame) : RigidTransform{};
    Vec3 local = pose.inverse().apply(p) - spec_.object_center;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& prim : spec_.object) {
      Vec3 q = local - prim.center;
      double d = 0;
      switch (prim.kind) {
        case ScenePrimitive::Kind::Sphere: d = scenes::sphere_sdf(q, prim.radius); break;
        case ScenePrimitive::Kind::Box: d = scenes::box_sdf(q, prim.half_extents); break;
        case ScenePrimitive::Kind::Torus:
          d = scenes::torus_sdf(q, prim.major_radius, prim.radius);
          break;
      }
      if (d < best) {
        best = d;
        if (albedo && d < current_best) *albedo = prim.albedo;
      }
    }
    return best;
  }

  /// Hand-only SDF (static in canonical space).
  double hand_sdf(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : capsules_) best = std::min(best, scenes::capsule_sdf(p, c.a, c.b, c.radius));
    return best;
  }

  SphereBounds keypoint_bounds(double margin = 1.5) const {
    return keypoint_bounding_sphere(joints_, margin);
  }

 private:
  struct CapsuleSeg {
    Vec3 a, b;
    double radius;
  };

  Vec3 hand_center() const {
    Vec3 c = Vec3::Zero();
    for (const auto& j : joints_) c += j;
    return c / static_cast<double>(kNumJoints);
  }

  static constexpr std::uint64_t kObjectStream = 0xb1ec7;

  SceneSpec spec_;
  Camera camera_;
  HandPose pose_;
  JointArray joints_;
  std::vector<CapsuleSeg> capsules_;
  std::vector<RigidTransform> roots_;
  std::vector<RigidTransform> object_poses_;
};

// ---------------------------------------------------------------------------
// Reference rendering (sphere tracing + Lambert shading)
// ---------------------------------------------------------------------------

struct FrameRecord {
  Image color;
  Image mask;
  Image semantics;
};

inline FrameRecord render_reference(const SyntheticScene& scene, int frame,
                                    double trace_tol = 1e-5, int max_steps = 256) {
  const SceneSpec& spec = scene.spec();
  const Camera& cam = scene.camera();
  FrameRecord rec;
  rec.color = Image::make(spec.width, spec.height, 3, 0);
  rec.mask = Image::make(spec.width, spec.height, 1, 0);
  rec.semantics = Image::make(spec.width, spec.height, 3, 0);

  RigidTransform cam_to_world = scene.root(frame).inverse();
  Vec3 light = (cam_to_world.rotation * spec.light_dir.normalized());
  double max_depth = 3.0 * spec.camera_distance;

  for (int r = 0; r < spec.height; ++r) {
    for (int c = 0; c < spec.width; ++c) {
      Vec3 dc((c + 0.5 - cam.intrinsics(0, 2)) / cam.intrinsics(0, 0),
              (r + 0.5 - cam.intrinsics(1, 2)) / cam.intrinsics(1, 1), 1.0);
      Vec3 o = cam_to_world.translation;
      Vec3 d = (cam_to_world.rotation * dc).normalized();

      double t = 1e-3;
      bool hit = false;
      for (int step = 0; step < max_steps && t < max_depth; ++step) {
        double dist = scene.sdf(o + t * d, frame);
        if (dist < trace_tol) {
          hit = true;
          break;
        }
        t += dist;
      }
      if (!hit) continue;

      Vec3 p = o + t * d;
      std::uint8_t label = kLabelBackground;
      Vec3 albedo = Vec3::Ones();
      scene.sdf(p, frame, &label, &albedo);
      const double h = 1e-5;
      Vec3 n(scene.sdf(p + Vec3(h, 0, 0), frame) - scene.sdf(p - Vec3(h, 0, 0), frame),
             scene.sdf(p + Vec3(0, h, 0), frame) - scene.sdf(p - Vec3(0, h, 0), frame),
             scene.sdf(p + Vec3(0, 0, h), frame) - scene.sdf(p - Vec3(0, 0, h), frame));
      n.normalize();
      double shade = spec.ambient + (1.0 - spec.ambient) * std::max(0.0, n.dot(light));
      for (int ch = 0; ch < 3; ++ch) {
        double v = std::min(1.0, albedo[ch] * shade);
        rec.color.at(r, c, ch) = static_cast<unsigned char>(std::lround(255.0 * v));
      }
      rec.mask.at(r, c) = 255;
      rec.semantics.at(r, c, 0) = label;
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Keypoints
// ---------------------------------------------------------------------------

/// Noisy 2D keypoints for one frame. Outlier frames replace every point with
/// uniform image coordinates at full confidence; joints behind the camera get
/// confidence zero.
inline KeypointFrame make_keypoints(const SyntheticScene& scene, int frame, double sigma_px,
                                    double outlier_frame_rate) {
  const Camera& cam = scene.camera();
  Pcg32 rng(scene.spec().seed ^ 0x6e5u, 0x1000 + static_cast<std::uint64_t>(frame));
  KeypointFrame out;
  bool outlier_frame = rng.uniform() < outlier_frame_rate;
  for (int j = 0; j < kNumJoints; ++j) {
    Vec3 pc = scene.root(frame).apply(scene.joints()[j]);
    if (outlier_frame) {
      out.points[j] = Vec3(rng.uniform(0, cam.width), rng.uniform(0, cam.height), 1.0);
      continue;
    }
    if (pc.z() <= 0.0) {
      out.points[j] = Vec3(0, 0, 0.0);
      continue;
    }
    Vec3 h = cam.intrinsics * pc;
    Vec2 uv(h.x() / h.z(), h.y() / h.z());
    uv += sigma_px * Vec2(rng.normal(), rng.normal());
    out.points[j] = Vec3(uv.x(), uv.y(), 1.0);
  }
  return out;
}

inline KeypointObservations make_observations(const SyntheticScene& scene) {
  KeypointObservations obs;
  for (int t = 0; t < scene.frames(); ++t)
    obs.frames.push_back(make_keypoints(scene, t, scene.spec().keypoint_noise_px,
                                        scene.spec().outlier_frame_rate));
  return obs;
}

// ---------------------------------------------------------------------------
// Ground-truth meshes and dataset export
// ---------------------------------------------------------------------------

inline TriMesh ground_truth_mesh(const SyntheticScene& scene, bool object_part,
                                 int resolution) {
  SphereBounds bounds = scene.keypoint_bounds(1.5);
  ScalarGrid grid;
  grid.lo = bounds.center - Vec3::Constant(bounds.radius);
  grid.hi = bounds.center + Vec3::Constant(bounds.radius);
  grid.nx = grid.ny = grid.nz = resolution;
  grid.values.resize(static_cast<std::size_t>(resolution + 1) * (resolution + 1) *
                     (resolution + 1));
  for (int k = 0; k <= resolution; ++k)
    for (int j = 0; j <= resolution; ++j)
      for (int i = 0; i <= resolution; ++i) {
        Vec3 p = grid.position(i, j, k);
        grid.at(i, j, k) = object_part ? scene.object_sdf(p, -1) : scene.hand_sdf(p);
      }
  return marching_cubes(grid);
}

/// Writes the full dataset layout. Returns the manifest.
inline nlohmann::json export_dataset(const SceneSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  SyntheticScene scene(spec);

  // The object must sit inside the margined keypoint bounding sphere, or the
  // reconstruction stage would clip it.
  SphereBounds bounds = scene.keypoint_bounds(1.5);
  for (const auto& prim : spec.object) {
    double extent = std::max({prim.radius + prim.major_radius, prim.half_extents.norm()});
    Vec3 center = spec.object_center + prim.center;
    if ((center - bounds.center).norm() + extent > bounds.radius)
      throw std::runtime_error("scene spec: object extends outside the keypoint bounding sphere");
  }

  std::error_code ec;
  fs::create_directories(out_dir + "/frames", ec);
  fs::create_directories(out_dir + "/gt", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory: " + out_dir);

  char name[64];
  for (int t = 0; t < spec.frames; ++t) {
    FrameRecord rec = render_reference(scene, t);
    std::snprintf(name, sizeof(name), "/frames/%04d_color.png", t);
    write_png(rec.color, out_dir + name);
    std::snprintf(name, sizeof(name), "/frames/%04d_mask.png", t);
    write_png(rec.mask, out_dir + name);
    std::snprintf(name, sizeof(name), "/frames/%04d_sem.png", t);
    write_png(rec.semantics, out_dir + name);
  }

  // Cameras: shared intrinsics, per-frame extrinsics (the hand roots).
  nlohmann::json cameras = nlohmann::json::array();
  for (int t = 0; t < spec.frames; ++t) {
    Camera cam = scene.camera();
    cam.extrinsics = scene.root(t);
    cameras.push_back(cam);
  }
  {
    std::ofstream out(out_dir + "/cameras.json");
    out << cameras.dump(2) << "\n";
  }

  KeypointObservations obs = make_observations(scene);
  save_keypoints_jsonl(obs, out_dir + "/keypoints.jsonl");

  save_sequence_params(scene.ground_truth_params(), out_dir + "/gt/poses.json");
  save_ply(ground_truth_mesh(scene, true, spec.gt_mesh_resolution), out_dir + "/gt/object.ply");
  save_ply(ground_truth_mesh(scene, false, spec.gt_mesh_resolution), out_dir + "/gt/hand.ply");

  nlohmann::json manifest{{"format", "inhand-dataset-v1"},
                          {"name", spec.name},
                          {"frames", spec.frames},
                          {"width", spec.width},
                          {"height", spec.height},
                          {"seed", spec.seed},
                          {"skeleton_version", canonical_skeleton().version},
                          {"spec", spec},
                          {"paths",
                           {{"frames", "frames"},
                            {"cameras", "cameras.json"},
                            {"keypoints", "keypoints.jsonl"},
                            {"gt_object", "gt/object.ply"},
                            {"gt_hand", "gt/hand.ply"},
                            {"gt_poses", "gt/poses.json"}}}};
  {
    std::ofstream out(out_dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
  }
  return manifest;
}

}  // namespace inhand

#endif  // INHAND_SYNTHETIC_SCENES_HPP
