// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Full-sequence hand fitting to detected 2D keypoints. Pose and shape are
// shared across the whole sequence; a rigid root is fitted per frame. The
// recovered roots double as per-frame camera extrinsics for reconstruction.

#ifndef INHAND_HAND_TRACKING_HPP
#define INHAND_HAND_TRACKING_HPP

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "inhand/hand_model.hpp"
#include "inhand/lbfgs.hpp"

namespace inhand {

/// Residual substituted for keypoints whose model joint falls behind the
/// camera; constant, so it repels the optimizer only through neighbors.
inline constexpr double kBehindCameraPenalty = 1e6;

// ---------------------------------------------------------------------------
// Observations and parameters
// ---------------------------------------------------------------------------

/// Detected 2D joints for one frame: (u, v, confidence) per joint.
struct KeypointFrame {
  std::array<Vec3, kNumJoints> points;
};

struct KeypointObservations {
  std::vector<KeypointFrame> frames;

  bool is_valid() const {
    if (frames.size() < 2) return false;
    for (const auto& f : frames)
      for (const auto& p : f.points)
        if (p.z() < 0.0 || p.z() > 1.0) return false;
    return true;
  }
};

inline void save_keypoints_jsonl(const KeypointObservations& obs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t t = 0; t < obs.frames.size(); ++t) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : obs.frames[t].points) pts.push_back({p.x(), p.y(), p.z()});
    nlohmann::json rec{{"frame", t}, {"keypoints", pts}};
    out << rec.dump() << "\n";
  }
}

inline KeypointObservations load_keypoints_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open keypoints file: " + path);
  KeypointObservations obs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto rec = nlohmann::json::parse(line);
    const auto& pts = rec.at("keypoints");
    if (pts.size() != kNumJoints)
      throw std::runtime_error("keypoint record must have 21 points: " + path);
    KeypointFrame f;
    for (int j = 0; j < kNumJoints; ++j) {
      auto p = pts[j].get<std::array<double, 3>>();
      f.points[j] = Vec3(p[0], p[1], p[2]);
    }
    std::size_t frame = rec.at("frame").get<std::size_t>();
    if (frame != obs.frames.size())
      throw std::runtime_error("keypoint frames out of order in " + path);
    obs.frames.push_back(f);
  }
  return obs;
}

/// Shared pose/shape plus one rigid root per frame.
struct HandSequenceParams {
  HandPose pose;
  HandShape shape;
  std::vector<HandFrameState> frames;
};

inline nlohmann::json sequence_params_to_json(const HandSequenceParams& p) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : p.frames) {
    std::array<double, 9> r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r[i * 3 + j] = f.root.rotation(i, j);
    frames.push_back({{"rotation", r},
                      {"translation",
                       {f.root.translation.x(), f.root.translation.y(), f.root.translation.z()}}});
  }
  std::vector<double> theta(p.pose.joint_rotations.data(), p.pose.joint_rotations.data() + 45);
  std::vector<double> beta(p.shape.scales.data(), p.shape.scales.data() + 10);
  return nlohmann::json{{"theta", theta}, {"beta", beta}, {"frames", frames}};
}

inline HandSequenceParams sequence_params_from_json(const nlohmann::json& j) {
  HandSequenceParams p;
  auto theta = j.at("theta").get<std::vector<double>>();
  auto beta = j.at("beta").get<std::vector<double>>();
  if (theta.size() != 45 || beta.size() != 10)
    throw std::runtime_error("pose/shape parameter arity mismatch");
  for (int i = 0; i < 45; ++i) p.pose.joint_rotations[i] = theta[i];
  for (int i = 0; i < 10; ++i) p.shape.scales[i] = beta[i];
  for (const auto& fj : j.at("frames")) {
    HandFrameState f;
    auto r = fj.at("rotation").get<std::array<double, 9>>();
    auto t = fj.at("translation").get<std::array<double, 3>>();
    for (int i = 0; i < 3; ++i)
      for (int jj = 0; jj < 3; ++jj) f.root.rotation(i, jj) = r[i * 3 + jj];
    f.root.translation = Vec3(t[0], t[1], t[2]);
    p.frames.push_back(f);
  }
  return p;
}

inline void save_sequence_params(const HandSequenceParams& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << sequence_params_to_json(p).dump(2) << "\n";
}

inline HandSequenceParams load_sequence_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open poses file: " + path);
  nlohmann::json j;
  in >> j;
  return sequence_params_from_json(j);
}

struct TrackingWeights {
  double temporal = 1e-4;
  double regularization = 5e-4;
};

// ---------------------------------------------------------------------------
// Energies
// ---------------------------------------------------------------------------

struct EnergyDiagnostics {
  int behind_camera_points = 0;
};

/// Confidence-weighted squared reprojection error over the whole sequence.
inline double energy_2d(const HandSequenceParams& params, const KeypointObservations& obs,
                        const Camera& camera, EnergyDiagnostics* diag = nullptr) {
  const Skeleton& skel = canonical_skeleton();
  double e = 0.0;
  for (std::size_t t = 0; t < obs.frames.size(); ++t) {
    JointArray joints = forward_kinematics(skel, params.shape, params.pose, params.frames[t].root);
    for (int j = 0; j < kNumJoints; ++j) {
      double conf = obs.frames[t].points[j].z();
      if (conf <= 0.0) continue;
      auto uv = camera.try_project(joints[j]);
      if (!uv) {
        e += conf * kBehindCameraPenalty;
        if (diag) ++diag->behind_camera_points;
        continue;
      }
      e += conf * (*uv - obs.frames[t].points[j].head<2>()).squaredNorm();
    }
  }
  return e;
}

/// Temporal smoothness: Frobenius distance of consecutive rotations plus
/// Euclidean distance of consecutive translations.
inline double energy_temporal(const HandSequenceParams& params) {
  double e = 0.0;
  for (std::size_t t = 1; t < params.frames.size(); ++t) {
    e += (params.frames[t].root.rotation - params.frames[t - 1].root.rotation).norm();
    e += (params.frames[t].root.translation - params.frames[t - 1].root.translation).norm();
  }
  return e;
}

/// Pose magnitude + deviation of shape from the canonical value 1, counted
/// once per frame sharing the parameters.
inline double energy_reg(const HandSequenceParams& params) {
  double per_frame = params.pose.joint_rotations.squaredNorm() +
                     (params.shape.scales.array() - 1.0).matrix().squaredNorm();
  return per_frame * static_cast<double>(params.frames.size());
}

inline double energy_total(const HandSequenceParams& params, const KeypointObservations& obs,
                           const Camera& camera, const TrackingWeights& w,
                           EnergyDiagnostics* diag = nullptr) {
  return energy_2d(params, obs, camera, diag) + w.temporal * energy_temporal(params) +
         w.regularization * energy_reg(params);
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

struct FitStageReport {
  int stage = 0;
  int iterations = 0;
  int function_evals = 0;
  double initial_energy = 0.0;
  double final_energy = 0.0;
  bool converged = false;
  std::string status;
};

struct ConvergenceRecord {
  int stage = 0;
  int iter = 0;
  double e2d = 0.0, etemporal = 0.0, ereg = 0.0, total = 0.0;
};

struct FitReport {
  std::vector<FitStageReport> stages;
  std::vector<ConvergenceRecord> trace;
  int behind_camera_points = 0;
  int total_iterations = 0;
};

struct FitOptions {
  bool share_parameters = true;
  LbfgsOptions lbfgs;
};

struct FitResult {
  HandSequenceParams params;
  FitReport report;
};

namespace tracking_detail {

/// Parameter vector layout for the joint problem. Rotations are optimized as
/// axis-angle deltas composed on the left of the base rotations captured at
/// stage entry.
struct Packing {
  bool with_pose_shape = false;
  int num_frames = 0;
  std::vector<Mat3> base_rotations;

  int size() const { return (with_pose_shape ? 55 : 0) + 6 * num_frames; }
  int frame_offset(int t) const { return (with_pose_shape ? 55 : 0) + 6 * t; }

  VecX pack(const HandSequenceParams& p) const {
    VecX x = VecX::Zero(size());
    if (with_pose_shape) {
      x.head<45>() = p.pose.joint_rotations;
      x.segment<10>(45) = p.shape.scales;
    }
    for (int t = 0; t < num_frames; ++t) {
      // delta starts at zero: base rotations are captured from p itself.
      x.segment<3>(frame_offset(t) + 3) = p.frames[t].root.translation;
    }
    return x;
  }

  void unpack(const VecX& x, HandSequenceParams* p) const {
    if (with_pose_shape) {
      p->pose.joint_rotations = x.head<45>();
      p->shape.scales = x.segment<10>(45);
    }
    for (int t = 0; t < num_frames; ++t) {
      Vec3 delta = x.segment<3>(frame_offset(t));
      p->frames[t].root.rotation = rodrigues(delta) * base_rotations[t];
      p->frames[t].root.translation = x.segment<3>(frame_offset(t) + 3);
    }
  }
};

/// Value + gradient of the total energy in packed coordinates.
inline double packed_energy(const Packing& pk, const VecX& x, HandSequenceParams* scratch,
                            const KeypointObservations& obs, const Camera& camera,
                            const TrackingWeights& w, bool with_temporal_reg, VecX* grad,
                            EnergyDiagnostics* diag = nullptr) {
  const Skeleton& skel = canonical_skeleton();
  pk.unpack(x, scratch);
  if (grad) grad->setZero(pk.size());

  double e = 0.0;
  for (int t = 0; t < pk.num_frames; ++t) {
    const RigidTransform& root = scratch->frames[t].root;
    Vec3 delta = x.segment<3>(pk.frame_offset(t));
    JointArray joints = forward_kinematics(skel, scratch->shape, scratch->pose, root);
    FkJacobians jac;
    bool have_jac = false;
    for (int j = 0; j < kNumJoints; ++j) {
      double conf = obs.frames[t].points[j].z();
      if (conf <= 0.0) continue;
      Vec3 pc = camera.extrinsics.apply(joints[j]);
      if (pc.z() <= 0.0) {
        e += conf * kBehindCameraPenalty;
        if (diag) ++diag->behind_camera_points;
        continue;  // constant residual: no gradient
      }
      double fx = camera.intrinsics(0, 0), fy = camera.intrinsics(1, 1);
      Vec2 uv(fx * pc.x() / pc.z() + camera.intrinsics(0, 2),
              fy * pc.y() / pc.z() + camera.intrinsics(1, 2));
      Vec2 r = uv - obs.frames[t].points[j].head<2>();
      e += conf * r.squaredNorm();
      if (!grad) continue;
      if (!have_jac) {
        jac = fk_jacobians(skel, scratch->shape, scratch->pose, root, delta);
        have_jac = true;
      }
      Eigen::Matrix<double, 2, 3> dpi;
      double inv_z = 1.0 / pc.z();
      dpi << fx * inv_z, 0, -fx * pc.x() * inv_z * inv_z, 0, fy * inv_z,
          -fy * pc.y() * inv_z * inv_z;
      // d(residual)/d(world point); extrinsics rotation chains in.
      Vec3 dE_dX = 2.0 * conf *
                   (camera.extrinsics.rotation.transpose() * dpi.transpose() * r);
      if (pk.with_pose_shape) {
        grad->head<45>() += jac.d_pose.block<3, 45>(3 * j, 0).transpose() * dE_dX;
        grad->segment<10>(45) += jac.d_shape.block<3, 10>(3 * j, 0).transpose() * dE_dX;
      }
      grad->segment<6>(pk.frame_offset(t)) +=
          jac.d_root.block<3, 6>(3 * j, 0).transpose() * dE_dX;
    }
  }

  if (with_temporal_reg) {
    // Temporal term.
    for (int t = 1; t < pk.num_frames; ++t) {
      const Mat3& r_cur = scratch->frames[t].root.rotation;
      const Mat3& r_prev = scratch->frames[t - 1].root.rotation;
      Mat3 dr = r_cur - r_prev;
      double nr = dr.norm();
      Vec3 dt = scratch->frames[t].root.translation - scratch->frames[t - 1].root.translation;
      double nt = dt.norm();
      e += w.temporal * (nr + nt);
      if (!grad) continue;
      if (nr > 1e-12) {
        Mat3 dE_dR = (w.temporal / nr) * dr;
        for (int side = 0; side < 2; ++side) {
          int tt = t - side;  // current frame then previous frame
          double sign = side == 0 ? 1.0 : -1.0;
          Vec3 delta = x.segment<3>(pk.frame_offset(tt));
          const Mat3& base = pk.base_rotations[tt];
          Vec3 g = Vec3::Zero();
          for (int c = 0; c < 3; ++c)
            g += rotate_point_jacobian(delta, base.col(c)).transpose() *
                 (sign * dE_dR.col(c));
          grad->segment<3>(pk.frame_offset(tt)) += g;
        }
      }
      if (nt > 1e-12) {
        Vec3 dE_dT = (w.temporal / nt) * dt;
        grad->segment<3>(pk.frame_offset(t) + 3) += dE_dT;
        grad->segment<3>(pk.frame_offset(t - 1) + 3) -= dE_dT;
      }
    }
    // Regularizer (counted once per frame).
    double n = static_cast<double>(pk.num_frames);
    e += w.regularization * n *
         (scratch->pose.joint_rotations.squaredNorm() +
          (scratch->shape.scales.array() - 1.0).matrix().squaredNorm());
    if (grad && pk.with_pose_shape) {
      grad->head<45>() += 2.0 * w.regularization * n * scratch->pose.joint_rotations;
      grad->segment<10>(45) +=
          2.0 * w.regularization * n * (scratch->shape.scales.array() - 1.0).matrix();
    }
  }
  return e;
}

}  // namespace tracking_detail

/// Gradient of the total energy with respect to the packed parameter vector
/// [theta, beta, per-frame (rotation delta, translation)]; exposed for tests.
inline double tracking_energy_and_gradient(const HandSequenceParams& params,
                                           const KeypointObservations& obs,
                                           const Camera& camera, const TrackingWeights& w,
                                           VecX* grad) {
  tracking_detail::Packing pk;
  pk.with_pose_shape = true;
  pk.num_frames = static_cast<int>(params.frames.size());
  for (const auto& f : params.frames) pk.base_rotations.push_back(f.root.rotation);
  HandSequenceParams scratch = params;
  VecX x = pk.pack(params);
  return tracking_detail::packed_energy(pk, x, &scratch, obs, camera, w, true, grad);
}

/// Two-stage full-sequence fit. Stage 1 freezes pose/shape and fits the roots
/// to the reprojection term alone; stage 2 releases everything under the full
/// energy. Throws std::runtime_error when the initial energy is non-finite.
inline FitResult fit_sequence(const KeypointObservations& obs, const Camera& camera,
                              const TrackingWeights& weights, const HandSequenceParams& init,
                              const FitOptions& options = {}) {
  if (obs.frames.size() != init.frames.size())
    throw std::invalid_argument("observation/parameter frame count mismatch");
  const int num_frames = static_cast<int>(obs.frames.size());

  FitResult result;
  result.params = init;

  {
    EnergyDiagnostics diag;
    double e0 = energy_total(init, obs, camera, weights, &diag);
    if (!std::isfinite(e0))
      throw std::runtime_error("non-finite tracking energy at initialization");
  }

  auto run_stage = [&](int stage, bool with_pose_shape, bool with_temporal_reg) {
    tracking_detail::Packing pk;
    pk.with_pose_shape = with_pose_shape;
    pk.num_frames = num_frames;
    pk.base_rotations.clear();
    for (const auto& f : result.params.frames) pk.base_rotations.push_back(f.root.rotation);

    HandSequenceParams scratch = result.params;
    EnergyDiagnostics diag;
    auto objective = [&](const VecX& x, VecX* grad) {
      return tracking_detail::packed_energy(pk, x, &scratch, obs, camera, weights,
                                            with_temporal_reg, grad, &diag);
    };
    auto per_iter = [&](int iter, double total, const VecX& x) {
      HandSequenceParams probe = result.params;
      pk.unpack(x, &probe);
      ConvergenceRecord rec;
      rec.stage = stage;
      rec.iter = iter;
      rec.e2d = energy_2d(probe, obs, camera);
      rec.etemporal = energy_temporal(probe);
      rec.ereg = energy_reg(probe);
      rec.total = total;
      result.report.trace.push_back(rec);
    };

    VecX x0 = pk.pack(result.params);
    LbfgsResult opt = lbfgs_minimize(objective, x0, options.lbfgs, per_iter);
    pk.unpack(opt.x, &result.params);

    FitStageReport sr;
    sr.stage = stage;
    sr.iterations = opt.iterations;
    sr.function_evals = opt.function_evals;
    sr.initial_energy = opt.energy_trace.front();
    sr.final_energy = opt.f;
    sr.converged = opt.converged;
    sr.status = opt.status;
    result.report.stages.push_back(sr);
    result.report.total_iterations += opt.iterations;
    result.report.behind_camera_points += diag.behind_camera_points;
  };

  run_stage(1, /*with_pose_shape=*/false, /*with_temporal_reg=*/false);
  run_stage(2, /*with_pose_shape=*/true, /*with_temporal_reg=*/true);
  return result;
}

/// Independent per-frame fitting (parameter sharing disabled); the ablation
/// baseline. Each frame gets its own pose/shape/root via the same two stages.
inline FitResult fit_per_frame(const KeypointObservations& obs, const Camera& camera,
                               const TrackingWeights& weights, const HandSequenceParams& init,
                               const FitOptions& options = {},
                               std::vector<HandSequenceParams>* per_frame_out = nullptr) {
  FitResult combined;
  combined.params = init;
  for (std::size_t t = 0; t < obs.frames.size(); ++t) {
    KeypointObservations single;
    single.frames.push_back(obs.frames[t]);
    HandSequenceParams frame_init;
    frame_init.pose = init.pose;
    frame_init.shape = init.shape;
    frame_init.frames.push_back(init.frames[t]);

    if (!std::isfinite(energy_total(frame_init, single, camera, weights)))
      throw std::runtime_error("non-finite tracking energy at initialization");

    tracking_detail::Packing pk1;
    pk1.with_pose_shape = false;
    pk1.num_frames = 1;
    pk1.base_rotations = {frame_init.frames[0].root.rotation};
    HandSequenceParams scratch = frame_init;
    EnergyDiagnostics diag;
    auto obj1 = [&](const VecX& x, VecX* g) {
      return tracking_detail::packed_energy(pk1, x, &scratch, single, camera, weights, false,
                                            g, &diag);
    };
    LbfgsResult s1 = lbfgs_minimize(obj1, pk1.pack(frame_init), options.lbfgs);
    pk1.unpack(s1.x, &frame_init);

    tracking_detail::Packing pk2;
    pk2.with_pose_shape = true;
    pk2.num_frames = 1;
    pk2.base_rotations = {frame_init.frames[0].root.rotation};
    scratch = frame_init;
    auto obj2 = [&](const VecX& x, VecX* g) {
      return tracking_detail::packed_energy(pk2, x, &scratch, single, camera, weights, true,
                                            g, &diag);
    };
    LbfgsResult s2 = lbfgs_minimize(obj2, pk2.pack(frame_init), options.lbfgs);
    pk2.unpack(s2.x, &frame_init);

    if (per_frame_out) per_frame_out->push_back(frame_init);
    combined.params.frames[t] = frame_init.frames[0];
    combined.report.total_iterations += s1.iterations + s2.iterations;
    combined.report.behind_camera_points += diag.behind_camera_points;
  }
  return combined;
}

/// Mean 3D joint position error (meters) against reference parameters.
inline double mean_joint_error(const HandSequenceParams& a, const HandSequenceParams& b) {
  double sum = 0.0;
  int count = 0;
  for (std::size_t t = 0; t < a.frames.size(); ++t) {
    JointArray ja = forward_kinematics(a.shape, a.pose, a.frames[t].root);
    JointArray jb = forward_kinematics(b.shape, b.pose, b.frames[t].root);
    for (int j = 0; j < kNumJoints; ++j) {
      sum += (ja[j] - jb[j]).norm();
      ++count;
    }
  }
  return count ? sum / count : 0.0;
}

inline void save_convergence_csv(const FitReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "stage,iter,e2d,etemporal,ereg,total\n";
  for (const auto& r : report.trace) {
    out << r.stage << "," << r.iter << "," << format_double(r.e2d) << ","
        << format_double(r.etemporal) << "," << format_double(r.ereg) << ","
        << format_double(r.total) << "\n";
  }
}

}  // namespace inhand

#endif  // INHAND_HAND_TRACKING_HPP
