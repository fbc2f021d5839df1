// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch.hpp>

#include "inhand/hand_tracking.hpp"
#include "oracles.hpp"

using namespace inhand;

namespace {

/// Hand moving in front of a 256x256 camera: rotation sweep plus mild
/// translation drift, all joints in front of the camera.
HandSequenceParams make_trajectory(int num_frames) {
  HandSequenceParams gt;
  for (int t = 0; t < num_frames; ++t) {
    double phase = num_frames > 1 ? static_cast<double>(t) / (num_frames - 1) : 0.0;
    Vec3 aa = Vec3(0.3, 1.0, 0.15) * (phase - 0.5) * 1.6;
    HandFrameState f;
    f.root = RigidTransform::from_axis_angle(
        aa, Vec3(0.02 * std::sin(phase * 4.0), -0.05 + 0.02 * phase, 0.55 + 0.05 * phase));
    gt.frames.push_back(f);
  }
  // A mildly flexed grasp, shared across frames.
  for (int f = 0; f < 5; ++f) {
    gt.pose.joint_rotations[3 * (3 * f) + 0] = 0.35;      // mcp flex
    gt.pose.joint_rotations[3 * (3 * f + 1) + 0] = 0.5;   // pip flex
    gt.pose.joint_rotations[3 * (3 * f + 2) + 0] = 0.3;   // dip flex
  }
  gt.shape.scales.setConstant(1.05);
  return gt;
}

Camera tracking_camera() { return Camera::from_image_size(256, 256); }

KeypointObservations observe(const HandSequenceParams& params, const Camera& cam,
                             double sigma_px, Pcg32* rng) {
  KeypointObservations obs;
  for (const auto& f : params.frames) {
    JointArray joints = forward_kinematics(params.shape, params.pose, f.root);
    KeypointFrame kf;
    for (int j = 0; j < kNumJoints; ++j) {
      auto uv = cam.try_project(joints[j]);
      if (!uv) {
        kf.points[j] = Vec3(0, 0, 0);
        continue;
      }
      Vec2 noisy = *uv;
      if (sigma_px > 0 && rng)
        noisy += sigma_px * Vec2(rng->normal(), rng->normal());
      kf.points[j] = Vec3(noisy.x(), noisy.y(), 1.0);
    }
    obs.frames.push_back(kf);
  }
  return obs;
}

HandSequenceParams perturb_roots(const HandSequenceParams& gt, double rot_deg,
                                 double trans_frac, Pcg32* rng) {
  HandSequenceParams out = gt;
  for (auto& f : out.frames) {
    Vec3 axis(rng->normal(), rng->normal(), rng->normal());
    axis.normalize();
    f.root.rotation = rodrigues(axis * deg2rad(rot_deg)) * f.root.rotation;
    Vec3 dir(rng->normal(), rng->normal(), rng->normal());
    dir.normalize();
    f.root.translation += dir * (trans_frac * f.root.translation.norm());
  }
  return out;
}

}  // namespace

TEST_CASE("energy_2d on perfect observations is zero", "[hand_tracking]") {
  HandSequenceParams gt = make_trajectory(6);
  Camera cam = tracking_camera();
  KeypointObservations obs = observe(gt, cam, 0.0, nullptr);
  CHECK(energy_2d(gt, obs, cam) == Approx(0.0).margin(1e-16));
}

TEST_CASE("energy_2d 3-4-5 single point", "[hand_tracking]") {
  HandSequenceParams gt = make_trajectory(2);
  Camera cam = tracking_camera();
  KeypointObservations obs = observe(gt, cam, 0.0, nullptr);
  // Keep one visible joint in frame 0 and offset it by (3, 4) pixels.
  for (int j = 0; j < kNumJoints; ++j) {
    if (j != 4) obs.frames[0].points[j].z() = 0.0;
    obs.frames[1].points[j].z() = 0.0;
  }
  obs.frames[0].points[4].x() += 3.0;
  obs.frames[0].points[4].y() += 4.0;
  CHECK(energy_2d(gt, obs, cam) == Approx(25.0).epsilon(1e-12));
}

TEST_CASE("energies match naive loop oracles", "[hand_tracking]") {
  Pcg32 rng(1234);
  HandSequenceParams params = make_trajectory(5);
  for (int i = 0; i < 45; ++i) params.pose.joint_rotations[i] += rng.uniform(-0.2, 0.2);
  for (int i = 0; i < 10; ++i) params.shape.scales[i] = rng.uniform(0.8, 1.3);
  Camera cam = tracking_camera();
  KeypointObservations obs = observe(make_trajectory(5), cam, 2.0, &rng);
  for (auto& f : obs.frames)
    for (auto& p : f.points) p.z() = rng.uniform(0.0, 1.0);

  CHECK(energy_2d(params, obs, cam) ==
        Approx(oracles::energy_2d_loop(params, obs, cam)).margin(1e-10));
  CHECK(energy_temporal(params) ==
        Approx(oracles::energy_temporal_loop(params)).margin(1e-10));
  CHECK(energy_reg(params) == Approx(oracles::energy_reg_loop(params)).margin(1e-10));
}

TEST_CASE("temporal energy basics", "[hand_tracking]") {
  HandSequenceParams p;
  HandFrameState f;
  f.root.translation = Vec3(0, 0, 0.5);
  p.frames = {f, f, f};
  CHECK(energy_temporal(p) == 0.0);
  p.frames[2].root.translation += Vec3(1, 0, 0);
  CHECK(energy_temporal(p) == Approx(1.0));
}

TEST_CASE("regularizer counts frames", "[hand_tracking]") {
  HandSequenceParams p;
  p.frames.resize(7);
  CHECK(energy_reg(p) == 0.0);
  p.pose.joint_rotations[11] = 2.0;
  CHECK(energy_reg(p) == Approx(4.0 * 7));
}

TEST_CASE("tracking gradient matches central finite differences", "[hand_tracking]") {
  Pcg32 rng(555);
  HandSequenceParams params = make_trajectory(3);
  for (int i = 0; i < 45; ++i) params.pose.joint_rotations[i] += rng.uniform(-0.1, 0.1);
  Camera cam = tracking_camera();
  KeypointObservations obs = observe(make_trajectory(3), cam, 3.0, &rng);
  TrackingWeights w;

  VecX grad;
  tracking_energy_and_gradient(params, obs, cam, w, &grad);

  // Finite differences in the same packed coordinates (deltas at zero).
  tracking_detail::Packing pk;
  pk.with_pose_shape = true;
  pk.num_frames = 3;
  for (const auto& f : params.frames) pk.base_rotations.push_back(f.root.rotation);
  VecX x0 = pk.pack(params);
  HandSequenceParams scratch = params;
  auto eval = [&](const VecX& x) {
    pk.unpack(x, &scratch);
    return energy_total(scratch, obs, cam, w);
  };
  const double h = 1e-6;
  for (int k = 0; k < x0.size(); ++k) {
    VecX xp = x0, xm = x0;
    xp[k] += h;
    xm[k] -= h;
    double fd = (eval(xp) - eval(xm)) / (2 * h);
    double scale = std::max({1.0, std::abs(fd), std::abs(grad[k])});
    CHECK(std::abs(grad[k] - fd) / scale < 1e-4);
  }
}

TEST_CASE("fit keeps the global optimum fixed", "[hand_tracking]") {
  HandSequenceParams gt = make_trajectory(8);
  Camera cam = tracking_camera();
  KeypointObservations obs = observe(gt, cam, 0.0, nullptr);
  FitResult res = fit_sequence(obs, cam, TrackingWeights{}, gt);
  CHECK(energy_2d(res.params, obs, cam) < 1e-6);
  CHECK(mean_joint_error(res.params, gt) < 1e-4);
}

TEST_CASE("fit recovers perturbed roots", "[hand_tracking]") {
  Pcg32 rng(2024);
  HandSequenceParams gt = make_trajectory(10);
  Camera cam = tracking_camera();
  KeypointObservations obs = observe(gt, cam, 0.0, nullptr);
  HandSequenceParams init = perturb_roots(gt, 5.0, 0.05, &rng);

  FitResult res = fit_sequence(obs, cam, TrackingWeights{}, init);
  for (std::size_t t = 0; t < gt.frames.size(); ++t) {
    double rot_err =
        rad2deg(rotation_angle_between(res.params.frames[t].root.rotation,
                                       gt.frames[t].root.rotation));
    double trans_err = (res.params.frames[t].root.translation -
                        gt.frames[t].root.translation).norm() /
                       gt.frames[t].root.translation.norm();
    CHECK(rot_err < 0.5);
    CHECK(trans_err < 0.01);
  }
  // Energy never increases across accepted iterations.
  for (const auto& stage : res.report.stages) {
    CHECK(stage.final_energy <= stage.initial_energy + 1e-12);
  }
  double prev = std::numeric_limits<double>::infinity();
  int cur_stage = 0;
  for (const auto& rec : res.report.trace) {
    if (rec.stage != cur_stage) {
      cur_stage = rec.stage;
      prev = std::numeric_limits<double>::infinity();
    }
    CHECK(rec.total <= prev + 1e-9);
    prev = rec.total;
  }
}

TEST_CASE("parameter sharing reduces the unknown count", "[hand_tracking]") {
  for (int n : {2, 10, 40}) {
    tracking_detail::Packing shared;
    shared.with_pose_shape = true;
    shared.num_frames = n;
    CHECK(shared.size() == 45 + 10 + 6 * n);
    CHECK(shared.size() < (45 + 10 + 6) * n);
  }
}

TEST_CASE("behind-camera points are flagged and penalized", "[hand_tracking]") {
  HandSequenceParams gt = make_trajectory(2);
  Camera cam = tracking_camera();
  KeypointObservations obs = observe(gt, cam, 0.0, nullptr);
  HandSequenceParams behind = gt;
  for (auto& f : behind.frames) f.root.translation.z() = -1.0;
  EnergyDiagnostics diag;
  double e = energy_2d(behind, obs, cam, &diag);
  CHECK(diag.behind_camera_points > 0);
  CHECK(e >= kBehindCameraPenalty);
}

TEST_CASE("non-finite init energy aborts with a diagnostic", "[hand_tracking]") {
  HandSequenceParams gt = make_trajectory(2);
  Camera cam = tracking_camera();
  KeypointObservations obs = observe(gt, cam, 0.0, nullptr);
  HandSequenceParams bad = gt;
  bad.frames[0].root.translation.x() = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(fit_sequence(obs, cam, TrackingWeights{}, bad), std::runtime_error);
}
