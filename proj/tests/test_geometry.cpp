// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch.hpp>

#include "inhand/geometry.hpp"
#include "oracles.hpp"

using namespace inhand;

namespace {

RigidTransform random_transform(Pcg32& rng, double trans_scale = 1.0) {
  Vec3 axis_angle(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
  Vec3 t(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  return RigidTransform::from_axis_angle(axis_angle, trans_scale * t);
}

}  // namespace

TEST_CASE("project: optical axis and similar triangles", "[geometry]") {
  Camera cam = Camera::make(100.0, 0.0, 0.0, 640, 480);
  CHECK(cam.project(Vec3(0, 0, 1)).norm() == Approx(0.0).margin(1e-12));
  Vec2 uv = cam.project(Vec3(1, 0, 2));
  CHECK(uv.x() == Approx(50.0));
  CHECK(uv.y() == Approx(0.0).margin(1e-12));
}

TEST_CASE("project matches homogeneous 4x4 oracle", "[geometry]") {
  Pcg32 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    double f = rng.uniform(50, 500);
    Camera cam = Camera::make(f, rng.uniform(100, 300), rng.uniform(100, 300), 640, 480,
                              random_transform(rng, 0.3));
    Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1.5, 5.0));
    if (cam.depth(p) <= 0.1) continue;
    Vec2 ours = cam.project(p);
    Vec2 ref = oracles::project_homogeneous(cam.intrinsics, cam.extrinsics.rotation,
                                            cam.extrinsics.translation, p);
    CHECK((ours - ref).norm() < 1e-9);
  }
}

TEST_CASE("project rejects points behind the camera", "[geometry]") {
  Camera cam = Camera::make(100.0, 320, 240, 640, 480);
  CHECK_FALSE(cam.try_project(Vec3(0, 0, -1)).has_value());
  CHECK_THROWS_AS(cam.project(Vec3(0, 0, -1)), BehindCameraError);
}

TEST_CASE("pixel ray recovers point depth", "[geometry]") {
  Pcg32 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    Camera cam = Camera::make(rng.uniform(100, 400), 320, 240, 640, 480,
                              random_transform(rng, 0.5));
    Vec3 p(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(1.0, 4.0));
    double depth = cam.depth(p);
    if (depth <= 0.1) continue;
    Vec2 uv = cam.project(p);
    Vec3 o, d;
    cam.pixel_ray(uv.x(), uv.y(), &o, &d);
    // The point must lie on the pixel ray at distance ||p - o||.
    double along = (p - o).dot(d);
    CHECK((o + along * d - p).norm() < 1e-9);
  }
}

TEST_CASE("rigid transform group behavior", "[geometry]") {
  CHECK(RigidTransform::identity().inverse().rotation.isApprox(Mat3::Identity(), 1e-12));
  Pcg32 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    RigidTransform a = random_transform(rng);
    RigidTransform b = random_transform(rng);
    Vec3 p(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));

    RigidTransform should_be_id = a.compose(a.inverse());
    CHECK((should_be_id.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(should_be_id.translation.norm() < 1e-9);

    CHECK((a.compose(b).apply(p) - a.apply(b.apply(p))).norm() < 1e-9);
    CHECK(a.is_valid());
  }
}

TEST_CASE("rodrigues agrees with Eigen AngleAxis and log inverts", "[geometry]") {
  Pcg32 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    Vec3 a(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    CHECK((rodrigues(a) * p - oracles::rotate_angle_axis(a, p)).norm() < 1e-10);
    Vec3 back = rotation_log(rodrigues(a));
    if (a.norm() < kPi - 1e-3) CHECK((back - a).norm() < 1e-8);
  }
}

TEST_CASE("rotate_point_jacobian matches finite differences", "[geometry]") {
  Pcg32 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    Vec3 a(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    if (trial < 5) a *= 1e-9;  // exercise the series branch
    Vec3 v(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    Mat3 jac = rotate_point_jacobian(a, v);
    const double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Vec3 ap = a, am = a;
      ap[k] += h;
      am[k] -= h;
      Vec3 fd = (rodrigues(ap) * v - rodrigues(am) * v) / (2 * h);
      CHECK((jac.col(k) - fd).norm() < 1e-5 * std::max(1.0, fd.norm()));
    }
  }
}

TEST_CASE("windowed encoding schedule endpoints", "[geometry]") {
  EncodingConfig cfg{6, true};
  VecX x(3);
  x << 0.3, -0.7, 0.12;

  SECTION("progress 0: all bands closed") {
    VecX e = encode(cfg, x, 0.0);
    REQUIRE(e.size() == cfg.encoded_dim(3));
    CHECK((e.head(3) - x).norm() == 0.0);
    CHECK(e.tail(e.size() - 3).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("progress 0.5 equals the unwindowed encoding") {
    VecX e = encode(cfg, x, 0.5);
    int at = 3;
    for (int k = 0; k < cfg.num_bands; ++k) {
      CHECK(encoding_window(k, cfg.num_bands, 0.5) == Approx(1.0));
      double freq = std::ldexp(kPi, k);
      for (int d = 0; d < 3; ++d) CHECK(e[at + d] == Approx(std::sin(freq * x[d])));
      at += 3;
      for (int d = 0; d < 3; ++d) CHECK(e[at + d] == Approx(std::cos(freq * x[d])));
      at += 3;
    }
  }

  SECTION("direct window evaluation: half-open band") {
    // 2 * progress * L - k = 0.5  =>  w_k = (1 - cos(pi/2)) / 2 = 0.5
    int k = 3, bands = 6;
    double progress = (k + 0.5) / (2.0 * bands);
    CHECK(encoding_window(k, bands, progress) == Approx(0.5));
  }

  SECTION("window is monotone in progress for every band") {
    for (int k = 0; k < 6; ++k) {
      double prev = -1.0;
      for (int i = 0; i <= 100; ++i) {
        double w = encoding_window(k, 6, i / 100.0);
        CHECK(w >= prev - 1e-15);
        prev = w;
      }
    }
  }
}

TEST_CASE("camera JSON round trip", "[geometry]") {
  Pcg32 rng(3);
  Camera cam = Camera::make(222.5, 111.25, 99.75, 320, 240, random_transform(rng));
  nlohmann::json j = cam;
  Camera back = j.get<Camera>();
  CHECK(back.intrinsics.isApprox(cam.intrinsics, 0));
  CHECK(back.extrinsics.rotation.isApprox(cam.extrinsics.rotation, 0));
  CHECK(back.extrinsics.translation.isApprox(cam.extrinsics.translation, 0));
  CHECK(back.width == cam.width);
  CHECK(back.height == cam.height);
}

TEST_CASE("ray/sphere bounds", "[geometry]") {
  SECTION("axial chord") {
    SphereBounds s{Vec3(0, 0, 3.0), 0.5};
    double tn = 0, tf = 0;
    REQUIRE(ray_sphere_bounds(Vec3::Zero(), Vec3::UnitZ(), s, &tn, &tf));
    CHECK(tn == Approx(2.5));
    CHECK(tf == Approx(3.5));
  }
  SECTION("tangent ray gets the degeneracy guard") {
    SphereBounds s{Vec3(0.5, 0, 3.0), 0.5};
    double tn = 0, tf = 0;
    REQUIRE(ray_sphere_bounds(Vec3::Zero(), Vec3::UnitZ(), s, &tn, &tf));
    CHECK(tf - tn >= 1e-3 - 1e-12);
  }
  SECTION("random rays match the quadratic oracle") {
    Pcg32 rng(101);
    int hits = 0;
    for (int trial = 0; trial < 500; ++trial) {
      Vec3 o(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
      Vec3 aim(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(2, 6));
      Vec3 d = (aim - o + 0.8 * Vec3(rng.normal(), rng.normal(), rng.normal())).normalized();
      SphereBounds s{Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 6)),
                     rng.uniform(0.2, 1.5)};
      double tn = 0, tf = 0;
      bool hit = ray_sphere_bounds(o, d, s, &tn, &tf);
      double q0 = 0, q1 = 0;
      bool ohit = oracles::ray_sphere_quadratic(o, d, s.center, s.radius, &q0, &q1);
      if (!ohit || q1 <= 1e-3) {
        CHECK_FALSE(hit);
        continue;
      }
      ++hits;
      REQUIRE(hit);
      CHECK(tn == Approx(std::max(q0, 1e-3)).margin(1e-9));
      if (q1 > std::max(q0, 1e-3) + 1e-3) CHECK(tf == Approx(q1).margin(1e-9));
    }
    CHECK(hits > 50);  // the sampling must actually exercise intersections
  }
}
