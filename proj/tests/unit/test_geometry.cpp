#include <doctest.h>

#include <cmath>

#include "sonofield/error.hpp"
#include "sonofield/geometry.hpp"
#include "support.hpp"

using namespace sonofield;

namespace {

Mat3 axis_x(double a) {
  Mat3 r;
  r << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return r;
}
Mat3 axis_y(double a) {
  Mat3 r;
  r << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return r;
}
Mat3 axis_z(double a) {
  Mat3 r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return r;
}

Pose random_pose(Rng& rng) {
  Pose p;
  p.position = Vec3(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50));
  p.euler_zyx = Vec3(rng.uniform(-M_PI, M_PI), rng.uniform(-M_PI / 2, M_PI / 2), rng.uniform(-M_PI, M_PI));
  return p;
}

}  // namespace

TEST_CASE("pose_to_matrix: identity, single axis, three-axis product") {
  CHECK(pose_to_matrix(Pose{}).isApprox(Mat4::Identity(), 1e-15));

  Pose p;
  p.euler_zyx = Vec3(M_PI / 2, 0, 0);
  const Vec3 x = pose_to_matrix(p).topLeftCorner<3, 3>() * Vec3::UnitX();
  CHECK((x - Vec3::UnitY()).norm() < 1e-12);

  p.euler_zyx = Vec3(0.3, 0.2, 0.1);
  p.position = Vec3(1, 2, 3);
  const Mat4 t = pose_to_matrix(p);
  const Mat3 expected = axis_z(0.3) * axis_y(0.2) * axis_x(0.1);
  CHECK((t.topLeftCorner<3, 3>() - expected).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((t.topRightCorner<3, 1>() - p.position).norm() == 0.0);
  CHECK(t.row(3).isApprox(Eigen::RowVector4d(0, 0, 0, 1)));
}

TEST_CASE("pose_to_matrix: orthonormal for 1000 random poses, matrix-level round trip") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Pose p = random_pose(rng);
    const Mat4 t = pose_to_matrix(p);
    const Mat3 r = t.topLeftCorner<3, 3>();
    REQUIRE((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    REQUIRE(std::abs(r.determinant() - 1.0) < 1e-9);
    const Pose back = pose_from_matrix(t);
    REQUIRE((pose_to_matrix(back) - t).cwiseAbs().maxCoeff() < 1e-9);
    for (int a = 0; a < 3; ++a) {
      REQUIRE(back.euler_zyx[a] > -M_PI);
      REQUIRE(back.euler_zyx[a] <= M_PI);
    }
  }
}

TEST_CASE("angular_error: hand-evaluated trace cases") {
  const Mat3 r = axis_z(0.7) * axis_x(0.2);
  CHECK(angular_error_deg(r, r) < 1e-6);
  CHECK(angular_error_deg(Mat3::Identity(), axis_z(M_PI / 2)) == doctest::Approx(90.0).epsilon(1e-12));
  CHECK(angular_error_deg(Mat3::Identity(), axis_x(M_PI)) == doctest::Approx(180.0).epsilon(1e-12));
}

TEST_CASE("angular_error: symmetric, triangle inequality, rejects non-rotations") {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const Mat3 a = pose_rotation(random_pose(rng)), b = pose_rotation(random_pose(rng)),
               c = pose_rotation(random_pose(rng));
    const double ab = angular_error_deg(a, b), ba = angular_error_deg(b, a);
    REQUIRE(std::abs(ab - ba) < 1e-9);
    REQUIRE(ab >= 0.0);
    REQUIRE(ab <= 180.0);
    REQUIRE(angular_error_deg(a, c) <= ab + angular_error_deg(b, c) + 1e-6);
  }
  Mat3 bad = Mat3::Identity();
  bad(0, 0) = 1.01;
  try {
    angular_error_deg(bad, Mat3::Identity());
    FAIL("expected invalid-rotation");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInvalidRotation);
  }
}

TEST_CASE("pixel_to_world: linear probe origin, depth extent, rotated beam") {
  ProbeGeometry g;
  g.image_w = 129;  // odd so a pixel sits on the lateral centre
  g.image_h = 97;
  auto ray = pixel_to_world(Pose{}, g, 64, 0);
  CHECK(ray.point.norm() < 1e-12);
  CHECK((ray.wave_dir - Vec3::UnitZ()).norm() < 1e-12);
  ray = pixel_to_world(Pose{}, g, 0, g.image_h - 1);
  CHECK(ray.point.z() == doctest::Approx(g.depth_mm).epsilon(1e-12));

  Pose p;
  p.euler_zyx = Vec3(0, M_PI / 6, 0);
  ray = pixel_to_world(p, g, 10, 20);
  CHECK((ray.wave_dir - axis_y(M_PI / 6) * Vec3::UnitZ()).norm() < 1e-12);

  CHECK_THROWS_AS(pixel_to_world(Pose{}, g, g.image_w, 0), Error);
  CHECK_THROWS_AS(pixel_to_world(Pose{}, g, 0, -1), Error);
}

TEST_CASE("pixel_to_world: linear map is affine, convex beams are unit and fan out") {
  ProbeGeometry g;
  g.image_w = 65;
  g.image_h = 33;
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const Pose p = random_pose(rng);
    const Vec3 a = pixel_to_world(p, g, 0, 0).point, b = pixel_to_world(p, g, 64, 32).point;
    CHECK((pixel_to_world(p, g, 32, 16).point - 0.5 * (a + b)).norm() < 1e-9);
  }
  g.kind = ProbeKind::kConvex;
  const Pose p = random_pose(rng);
  const Vec3 left = pixel_to_world(p, g, 0, 5).wave_dir, right = pixel_to_world(p, g, 64, 5).wave_dir;
  CHECK(std::abs(left.norm() - 1.0) < 1e-12);
  CHECK(std::abs(right.norm() - 1.0) < 1e-12);
  CHECK(std::acos(left.dot(right)) * 180 / M_PI == doctest::Approx(g.width_mm / g.apex_offset_mm * 180 / M_PI));
}

TEST_CASE("ProbeGeometry validation") {
  ProbeGeometry g;
  g.image_w = 1;
  CHECK_THROWS_AS(g.validate(), Error);
  g = ProbeGeometry{};
  g.depth_mm = 0;
  CHECK_THROWS_AS(g.validate(), Error);
}
