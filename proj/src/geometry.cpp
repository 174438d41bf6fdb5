#include "sonofield/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sonofield/error.hpp"

namespace sonofield {

std::string_view error_category(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kBounds: return "bounds";
    case ErrorKind::kDomain: return "out-of-domain";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kInvalidRotation: return "invalid-rotation";
    case ErrorKind::kNormalization: return "normalization";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kNumeric: return "non-finite";
    case ErrorKind::kSpec: return "spec";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kRefinementFailed: return "refinement-failed";
  }
  return "unknown";
}

Mat3 rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

Mat3 rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

Mat3 rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * M_PI);  // [-pi, pi]
  if (a <= -M_PI) a += 2.0 * M_PI;
  return a;
}

Mat3 rotation_from_euler_zyx(const Vec3& e) { return rot_z(e[0]) * rot_y(e[1]) * rot_x(e[2]); }

Vec3 euler_zyx_from_rotation(const Mat3& r) {
  const double sy = std::clamp(-r(2, 0), -1.0, 1.0);
  const double ry = std::asin(sy);
  const double cy = std::hypot(r(0, 0), r(1, 0));
  double rz, rx;
  if (cy > 1e-12) {
    rz = std::atan2(r(1, 0), r(0, 0));
    rx = std::atan2(r(2, 1), r(2, 2));
  } else {
    // Gimbal lock: only rz -+ rx is observable.
    rx = 0.0;
    rz = std::atan2(-r(0, 1), r(1, 1));
  }
  return {wrap_angle(rz), wrap_angle(ry), wrap_angle(rx)};
}

Mat4 pose_to_matrix(const Pose& pose) {
  Mat4 t = Mat4::Identity();
  t.topLeftCorner<3, 3>() = rotation_from_euler_zyx(pose.euler_zyx);
  t.topRightCorner<3, 1>() = pose.position;
  return t;
}

Pose pose_from_matrix(const Mat4& t) {
  Pose p;
  p.position = t.topRightCorner<3, 1>();
  p.euler_zyx = euler_zyx_from_rotation(t.topLeftCorner<3, 3>());
  return p;
}

Mat3 so3_exp(const Vec3& w) {
  const double theta = w.norm();
  Mat3 k;
  k << 0, -w[2], w[1], w[2], 0, -w[0], -w[1], w[0], 0;
  if (theta < 1e-8) return Mat3::Identity() + k + 0.5 * k * k;
  return Mat3::Identity() + (std::sin(theta) / theta) * k +
         ((1.0 - std::cos(theta)) / (theta * theta)) * k * k;
}

namespace {

void check_rotation(const Mat3& r, const char* name) {
  const double dev = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!(dev <= 1e-6)) {
    fail(ErrorKind::kInvalidRotation,
         std::string(name) + " is not orthonormal (max |R^T R - I| = " + std::to_string(dev) + ")");
  }
}

}  // namespace

double angular_error_deg(const Mat3& rq, const Mat3& rr) {
  check_rotation(rq, "query rotation");
  check_rotation(rr, "retrieved rotation");
  const double c = std::clamp(((rq.transpose() * rr).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

double angular_error_deg(const Pose& a, const Pose& b) {
  return angular_error_deg(pose_rotation(a), pose_rotation(b));
}

void ProbeGeometry::validate() const {
  require(width_mm > 0 && depth_mm > 0, ErrorKind::kConfig, "probe extents must be positive");
  require(image_w >= 2 && image_h >= 2, ErrorKind::kConfig, "probe image must be at least 2x2");
  if (kind == ProbeKind::kConvex) {
    require(apex_offset_mm > 0, ErrorKind::kConfig, "convex probe needs apex_offset_mm > 0");
  }
}

PixelRay pixel_to_local(const ProbeGeometry& g, double u, double v) {
  const double su = u / (g.image_w - 1) - 0.5;
  const double sv = v / (g.image_h - 1);
  if (g.kind == ProbeKind::kLinear) {
    return {Vec3(su * g.width_mm, 0.0, sv * g.depth_mm), Vec3(0.0, 0.0, 1.0)};
  }
  // Convex: the probe face is an arc of radius apex_offset; width is its arc length.
  const double angle = su * g.width_mm / g.apex_offset_mm;
  const double radius = g.apex_offset_mm + sv * g.depth_mm;
  const Vec3 dir(std::sin(angle), 0.0, std::cos(angle));
  return {Vec3(0.0, 0.0, -g.apex_offset_mm) + radius * dir, dir};
}

PixelRay pixel_to_world(const Mat3& rotation, const Vec3& position, const ProbeGeometry& g,
                        double u, double v) {
  const PixelRay local = pixel_to_local(g, u, v);
  return {rotation * local.point + position, rotation * local.wave_dir};
}

PixelRay pixel_to_world(const Pose& pose, const ProbeGeometry& g, int u, int v) {
  if (u < 0 || v < 0 || u >= g.image_w || v >= g.image_h) {
    fail(ErrorKind::kBounds, "pixel (" + std::to_string(u) + ", " + std::to_string(v) +
                                 ") outside " + std::to_string(g.image_w) + "x" +
                                 std::to_string(g.image_h) + " image");
  }
  return pixel_to_world(pose_rotation(pose), pose.position, g, u, v);
}

}  // namespace sonofield
