#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace sonofield {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// 6-DoF probe pose. Position in millimetres (world frame); orientation as
/// intrinsic ZYX Euler angles (rz, ry, rx) in radians, R = Rz * Ry * Rx.
struct Pose {
  Vec3 position = Vec3::Zero();
  Vec3 euler_zyx = Vec3::Zero();
};

Mat3 rot_x(double angle);
Mat3 rot_y(double angle);
Mat3 rot_z(double angle);

/// Wraps an angle into (-pi, pi].
double wrap_angle(double angle);

Mat3 rotation_from_euler_zyx(const Vec3& euler_zyx);

/// Inverse of rotation_from_euler_zyx. At gimbal lock (ry = +-pi/2) rx is set
/// to zero; the rotation matrix still round-trips.
Vec3 euler_zyx_from_rotation(const Mat3& rotation);

Mat4 pose_to_matrix(const Pose& pose);
Pose pose_from_matrix(const Mat4& transform);
inline Mat3 pose_rotation(const Pose& pose) { return rotation_from_euler_zyx(pose.euler_zyx); }

/// Rodrigues exponential of an axis-angle vector.
Mat3 so3_exp(const Vec3& omega);

/// Geodesic angle between two rotations in degrees, in [0, 180]. Throws
/// kInvalidRotation when either input is not orthonormal to 1e-6.
double angular_error_deg(const Mat3& r_query, const Mat3& r_retrieved);
double angular_error_deg(const Pose& a, const Pose& b);

enum class ProbeKind { kLinear, kConvex };

/// Image-plane model of the probe. The local frame has x lateral, y elevation
/// (plane normal) and z along the beam (depth). The pose origin sits on the
/// probe face at the lateral centre.
struct ProbeGeometry {
  ProbeKind kind = ProbeKind::kLinear;
  double width_mm = 16.0;
  double depth_mm = 28.0;
  double apex_offset_mm = 40.0;  // convex only: pose origin to virtual fan apex
  int image_w = 128;
  int image_h = 96;

  void validate() const;
};

struct PixelRay {
  Vec3 point;     // mm, world frame
  Vec3 wave_dir;  // unit, world frame
};

/// Local-frame point and beam direction for a (possibly fractional) pixel.
PixelRay pixel_to_local(const ProbeGeometry& geom, double u, double v);

/// Maps pixel (u = column, v = row) to its world point and wave direction.
/// Throws kBounds when the pixel is outside the image.
PixelRay pixel_to_world(const Pose& pose, const ProbeGeometry& geom, int u, int v);

/// Same mapping using a precomputed rotation; no bounds check.
PixelRay pixel_to_world(const Mat3& rotation, const Vec3& position, const ProbeGeometry& geom,
                        double u, double v);

}  // namespace sonofield
