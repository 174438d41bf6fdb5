#include "sonofield/spherical_harmonics.hpp"

#include <cmath>
#include <string>

#include "sonofield/error.hpp"

namespace sonofield {

namespace {

constexpr double kC0 = 0.28209479177387814;
constexpr double kC1 = 0.48860251190291987;
constexpr double kC2a = 1.0925484305920792;
constexpr double kC2b = 0.94617469575755997;
constexpr double kC2c = 0.31539156525251999;
constexpr double kC2d = 0.54627421529603959;
constexpr double kC3a = 0.59004358992664352;
constexpr double kC3b = 2.8906114426405538;
constexpr double kC3c = 0.45704579946446572;
constexpr double kC3d = 0.3731763325901154;
constexpr double kC3e = 1.4453057213202769;

}  // namespace

template <typename Real>
void sh_encode_unchecked(Real x, Real y, Real z, int degree, Real* out, std::array<Real, 3>* grad) {
  const Real x2 = x * x, y2 = y * y, z2 = z * z;
  out[0] = Real(kC0);
  if (grad) grad[0] = {0, 0, 0};
  if (degree <= 1) return;

  out[1] = Real(-kC1) * y;
  out[2] = Real(kC1) * z;
  out[3] = Real(-kC1) * x;
  if (grad) {
    grad[1] = {0, Real(-kC1), 0};
    grad[2] = {0, 0, Real(kC1)};
    grad[3] = {Real(-kC1), 0, 0};
  }
  if (degree <= 2) return;

  out[4] = Real(kC2a) * x * y;
  out[5] = Real(-kC2a) * y * z;
  out[6] = Real(kC2b) * z2 - Real(kC2c);
  out[7] = Real(-kC2a) * x * z;
  out[8] = Real(kC2d) * (x2 - y2);
  if (grad) {
    grad[4] = {Real(kC2a) * y, Real(kC2a) * x, 0};
    grad[5] = {0, Real(-kC2a) * z, Real(-kC2a) * y};
    grad[6] = {0, 0, Real(2 * kC2b) * z};
    grad[7] = {Real(-kC2a) * z, 0, Real(-kC2a) * x};
    grad[8] = {Real(2 * kC2d) * x, Real(-2 * kC2d) * y, 0};
  }
  if (degree <= 3) return;

  out[9] = Real(kC3a) * y * (Real(-3) * x2 + y2);
  out[10] = Real(kC3b) * x * y * z;
  out[11] = Real(kC3c) * y * (Real(1) - Real(5) * z2);
  out[12] = Real(kC3d) * z * (Real(5) * z2 - Real(3));
  out[13] = Real(kC3c) * x * (Real(1) - Real(5) * z2);
  out[14] = Real(kC3e) * z * (x2 - y2);
  out[15] = Real(kC3a) * x * (-x2 + Real(3) * y2);
  if (grad) {
    grad[9] = {Real(-6 * kC3a) * x * y, Real(3 * kC3a) * (y2 - x2), 0};
    grad[10] = {Real(kC3b) * y * z, Real(kC3b) * x * z, Real(kC3b) * x * y};
    grad[11] = {0, Real(kC3c) * (Real(1) - Real(5) * z2), Real(-10 * kC3c) * y * z};
    grad[12] = {0, 0, Real(kC3d) * (Real(15) * z2 - Real(3))};
    grad[13] = {Real(kC3c) * (Real(1) - Real(5) * z2), 0, Real(-10 * kC3c) * x * z};
    grad[14] = {Real(2 * kC3e) * x * z, Real(-2 * kC3e) * y * z, Real(kC3e) * (x2 - y2)};
    grad[15] = {Real(3 * kC3a) * (y2 - x2), Real(6 * kC3a) * x * y, 0};
  }
}

template void sh_encode_unchecked<float>(float, float, float, int, float*, std::array<float, 3>*);
template void sh_encode_unchecked<double>(double, double, double, int, double*,
                                          std::array<double, 3>*);

void sh_encode(double x, double y, double z, int degree, std::span<double> out) {
  require(degree >= 1 && degree <= kMaxShDegree, ErrorKind::kConfig,
          "spherical-harmonic degree must be in [1, 4], got " + std::to_string(degree));
  require(out.size() >= static_cast<std::size_t>(degree * degree), ErrorKind::kShape,
          "spherical-harmonic output buffer too small");
  const double norm = std::sqrt(x * x + y * y + z * z);
  require(std::abs(norm - 1.0) <= 1e-6, ErrorKind::kNormalization,
          "wave direction is not unit length (|d| = " + std::to_string(norm) + ")");
  sh_encode_unchecked<double>(x, y, z, degree, out.data());
}

}  // namespace sonofield
