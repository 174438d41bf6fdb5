#pragma once

#include <array>
#include <span>

namespace sonofield {

constexpr int kMaxShDegree = 4;
constexpr int kMaxShCoeffs = kMaxShDegree * kMaxShDegree;

/// Real spherical harmonics (Condon-Shortley phase, m = -l..l within each band)
/// evaluated from the Cartesian components of a unit direction. Writes
/// degree^2 values to `out`. Throws kNormalization if |dir| deviates from 1 by
/// more than 1e-6 and kConfig for a degree outside [1, 4].
void sh_encode(double x, double y, double z, int degree, std::span<double> out);

/// sh_encode without the input checks, plus the Jacobian with respect to
/// (x, y, z) treated as independent variables. grad[c] = d out[c] / d(x,y,z).
template <typename Real>
void sh_encode_unchecked(Real x, Real y, Real z, int degree, Real* out,
                         std::array<Real, 3>* grad = nullptr);

}  // namespace sonofield
