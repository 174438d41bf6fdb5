#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "sonofield/grid_field.hpp"

namespace sonofield {

/// Column-per-sample workspace for batched encode -> decode. Forward
/// activations are kept so the same batch can be run backwards.
template <typename Real>
struct FieldBatch {
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
  using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

  int count = 0;
  Mat features;  // L*f x n
  Mat sh;        // sh_dim x n
  std::vector<std::uint64_t> corner_rows;  // n * L * 8
  std::vector<Real> corner_weights;        // n * L * 8

  Mat hidden_density;  // relu(W1 x + b1)
  Mat density_out;     // W2 h + b2; row 0 is pre-ReLU sigma, rows 1..15 the embedding
  Mat color_in;        // [embedding; sh]
  Mat hidden_color;
  RowVec intensity;    // logistic(colour logit)
  RowVec sigma;
};

/// Fills features/corner tables for each point. Points outside the domain are
/// clamped when `clamp` is set, otherwise kDomain is thrown.
template <typename Real>
void encode_batch(const ImpedanceFieldT<Real>& field, std::span<const Vec3> points, bool clamp,
                  FieldBatch<Real>& batch);

/// Fills the SH block for unit directions (no normalization check).
template <typename Real>
void sh_batch(const ImpedanceFieldT<Real>& field, std::span<const Vec3> dirs, FieldBatch<Real>& batch);

/// Runs both MLPs over an encoded batch.
template <typename Real>
void forward_batch(const ImpedanceFieldT<Real>& field, FieldBatch<Real>& batch);

/// Convenience: encode + sh + forward, returning per-sample intensities.
template <typename Real>
void evaluate_batch(const ImpedanceFieldT<Real>& field, std::span<const Vec3> points,
                    std::span<const Vec3> dirs, bool clamp, FieldBatch<Real>& batch);

}  // namespace sonofield
