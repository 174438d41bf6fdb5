#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sonofield/field_batch.hpp"
#include "sonofield/grid_field.hpp"

namespace sonofield {

struct ScanDataset;

/// Per-parameter gradient accumulators laid out exactly like the field's
/// parameters. Table rows written by a backward pass are recorded so the
/// sparse optimizer and clear() only visit those rows.
template <typename Real>
class GradientBuffer {
 public:
  explicit GradientBuffer(const ImpedanceFieldT<Real>& field);

  std::span<Real> values() { return values_; }
  std::span<const Real> values() const { return values_; }
  const std::vector<std::uint64_t>& touched_rows() const { return touched_; }

  Real* row(std::uint64_t global_row) { return values_.data() + global_row * features_; }
  void mark_row(std::uint64_t global_row) {
    if (!touched_flag_[global_row]) {
      touched_flag_[global_row] = 1;
      touched_.push_back(global_row);
    }
  }

  /// Zeroes touched table rows and the MLP block.
  void clear();
  bool all_finite() const;

 private:
  std::size_t features_;
  std::size_t table_params_;
  AlignedVector<Real> values_;
  std::vector<std::uint8_t> touched_flag_;
  std::vector<std::uint64_t> touched_;
};

struct AdamConfig {
  double lr_table = 1e-2;
  double lr_mlp = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-15;
};

template <typename Real>
struct AdamState {
  explicit AdamState(std::size_t size) : m(size, Real(0)), v(size, Real(0)) {}
  std::vector<Real> m;
  std::vector<Real> v;
  std::uint64_t step = 0;
};

/// Mean squared error between rendered intensities and sample targets.
/// Throws kContract when a sample has no target.
template <typename Real>
double loss_recon(std::span<const PixelSample> samples, const ImpedanceFieldT<Real>& field);

/// Reverse pass through a batch already run by forward_batch. `d_intensity`
/// holds dLoss/dI per sample. Any of the outputs may be null:
///   grads      - parameter gradients are accumulated (+=),
///   d_features - dLoss/d(encoded features), L*f x n,
///   d_sh       - dLoss/d(SH coefficients), sh_dim x n.
template <typename Real>
void backward_batch(const ImpedanceFieldT<Real>& field, const FieldBatch<Real>& batch,
                    const typename FieldBatch<Real>::RowVec& d_intensity, GradientBuffer<Real>* grads,
                    typename FieldBatch<Real>::Mat* d_features, typename FieldBatch<Real>::Mat* d_sh);

/// Accumulates d loss_recon / d params into `out` and returns the loss.
template <typename Real>
double backward(std::span<const PixelSample> samples, const ImpedanceFieldT<Real>& field,
                GradientBuffer<Real>& out);

/// One bias-corrected Adam step. With `sparse`, only table rows with a
/// nonzero gradient are updated; the MLP block is always updated densely.
template <typename Real>
void adam_step(ImpedanceFieldT<Real>& field, const GradientBuffer<Real>& grads, AdamState<Real>& state,
               const AdamConfig& config, bool sparse = true);

struct TrainConfig {
  int iterations = 50000;
  int pixels_per_step = 4096;
  AdamConfig adam;
  std::uint64_t seed = 0;
  int validate_every = 1000;  // 0 disables validation
  bool cosine_decay = false;
  int threads = 1;  // validation rendering only
};

struct MetricRow {
  int step = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<MetricRow> metrics;
  std::vector<double> step_losses;
};

/// Reconstruction loop: per iteration one training image is drawn, N_rec
/// pixels are sampled uniformly, then backward + Adam. Validation metrics are
/// the mean PSNR/SSIM over the dataset's validation split.
template <typename Real>
TrainResult train(const ScanDataset& dataset, ImpedanceFieldT<Real>& field, const TrainConfig& config,
                  const std::function<void(const MetricRow&)>& on_metric = {});

}  // namespace sonofield
