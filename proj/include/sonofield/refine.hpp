#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sonofield/error.hpp"
#include "sonofield/geometry.hpp"
#include "sonofield/grid_field.hpp"
#include "sonofield/image.hpp"

namespace sonofield {

struct PixelIndex {
  int u = 0;
  int v = 0;
};

/// Distinct pixels drawn uniformly without replacement (all pixels when
/// count >= image size), in row-major order.
std::vector<PixelIndex> sample_pixels(const ProbeGeometry& geom, int count, std::uint64_t seed);

/// Mean squared difference between rendered and observed intensities over the
/// pixel set. Out-of-domain points are clamped to the domain box.
template <typename Real>
double photometric_loss(const Pose& pose, const ImageGray& observed, const ProbeGeometry& geom,
                        const ImpedanceFieldT<Real>& field, std::span<const PixelIndex> pixels);

struct PoseGradient {
  double loss = 0.0;
  Eigen::Matrix<double, 6, 1> grad = Eigen::Matrix<double, 6, 1>::Zero();  // (d/dt, d/domega)
};

/// Gradient with respect to (translation in mm, rotation increment omega in
/// rad) for the perturbed pose (R Exp(omega), t + dt) at dt = omega = 0.
template <typename Real>
PoseGradient pose_gradient(const Pose& pose, const ImageGray& observed, const ProbeGeometry& geom,
                           const ImpedanceFieldT<Real>& field, std::span<const PixelIndex> pixels);

/// (R Exp(omega), t + dt) converted back to the ZYX pose convention.
Pose perturb_pose(const Pose& pose, const Vec3& dt, const Vec3& omega);

struct RefineConfig {
  int pixels_per_step = 1024;
  int eval_pixels = 4096;       // fixed set deciding whether an iterate is accepted
  int max_iterations = 300;     // per restart
  double lr_trans_mm = 0.5;
  double lr_rot_deg = 0.5;
  int restarts = 4;             // R, restart 0 starts at the initial pose
  double restart_rot_deg = 3.0;
  double restart_trans_mm = 1.0;
  double tolerance = 1e-7;      // minimum accepted improvement of the evaluation loss
  int patience = 40;            // iterations without accepted improvement before stopping
  int resample_every = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RefineResult {
  Pose pose;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int iterations = 0;        // iterations run by the chosen restart
  int accepted_steps = 0;    // improving iterates accepted by the chosen restart
  int restart = 0;           // index of the chosen restart
  std::vector<double> loss_trace;  // accepted evaluation loss per iteration of the chosen restart
};

/// Raised when every restart hits a non-finite loss; carries the best finite
/// iterate seen.
class RefinementFailed : public Error {
 public:
  RefinementFailed(const std::string& message, const Pose& best, double loss)
      : Error(ErrorKind::kRefinementFailed, message), best_pose(best), best_loss(loss) {}
  Pose best_pose;
  double best_loss;
};

/// Monte Carlo restarts of Adam descent on the photometric loss. Only
/// iterates that lower the evaluation loss are kept, so final_loss <=
/// initial_loss. Throws kRefinementFailed when every restart goes non-finite.
template <typename Real>
RefineResult refine(const Pose& initial, const ImageGray& observed, const ProbeGeometry& geom,
                    const ImpedanceFieldT<Real>& field, const RefineConfig& config);

}  // namespace sonofield
