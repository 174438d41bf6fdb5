#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "sonofield/dataset.hpp"
#include "sonofield/geometry.hpp"
#include "sonofield/image.hpp"

namespace sonofield {

/// Voxelized acoustic impedance in MRayl. Voxel (ix, iy, iz) sits at
/// origin + (ix, iy, iz) * spacing and is stored at (ix * ny + iy) * nz + iz.
struct PhantomVolume {
  std::array<int, 3> dims{2, 2, 2};
  Vec3 spacing = Vec3::Ones();
  Vec3 origin = Vec3::Zero();
  std::vector<float> values;

  std::size_t index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(ix) * dims[1] + iy) * dims[2] + iz;
  }
  float at(int ix, int iy, int iz) const { return values[index(ix, iy, iz)]; }
  Vec3 upper() const {
    return origin + Vec3((dims[0] - 1) * spacing[0], (dims[1] - 1) * spacing[1], (dims[2] - 1) * spacing[2]);
  }
  bool contains(const Vec3& x) const;
  void validate() const;
};

enum class PrimitiveKind { kEllipsoid, kSlab, kTube };

/// Solid in its own local frame (pose). `size` holds the half-extents:
/// ellipsoid semi-axes; slab box half-widths; tube (x, y) radii and half-length.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kEllipsoid;
  Pose pose;
  Vec3 size = Vec3::Ones();
  double impedance = 1.6;
  double edge_mm = 0.0;  // smoothstep blend width across the surface
};

struct PhantomSpec {
  std::array<int, 3> dims{64, 64, 64};
  Vec3 spacing = Vec3::Constant(0.8);
  Vec3 origin = Vec3(-25.2, -25.2, -6.0);
  double background = 1.38;
  std::vector<Primitive> primitives;
  double speckle = 0.1;  // alpha
  std::uint64_t seed = 0;

  void validate() const;
};

/// Abdomen-like default: fat background, muscle layer, liver- and
/// kidney-like inclusions and a vessel.
PhantomSpec default_phantom_spec();

/// Voxelizes primitives in order; later primitives overwrite earlier ones.
PhantomVolume gen_phantom(const PhantomSpec& spec);

/// Trilinear interpolation of voxel values. Throws kBounds outside the volume.
double sample_impedance(const PhantomVolume& volume, const Vec3& x);

struct BModeParams {
  double beta = 200.0;         // log-compression gain
  double r_max = 0.0;          // reflectivity normalizer; <= 0 derives it from the volume
  double speckle = 0.1;        // alpha
  double noise_cell_mm = 1.0;  // value-noise lattice spacing
  double attenuation = 0.0;    // mu per mm of depth
};

/// Largest |grad Z| / (2 Z) over the voxel grid (central differences).
double bmode_normalizer(const PhantomVolume& volume);

/// Deterministic value noise in [0, 1): trilinear blend of hashed lattice values.
double value_noise(const Vec3& x, std::uint64_t seed, double cell_mm);

/// Forward model: r = |d . grad Z| / (2 Z), log-compressed and modulated by
/// multiplicative speckle. Throws kDomain if any pixel leaves the volume.
ImageGray simulate_bmode(const PhantomVolume& volume, const Pose& pose, const ProbeGeometry& geom,
                         std::uint64_t noise_seed, const BModeParams& params = {});

enum class TrajectoryKind { kCircular, kFixedRotation, kRcmGrid };

struct TrajectoryParams {
  int count = 72;
  double diameter_mm = 20.0;
  double step_deg = 5.0;
  Vec3 center = Vec3::Zero();   // circle centre / fixed probe position on the skin plane
  double rcm_depth_mm = 30.0;   // remote centre lies this far below `center`
  int azimuth_count = 18;       // RCM grid only
  double azimuth_step_deg = 5.0;  // RCM grid only
  std::vector<double> tilts_deg = {0.0, 5.0, 10.0, 15.0, 20.0};  // RCM grid only
};

/// circular: `count` poses evenly spaced on the circle, each probe axis aimed
/// at the remote centre. fixed-rotation: `count` poses at `center` rotating
/// about the vertical probe axis in `step_deg` increments. rcm-grid: every
/// (azimuth, tilt) pair about the remote centre, azimuth-major; tilt is in
/// the image plane, as on the circular trajectory.
std::vector<Pose> gen_trajectory(TrajectoryKind kind, const TrajectoryParams& params);

/// Default held-out counts: floor(N/10) validation, round(N/10) test.
std::pair<int, int> default_split_counts(int n);

/// Spreads validation and test frames evenly along the trajectory.
std::vector<Split> assign_splits(int n, int n_val, int n_test);

/// Simulates every pose and returns the dataset with 8-bit quantized images
/// (identical to what export_dataset writes).
ScanDataset simulate_dataset(const PhantomVolume& volume, const std::vector<Pose>& poses,
                             const ProbeGeometry& geom, const std::vector<Split>& splits,
                             std::uint64_t noise_seed, const BModeParams& params = {});

/// simulate_dataset plus PGM files and manifest.json under out_dir.
ScanDataset export_dataset(const PhantomVolume& volume, const std::vector<Pose>& poses,
                           const ProbeGeometry& geom, const std::vector<Split>& splits,
                           const std::filesystem::path& out_dir, std::uint64_t noise_seed,
                           const BModeParams& params = {});

}  // namespace sonofield
