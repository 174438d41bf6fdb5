#include "sonofield/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "sonofield/error.hpp"
#include "sonofield/rng.hpp"

namespace sonofield {

bool PhantomVolume::contains(const Vec3& x) const {
  const Vec3 hi = upper();
  return (x.array() >= origin.array()).all() && (x.array() <= hi.array()).all();
}

void PhantomVolume::validate() const {
  require(dims[0] >= 2 && dims[1] >= 2 && dims[2] >= 2, ErrorKind::kSpec, "phantom dims must be >= 2");
  require((spacing.array() > 0).all(), ErrorKind::kSpec, "phantom spacing must be positive");
  require(values.size() == static_cast<std::size_t>(dims[0]) * dims[1] * dims[2], ErrorKind::kShape,
          "phantom value count does not match dims");
  require(std::all_of(values.begin(), values.end(), [](float v) { return v > 0.0f && std::isfinite(v); }),
          ErrorKind::kSpec, "phantom impedances must be positive");
}

void PhantomSpec::validate() const {
  require(dims[0] >= 2 && dims[1] >= 2 && dims[2] >= 2, ErrorKind::kSpec, "phantom dims must be >= 2");
  require((spacing.array() > 0).all(), ErrorKind::kSpec, "phantom spacing must be positive");
  require(background > 0, ErrorKind::kSpec, "background impedance must be positive");
  require(speckle >= 0 && speckle <= 0.5, ErrorKind::kSpec, "speckle amplitude must be in [0, 0.5]");
  for (std::size_t i = 0; i < primitives.size(); ++i) {
    const auto& p = primitives[i];
    require((p.size.array() > 0).all(), ErrorKind::kSpec,
            "primitive " + std::to_string(i) + " has zero volume");
    require(p.impedance > 0, ErrorKind::kSpec, "primitive " + std::to_string(i) + " impedance must be positive");
    require(p.edge_mm >= 0, ErrorKind::kSpec, "primitive " + std::to_string(i) + " edge width must be >= 0");
  }
}

PhantomSpec default_phantom_spec() {
  PhantomSpec s;
  auto add = [&](PrimitiveKind kind, Vec3 center, Vec3 euler, Vec3 size, double z, double edge) {
    Primitive p;
    p.kind = kind;
    p.pose.position = center;
    p.pose.euler_zyx = euler;
    p.size = size;
    p.impedance = z;
    p.edge_mm = edge;
    s.primitives.push_back(p);
  };
  add(PrimitiveKind::kSlab, {0, 0, 4}, {0, 0, 0}, {40, 40, 3}, 1.70, 4.8);               // muscle layer
  add(PrimitiveKind::kEllipsoid, {-2, 2, 20}, {0.4, 0.1, 0}, {9, 7, 6}, 1.65, 4.0);       // liver-like
  add(PrimitiveKind::kEllipsoid, {5, -3, 24}, {-0.6, 0, 0.3}, {3.5, 6, 3}, 1.62, 3.2);    // kidney-like
  add(PrimitiveKind::kTube, {0, 0, 11}, {0.8, M_PI / 2, 0}, {2, 2, 40}, 1.58, 3.2);       // vessel
  add(PrimitiveKind::kEllipsoid, {1, 3, 17}, {0, 0, 0}, {2.5, 2.5, 2.5}, 1.50, 3.2);      // cyst
  return s;
}

namespace {

double smoothstep(double a, double b, double t) {
  const double x = std::clamp((t - a) / (b - a), 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

// Signed distance-like measure in mm: negative inside, zero on the surface.
double surface_distance(const Primitive& p, const Vec3& local) {
  switch (p.kind) {
    case PrimitiveKind::kEllipsoid: {
      const double rho = local.cwiseQuotient(p.size).norm();
      if (rho < 1e-12) return -p.size.minCoeff();
      return local.norm() * (rho - 1.0) / rho;
    }
    case PrimitiveKind::kSlab:
      return (local.cwiseAbs() - p.size).maxCoeff();
    case PrimitiveKind::kTube: {
      const Eigen::Vector2d xy = local.head<2>();
      const double rho = xy.cwiseQuotient(p.size.head<2>()).norm();
      const double radial = rho < 1e-12 ? -p.size.head<2>().minCoeff() : xy.norm() * (rho - 1.0) / rho;
      return std::max(radial, std::abs(local[2]) - p.size[2]);
    }
  }
  return 1.0;
}

}  // namespace

PhantomVolume gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  PhantomVolume vol;
  vol.dims = spec.dims;
  vol.spacing = spec.spacing;
  vol.origin = spec.origin;
  vol.values.assign(static_cast<std::size_t>(spec.dims[0]) * spec.dims[1] * spec.dims[2],
                    static_cast<float>(spec.background));
  std::vector<Mat3> inverse;
  for (const auto& p : spec.primitives) inverse.push_back(pose_rotation(p.pose).transpose());

  for (int ix = 0; ix < vol.dims[0]; ++ix) {
    for (int iy = 0; iy < vol.dims[1]; ++iy) {
      for (int iz = 0; iz < vol.dims[2]; ++iz) {
        const Vec3 x = vol.origin + Vec3(ix, iy, iz).cwiseProduct(vol.spacing);
        double z = spec.background;
        for (std::size_t i = 0; i < spec.primitives.size(); ++i) {
          const Primitive& p = spec.primitives[i];
          const double s = surface_distance(p, inverse[i] * (x - p.pose.position));
          const double w = p.edge_mm > 0 ? 1.0 - smoothstep(-0.5 * p.edge_mm, 0.5 * p.edge_mm, s)
                                         : (s <= 0 ? 1.0 : 0.0);
          z = z * (1.0 - w) + p.impedance * w;
        }
        vol.values[vol.index(ix, iy, iz)] = static_cast<float>(z);
      }
    }
  }
  return vol;
}

namespace {

// Trilinear sample at a point already known to lie inside the volume.
double sample_inside(const PhantomVolume& v, const Vec3& x) {
  int cell[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    const double pos = (x[a] - v.origin[a]) / v.spacing[a];
    const double fl = std::clamp(std::floor(pos), 0.0, static_cast<double>(v.dims[a] - 2));
    cell[a] = static_cast<int>(fl);
    frac[a] = std::clamp(pos - fl, 0.0, 1.0);
  }
  double out = 0.0;
  for (int c = 0; c < 8; ++c) {
    double w = 1.0;
    for (int a = 0; a < 3; ++a) w *= ((c >> a) & 1) ? frac[a] : 1.0 - frac[a];
    out += w * v.at(cell[0] + (c & 1), cell[1] + ((c >> 1) & 1), cell[2] + ((c >> 2) & 1));
  }
  return out;
}

std::string format_point(const Vec3& x) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "(%.3f, %.3f, %.3f)", x[0], x[1], x[2]);
  return buf;
}

}  // namespace

double sample_impedance(const PhantomVolume& v, const Vec3& x) {
  if (!v.contains(x)) fail(ErrorKind::kBounds, "point " + format_point(x) + " outside the phantom volume");
  return sample_inside(v, x);
}

double bmode_normalizer(const PhantomVolume& v) {
  double best = 0.0;
  for (int ix = 1; ix + 1 < v.dims[0]; ++ix) {
    for (int iy = 1; iy + 1 < v.dims[1]; ++iy) {
      for (int iz = 1; iz + 1 < v.dims[2]; ++iz) {
        const Vec3 g((v.at(ix + 1, iy, iz) - v.at(ix - 1, iy, iz)) / (2.0 * v.spacing[0]),
                     (v.at(ix, iy + 1, iz) - v.at(ix, iy - 1, iz)) / (2.0 * v.spacing[1]),
                     (v.at(ix, iy, iz + 1) - v.at(ix, iy, iz - 1)) / (2.0 * v.spacing[2]));
        best = std::max(best, g.norm() / (2.0 * v.at(ix, iy, iz)));
      }
    }
  }
  return best > 0.0 ? best : 1.0;
}

double value_noise(const Vec3& x, std::uint64_t seed, double cell_mm) {
  std::int64_t base[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    const double pos = x[a] / cell_mm;
    const double fl = std::floor(pos);
    base[a] = static_cast<std::int64_t>(fl);
    frac[a] = pos - fl;
  }
  const std::uint64_t s = mix64(seed);
  double out = 0.0;
  for (int c = 0; c < 8; ++c) {
    const std::uint64_t i = static_cast<std::uint64_t>(base[0] + (c & 1));
    const std::uint64_t j = static_cast<std::uint64_t>(base[1] + ((c >> 1) & 1));
    const std::uint64_t k = static_cast<std::uint64_t>(base[2] + ((c >> 2) & 1));
    const std::uint64_t h = mix64(s ^ mix64(i ^ mix64(j ^ mix64(k))));
    const double value = static_cast<double>(h >> 11) * 0x1.0p-53;
    double w = 1.0;
    for (int a = 0; a < 3; ++a) w *= ((c >> a) & 1) ? frac[a] : 1.0 - frac[a];
    out += w * value;
  }
  return out;
}

ImageGray simulate_bmode(const PhantomVolume& vol, const Pose& pose, const ProbeGeometry& geom,
                         std::uint64_t noise_seed, const BModeParams& params) {
  geom.validate();
  vol.validate();
  const double r_max = params.r_max > 0 ? params.r_max : bmode_normalizer(vol);
  const double denom = std::log1p(params.beta * r_max);
  const Vec3 lo = vol.origin, hi = vol.upper();
  const Mat3 rot = pose_rotation(pose);
  ImageGray img(geom.image_w, geom.image_h);
  for (int v = 0; v < geom.image_h; ++v) {
    for (int u = 0; u < geom.image_w; ++u) {
      const PixelRay ray = pixel_to_world(rot, pose.position, geom, u, v);
      if (!vol.contains(ray.point)) {
        fail(ErrorKind::kDomain, "image plane leaves the phantom volume at pixel (" + std::to_string(u) + ", " +
                                     std::to_string(v) + "), point " + format_point(ray.point));
      }
      const double z = sample_inside(vol, ray.point);
      Vec3 grad;
      for (int a = 0; a < 3; ++a) {
        Vec3 plus = ray.point, minus = ray.point;
        plus[a] = std::min(plus[a] + vol.spacing[a], hi[a]);
        minus[a] = std::max(minus[a] - vol.spacing[a], lo[a]);
        grad[a] = (sample_inside(vol, plus) - sample_inside(vol, minus)) / (plus[a] - minus[a]);
      }
      const double r = std::abs(ray.wave_dir.dot(grad)) / (2.0 * z);
      double raw = std::log1p(params.beta * r) / denom;
      if (params.attenuation > 0) {
        raw *= std::exp(-params.attenuation * geom.depth_mm * v / (geom.image_h - 1));
      }
      const double eta = value_noise(ray.point, noise_seed, params.noise_cell_mm);
      img.at(u, v) = static_cast<float>(std::clamp(raw * (1.0 + params.speckle * (eta - 0.5)), 0.0, 1.0));
    }
  }
  return img;
}

std::vector<Pose> gen_trajectory(TrajectoryKind kind, const TrajectoryParams& p) {
  std::vector<Pose> poses;
  switch (kind) {
    case TrajectoryKind::kCircular: {
      require(p.count >= 1, ErrorKind::kConfig, "trajectory count must be >= 1");
      require(p.diameter_mm > 0 && p.rcm_depth_mm > 0, ErrorKind::kConfig,
              "circular trajectory needs positive diameter and remote-centre depth");
      const double radius = 0.5 * p.diameter_mm;
      const double tilt = -std::atan2(radius, p.rcm_depth_mm);
      for (int k = 0; k < p.count; ++k) {
        const double azimuth = 2.0 * M_PI * k / p.count;
        Pose pose;
        pose.position = p.center + rot_z(azimuth) * Vec3(radius, 0, 0);
        pose.euler_zyx = Vec3(wrap_angle(azimuth), tilt, 0.0);
        poses.push_back(pose);
      }
      break;
    }
    case TrajectoryKind::kFixedRotation: {
      require(p.count >= 1, ErrorKind::kConfig, "trajectory count must be >= 1");
      for (int k = 0; k < p.count; ++k) {
        Pose pose;
        pose.position = p.center;
        pose.euler_zyx = Vec3(wrap_angle(k * p.step_deg * M_PI / 180.0), 0.0, 0.0);
        poses.push_back(pose);
      }
      break;
    }
    case TrajectoryKind::kRcmGrid: {
      require(p.azimuth_count >= 1 && !p.tilts_deg.empty(), ErrorKind::kConfig,
              "RCM grid needs at least one azimuth and one tilt");
      require(p.rcm_depth_mm > 0, ErrorKind::kConfig, "RCM grid needs a positive remote-centre depth");
      const Vec3 rcm = p.center + Vec3(0, 0, p.rcm_depth_mm);
      for (int a = 0; a < p.azimuth_count; ++a) {
        const double azimuth = a * p.azimuth_step_deg * M_PI / 180.0;
        for (double tilt_deg : p.tilts_deg) {
          const Mat3 r = rot_z(azimuth) * rot_y(-tilt_deg * M_PI / 180.0);
          Pose pose;
          pose.position = rcm - p.rcm_depth_mm * (r * Vec3::UnitZ());
          pose.euler_zyx = euler_zyx_from_rotation(r);
          poses.push_back(pose);
        }
      }
      break;
    }
  }
  return poses;
}

std::pair<int, int> default_split_counts(int n) {
  return {n / 10, static_cast<int>(std::lround(n / 10.0))};
}

std::vector<Split> assign_splits(int n, int n_val, int n_test) {
  require(n >= 1 && n_val >= 0 && n_test >= 0 && n_val + n_test < n, ErrorKind::kConfig,
          "split counts must leave at least one training image");
  std::vector<Split> out(n, Split::kTrain);
  auto place = [&](int count, double phase, Split split) {
    for (int k = 0; k < count; ++k) {
      int i = static_cast<int>(std::lround((k + phase) * n / count)) % n;
      while (out[i] != Split::kTrain) i = (i + 1) % n;
      out[i] = split;
    }
  };
  place(n_test, 0.25, Split::kTest);
  place(n_val, 0.75, Split::kVal);
  return out;
}

ScanDataset simulate_dataset(const PhantomVolume& volume, const std::vector<Pose>& poses,
                             const ProbeGeometry& geom, const std::vector<Split>& splits,
                             std::uint64_t noise_seed, const BModeParams& params) {
  require(splits.size() == poses.size(), ErrorKind::kContract, "one split tag per pose required");
  BModeParams fixed = params;
  if (fixed.r_max <= 0) fixed.r_max = bmode_normalizer(volume);
  ScanDataset d;
  d.geometry = geom;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    DatasetEntry e;
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03zu.pgm", i);
    e.file = name;
    e.pose = poses[i];
    e.split = splits[i];
    e.class_index = static_cast<int>(i);
    e.image = quantize8(simulate_bmode(volume, poses[i], geom, noise_seed, fixed));
    d.entries.push_back(std::move(e));
  }
  return d;
}

ScanDataset export_dataset(const PhantomVolume& volume, const std::vector<Pose>& poses,
                           const ProbeGeometry& geom, const std::vector<Split>& splits,
                           const std::filesystem::path& out_dir, std::uint64_t noise_seed,
                           const BModeParams& params) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + out_dir.string() + ": " + ec.message());
  ScanDataset d = simulate_dataset(volume, poses, geom, splits, noise_seed, params);
  for (const auto& e : d.entries) write_pgm(out_dir / e.file, e.image);
  d.manifest_path = out_dir / "manifest.json";
  save_manifest(d, d.manifest_path);
  return d;
}

}  // namespace sonofield
