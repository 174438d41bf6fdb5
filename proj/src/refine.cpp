#include "sonofield/refine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sonofield/field_batch.hpp"
#include "sonofield/rng.hpp"
#include "sonofield/spherical_harmonics.hpp"
#include "sonofield/train.hpp"

namespace sonofield {

namespace {

struct PixelBatch {
  std::vector<Vec3> points, dirs, local_points, local_dirs;
  std::vector<double> observed;
};

PixelBatch gather(const Pose& pose, const ImageGray& observed, const ProbeGeometry& geom,
                  std::span<const PixelIndex> pixels) {
  require(observed.width == geom.image_w && observed.height == geom.image_h, ErrorKind::kShape,
          "observed image does not match the probe geometry");
  require(!pixels.empty(), ErrorKind::kContract, "empty pixel set");
  const Mat3 r = pose_rotation(pose);
  PixelBatch b;
  for (const auto& px : pixels) {
    if (px.u < 0 || px.u >= geom.image_w || px.v < 0 || px.v >= geom.image_h) {
      fail(ErrorKind::kBounds, "pixel (" + std::to_string(px.u) + ", " + std::to_string(px.v) + ") outside the image");
    }
    const PixelRay local = pixel_to_local(geom, px.u, px.v);
    b.local_points.push_back(local.point);
    b.local_dirs.push_back(local.wave_dir);
    b.points.push_back(r * local.point + pose.position);
    b.dirs.push_back(r * local.wave_dir);
    b.observed.push_back(observed.at(px.u, px.v));
  }
  return b;
}

bool finite6(const Eigen::Matrix<double, 6, 1>& v) { return v.allFinite(); }

}  // namespace

std::vector<PixelIndex> sample_pixels(const ProbeGeometry& geom, int count, std::uint64_t seed) {
  const int total = geom.image_w * geom.image_h;
  std::vector<int> chosen;
  if (count >= total) {
    chosen.resize(total);
    std::iota(chosen.begin(), chosen.end(), 0);
  } else {
    require(count >= 1, ErrorKind::kConfig, "pixel count must be >= 1");
    // Partial Fisher-Yates over the flat pixel index.
    std::vector<int> all(total);
    std::iota(all.begin(), all.end(), 0);
    Rng rng(mix64(seed));
    for (int i = 0; i < count; ++i) std::swap(all[i], all[i + rng.index(total - i)]);
    chosen.assign(all.begin(), all.begin() + count);
    std::sort(chosen.begin(), chosen.end());
  }
  std::vector<PixelIndex> out;
  out.reserve(chosen.size());
  for (int k : chosen) out.push_back({k % geom.image_w, k / geom.image_w});
  return out;
}

template <typename Real>
double photometric_loss(const Pose& pose, const ImageGray& observed, const ProbeGeometry& geom,
                        const ImpedanceFieldT<Real>& field, std::span<const PixelIndex> pixels) {
  const auto b = gather(pose, observed, geom, pixels);
  FieldBatch<Real> batch;
  evaluate_batch(field, std::span<const Vec3>(b.points), std::span<const Vec3>(b.dirs), true, batch);
  double sum = 0.0;
  for (std::size_t i = 0; i < b.observed.size(); ++i) {
    const double d = static_cast<double>(batch.intensity[i]) - b.observed[i];
    sum += d * d;
  }
  return sum / b.observed.size();
}

template <typename Real>
PoseGradient pose_gradient(const Pose& pose, const ImageGray& observed, const ProbeGeometry& geom,
                           const ImpedanceFieldT<Real>& field, std::span<const PixelIndex> pixels) {
  const auto b = gather(pose, observed, geom, pixels);
  const GridConfig& cfg = field.config();
  const ParameterLayout& layout = field.layout();
  const Mat3 rt = pose_rotation(pose).transpose();
  const int n = static_cast<int>(b.points.size());
  const int f = cfg.features;

  FieldBatch<Real> batch;
  evaluate_batch(field, std::span<const Vec3>(b.points), std::span<const Vec3>(b.dirs), true, batch);
  typename FieldBatch<Real>::RowVec d_int(n);
  PoseGradient out;
  for (int i = 0; i < n; ++i) {
    const double d = static_cast<double>(batch.intensity[i]) - b.observed[i];
    out.loss += d * d / n;
    d_int[i] = static_cast<Real>(2.0 * d / n);
  }
  typename FieldBatch<Real>::Mat d_features, d_sh;
  backward_batch<Real>(field, batch, d_int, nullptr, &d_features, &d_sh);

  const Vec3 extent = cfg.domain_max - cfg.domain_min;
  std::vector<Real> sh(cfg.sh_dim());
  std::vector<std::array<Real, 3>> sh_grad(cfg.sh_dim());
  for (int i = 0; i < n; ++i) {
    const Vec3 raw = (b.points[i] - cfg.domain_min).cwiseQuotient(extent);
    const Vec3 xn = raw.cwiseMax(0.0).cwiseMin(1.0);
    Vec3 g_x = Vec3::Zero();
    for (int l = 0; l < cfg.levels; ++l) {
      const LevelCorners lc = level_corners(cfg, layout, l, xn);
      for (int c = 0; c < 8; ++c) {
        const Real* row = field.table_row(lc.rows[c]);
        double dot = 0.0;
        for (int k = 0; k < f; ++k) dot += static_cast<double>(d_features(l * f + k, i)) * row[k];
        for (int a = 0; a < 3; ++a) {
          double dw = ((c >> a) & 1) ? 1.0 : -1.0;
          for (int o = 0; o < 3; ++o) {
            if (o != a) dw *= ((c >> o) & 1) ? lc.frac[o] : 1.0 - lc.frac[o];
          }
          g_x[a] += dot * dw * lc.cell_scale[a];
        }
      }
    }
    for (int a = 0; a < 3; ++a) {
      if (raw[a] < 0.0 || raw[a] > 1.0) g_x[a] = 0.0;  // clamped coordinate
    }
    const Vec3& d = b.dirs[i];
    sh_encode_unchecked<Real>(static_cast<Real>(d[0]), static_cast<Real>(d[1]), static_cast<Real>(d[2]),
                              cfg.sh_degree, sh.data(), sh_grad.data());
    Vec3 g_d = Vec3::Zero();
    for (int k = 0; k < cfg.sh_dim(); ++k) {
      for (int a = 0; a < 3; ++a) g_d[a] += static_cast<double>(d_sh(k, i)) * sh_grad[k][a];
    }
    out.grad.head<3>() += g_x;
    out.grad.tail<3>() += b.local_points[i].cross(rt * g_x) + b.local_dirs[i].cross(rt * g_d);
  }
  return out;
}

Pose perturb_pose(const Pose& pose, const Vec3& dt, const Vec3& omega) {
  Pose out;
  out.position = pose.position + dt;
  out.euler_zyx = euler_zyx_from_rotation(pose_rotation(pose) * so3_exp(omega));
  return out;
}

void RefineConfig::validate() const {
  require(restarts >= 1, ErrorKind::kConfig, "refinement needs at least one restart");
  require(max_iterations >= 1, ErrorKind::kConfig, "refinement needs at least one iteration");
  require(pixels_per_step >= 1 && eval_pixels >= 1, ErrorKind::kConfig, "pixel counts must be >= 1");
  require(lr_trans_mm > 0 && lr_rot_deg > 0, ErrorKind::kConfig, "learning rates must be positive");
  require(resample_every >= 1 && patience >= 1, ErrorKind::kConfig, "resample and patience must be >= 1");
}

template <typename Real>
RefineResult refine(const Pose& initial, const ImageGray& observed, const ProbeGeometry& geom,
                    const ImpedanceFieldT<Real>& field, const RefineConfig& config) {
  config.validate();
  geom.validate();
  {
    const Mat3 r = pose_rotation(initial);
    const GridConfig& c = field.config();
    int inside = 0;
    for (int v = 0; v < geom.image_h; ++v) {
      for (int u = 0; u < geom.image_w; ++u) {
        const Vec3 x = pixel_to_world(r, initial.position, geom, u, v).point;
        inside += (x.array() >= c.domain_min.array()).all() && (x.array() <= c.domain_max.array()).all();
      }
    }
    if (2 * inside < geom.image_w * geom.image_h) {
      fail(ErrorKind::kDomain, "initial pose places fewer than half of the pixels inside the field domain");
    }
  }

  const auto eval_set = sample_pixels(geom, config.eval_pixels, config.seed ^ 0x5eedULL);
  auto evaluate = [&](const Pose& p) { return photometric_loss(p, observed, geom, field, eval_set); };
  const double initial_loss = evaluate(initial);
  if (!std::isfinite(initial_loss)) {
    throw RefinementFailed("photometric loss is non-finite at the initial pose", initial, initial_loss);
  }

  Rng starts(mix64(config.seed));
  const double lr_rot = config.lr_rot_deg * M_PI / 180.0;
  RefineResult best;
  bool have_best = false;
  bool all_diverged = true;
  Pose best_finite = initial;
  double best_finite_loss = initial_loss;

  for (int r = 0; r < config.restarts; ++r) {
    Pose pose = initial;
    if (r > 0) {
      Vec3 axis(starts.normal(), starts.normal(), starts.normal());
      axis.normalize();
      Vec3 shift(starts.normal(), starts.normal(), starts.normal());
      shift.normalize();
      const double angle = config.restart_rot_deg * M_PI / 180.0 * starts.uniform();
      pose = perturb_pose(initial, shift * config.restart_trans_mm * starts.uniform(), axis * angle);
    }
    RefineResult run;
    run.restart = r;
    run.initial_loss = initial_loss;
    run.pose = pose;
    run.final_loss = r == 0 ? initial_loss : evaluate(pose);
    if (!std::isfinite(run.final_loss)) continue;

    Rng rng(mix64(config.seed + 0x9e37ULL * (r + 1)));
    Eigen::Matrix<double, 6, 1> m = Eigen::Matrix<double, 6, 1>::Zero(), v = m;
    std::vector<PixelIndex> pixels;
    bool diverged = false;
    int since_improvement = 0;
    for (int it = 0; it < config.max_iterations; ++it) {
      if (it % config.resample_every == 0) pixels = sample_pixels(geom, config.pixels_per_step, rng.next());
      const PoseGradient pg = pose_gradient(pose, observed, geom, field, pixels);
      if (!std::isfinite(pg.loss) || !finite6(pg.grad)) {
        diverged = true;
        break;
      }
      const double t = it + 1;
      m = 0.9 * m + 0.1 * pg.grad;
      v = 0.9 * v + 0.1 * pg.grad.cwiseProduct(pg.grad);
      Eigen::Matrix<double, 6, 1> step;
      for (int k = 0; k < 6; ++k) {
        step[k] = (m[k] / (1.0 - std::pow(0.9, t))) / (std::sqrt(v[k] / (1.0 - std::pow(0.9, t))) + 1e-12);
      }
      pose = perturb_pose(pose, -config.lr_trans_mm * step.head<3>(), -lr_rot * step.tail<3>());
      const double loss = evaluate(pose);
      ++run.iterations;
      if (!std::isfinite(loss)) {
        diverged = true;
        break;
      }
      if (loss < run.final_loss - config.tolerance) {
        run.final_loss = loss;
        run.pose = pose;
        ++run.accepted_steps;
        since_improvement = 0;
      } else if (++since_improvement >= config.patience) {
        run.loss_trace.push_back(run.final_loss);
        break;
      }
      run.loss_trace.push_back(run.final_loss);
    }
    if (run.final_loss < best_finite_loss) {
      best_finite_loss = run.final_loss;
      best_finite = run.pose;
    }
    if (diverged) continue;
    all_diverged = false;
    if (!have_best || run.final_loss < best.final_loss) {
      best = run;
      have_best = true;
    }
  }
  if (all_diverged) {
    throw RefinementFailed("every refinement restart became non-finite", best_finite, best_finite_loss);
  }
  return best;
}

#define SONOFIELD_INSTANTIATE(Real)                                                                       \
  template double photometric_loss<Real>(const Pose&, const ImageGray&, const ProbeGeometry&,            \
                                         const ImpedanceFieldT<Real>&, std::span<const PixelIndex>);     \
  template PoseGradient pose_gradient<Real>(const Pose&, const ImageGray&, const ProbeGeometry&,         \
                                            const ImpedanceFieldT<Real>&, std::span<const PixelIndex>);  \
  template RefineResult refine<Real>(const Pose&, const ImageGray&, const ProbeGeometry&,                \
                                     const ImpedanceFieldT<Real>&, const RefineConfig&);

SONOFIELD_INSTANTIATE(float)
SONOFIELD_INSTANTIATE(double)

#undef SONOFIELD_INSTANTIATE

}  // namespace sonofield
