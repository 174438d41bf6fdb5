#pragma once

// Finite-difference gradient checks shared by the unit and acceptance suites.
// Everything runs on 64-bit parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "sonofield/field_batch.hpp"
#include "sonofield/localizer.hpp"
#include "sonofield/refine.hpp"
#include "sonofield/rng.hpp"
#include "sonofield/train.hpp"

namespace gradcheck {

using namespace sonofield;

struct Report {
  int checked = 0;
  int passed = 0;
  double worst = 0.0;
  double pass_rate() const { return checked ? static_cast<double>(passed) / checked : 0.0; }
};

// Relative error with an absolute floor so that parameters whose true
// gradient is zero (both values at round-off level) count as agreeing.
inline double rel_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

inline void record(Report& r, double err, double tol) {
  ++r.checked;
  if (err <= tol) ++r.passed;
  r.worst = std::max(r.worst, err);
}

inline GridConfig check_grid() {
  GridConfig c;
  c.levels = 4;
  c.features = 2;
  c.table_size = 1u << 8;
  c.res_min = 3;
  c.res_max = 12;
  c.hidden_width = 16;
  c.sh_degree = 4;
  c.domain_min = Vec3(-10, -10, -2);
  c.domain_max = Vec3(10, 10, 30);
  return c;
}

// Field with unit-scale tables so the encoding carries real signal.
inline ImpedanceField64 check_field(std::uint64_t seed) {
  auto f = ImpedanceField64::initialized(check_grid(), seed);
  Rng rng(seed ^ 0x5eed);
  auto p = f.params();
  for (std::size_t i = 0; i < f.layout().table_params; ++i) p[i] = rng.uniform(-1, 1);
  for (std::size_t i = f.layout().table_params; i < p.size(); ++i) p[i] += 0.05 * rng.normal();
  return f;
}

// Smallest |pre-activation| over both hidden layers. Samples close to a ReLU
// kink would let a finite-difference step switch a unit on or off.
inline double relu_margin(const ImpedanceField64& field, const PixelSample& s) {
  FieldBatch<double> b;
  evaluate_batch(field, std::span<const Vec3>(&s.point, 1), std::span<const Vec3>(&s.wave_dir, 1), false, b);
  const auto p = field.params();
  auto pre = [&](const DenseLayerLayout& l, const Eigen::VectorXd& x) {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(p.data() + l.weight_offset, l.out, l.in);
    Eigen::Map<const Eigen::VectorXd> bias(p.data() + l.bias_offset, l.out);
    return Eigen::VectorXd(w * x + bias);
  };
  const ParameterLayout& L = field.layout();
  const double a = pre(L.density_hidden, b.features.col(0)).cwiseAbs().minCoeff();
  const double c = pre(L.color_hidden, b.color_in.col(0)).cwiseAbs().minCoeff();
  return std::min(a, c);
}

// (a) Reconstruction parameters: tables, density MLP and colour MLP sampled
// in equal thirds. Central differences with step 1e-4.
inline Report reconstruction(int count, std::uint64_t seed, double tol = 1e-4) {
  ImpedanceField64 field = check_field(seed);
  const GridConfig& c = field.config();
  Rng rng(seed);
  std::vector<PixelSample> samples;
  while (samples.size() < 64) {
    PixelSample s;
    for (int a = 0; a < 3; ++a) s.point[a] = rng.uniform(c.domain_min[a] + 0.5, c.domain_max[a] - 0.5);
    s.wave_dir = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    s.target = rng.uniform();
    if (relu_margin(field, s) >= 1e-3) samples.push_back(s);
  }
  GradientBuffer<double> grads(field);
  backward<double>(samples, field, grads);

  const ParameterLayout& L = field.layout();
  std::vector<std::size_t> tables, density, colour;
  for (std::uint64_t r : grads.touched_rows())
    for (int q = 0; q < c.features; ++q) tables.push_back(r * c.features + q);
  for (std::size_t i = L.table_params; i < L.color_hidden.weight_offset; ++i) density.push_back(i);
  for (std::size_t i = L.color_hidden.weight_offset; i < L.total; ++i) colour.push_back(i);

  Report report;
  auto params = field.params();
  const double h = 1e-4;
  for (int k = 0; k < count; ++k) {
    const auto& pool = k % 3 == 0 ? tables : k % 3 == 1 ? density : colour;
    const std::size_t i = pool[rng.index(pool.size())];
    const double keep = params[i];
    params[i] = keep + h;
    const double lp = loss_recon<double>(samples, field);
    params[i] = keep - h;
    const double lm = loss_recon<double>(samples, field);
    params[i] = keep;
    record(report, rel_error(grads.values()[i], (lp - lm) / (2 * h), 1e-8), tol);
  }
  return report;
}

// (b) Localizer parameters: encoder weights and proxies of a reduced-size
// encoder on a random batch.
inline Report localizer(int count, std::uint64_t seed, double tol = 1e-4) {
  LocalizerConfig cfg;
  cfg.encoder.input_size = 16;
  cfg.encoder.channels = {4, 8, 8};
  cfg.encoder.code_bits = 8;
  auto enc = Encoder64::initialized(cfg.encoder, seed);
  Rng rng(seed);
  for (auto& p : enc.params()) p += 0.05 * rng.normal();
  const int classes = 5;
  std::vector<LocalBatchItem> batch(3);
  for (auto& b : batch) {
    b.weak = ImageGray(16, 16);
    b.strong = ImageGray(16, 16);
    for (auto& v : b.weak.data) v = static_cast<float>(rng.uniform());
    for (auto& v : b.strong.data) v = static_cast<float>(rng.uniform());
    b.label = static_cast<int>(rng.index(classes));
  }
  Eigen::MatrixXd proxies(classes, cfg.encoder.code_bits);
  for (Eigen::Index i = 0; i < proxies.size(); ++i) proxies.data()[i] = rng.normal();

  std::vector<double> g(enc.params().size(), 0.0);
  Eigen::MatrixXd gp = Eigen::MatrixXd::Zero(classes, cfg.encoder.code_bits);
  loss_local<double>(batch, enc, proxies, cfg, g, &gp);

  Report report;
  const std::size_t n_enc = g.size(), n_total = n_enc + static_cast<std::size_t>(proxies.size());
  const double h = 1e-5;
  for (int k = 0; k < count; ++k) {
    const std::size_t i = rng.index(n_total);
    double* slot = i < n_enc ? &enc.params()[i] : proxies.data() + (i - n_enc);
    const double analytic = i < n_enc ? g[i] : gp.data()[i - n_enc];
    const double keep = *slot;
    *slot = keep + h;
    const double lp = loss_local<double>(batch, enc, proxies, cfg, {}, nullptr).total;
    *slot = keep - h;
    const double lm = loss_local<double>(batch, enc, proxies, cfg, {}, nullptr).total;
    *slot = keep;
    record(report, rel_error(analytic, (lp - lm) / (2 * h), 1e-8), tol);
  }
  return report;
}

// Piecewise structure of the rendered intensity at one pixel: enclosing cell
// at every level plus the ReLU activation pattern of both hidden layers.
inline std::vector<std::uint64_t> pixel_regime(const ImpedanceField64& field, const ProbeGeometry& geom,
                                               const Pose& pose, const PixelIndex& px) {
  const PixelRay ray = pixel_to_world(pose, geom, px.u, px.v);
  FieldBatch<double> b;
  evaluate_batch(field, std::span<const Vec3>(&ray.point, 1), std::span<const Vec3>(&ray.wave_dir, 1), true, b);
  std::vector<std::uint64_t> key(b.corner_rows.begin(), b.corner_rows.end());
  const Vec3 n = (ray.point - field.config().domain_min).cwiseQuotient(field.config().domain_max - field.config().domain_min);
  for (int a = 0; a < 3; ++a) key.push_back(n[a] < 0 ? 0 : n[a] > 1 ? 2 : 1);
  for (Eigen::Index i = 0; i < b.hidden_density.size(); ++i) key.push_back(b.hidden_density.data()[i] > 0);
  for (Eigen::Index i = 0; i < b.hidden_color.size(); ++i) key.push_back(b.hidden_color.data()[i] > 0);
  return key;
}

// (c) Pose parameters: translation (step 1e-4 mm) and rotation increment
// (step 1e-5 rad) for observations rendered from a nearby true pose.
inline Report pose(int count, std::uint64_t seed, double tol = 1e-3) {
  const ImpedanceField64 field = check_field(seed);
  ProbeGeometry geom;
  geom.image_w = 32;
  geom.image_h = 24;
  Rng rng(seed);
  Report report;
  while (report.checked < count) {
    Pose truth;
    truth.position = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    truth.euler_zyx = Vec3(rng.uniform(-M_PI, M_PI), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
    const ImageGray observed = render_image(truth, geom, field);
    const Pose start = perturb_pose(truth, Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.5,
                                    Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.03);
    // Keep pixels whose cells and activation patterns are the same at every
    // finite-difference probe, so no step straddles a breakpoint.
    std::vector<PixelIndex> pixels;
    for (const PixelIndex& px : sample_pixels(geom, 256, rng.next())) {
      const auto key = pixel_regime(field, geom, start, px);
      bool smooth = true;
      for (int a = 0; a < 6 && smooth; ++a) {
        Vec3 dt = Vec3::Zero(), om = Vec3::Zero();
        (a < 3 ? dt : om)[a % 3] = a < 3 ? 1e-4 : 1e-5;
        smooth = pixel_regime(field, geom, perturb_pose(start, dt, om), px) == key &&
                 pixel_regime(field, geom, perturb_pose(start, -dt, -om), px) == key;
      }
      if (smooth) pixels.push_back(px);
    }
    const PoseGradient pg = pose_gradient<double>(start, observed, geom, field, pixels);
    for (int a = 0; a < 6 && report.checked < count; ++a) {
      const double h = a < 3 ? 1e-4 : 1e-5;
      Vec3 dt = Vec3::Zero(), om = Vec3::Zero();
      (a < 3 ? dt : om)[a % 3] = h;
      const double lp = photometric_loss<double>(perturb_pose(start, dt, om), observed, geom, field, pixels);
      const double lm = photometric_loss<double>(perturb_pose(start, -dt, -om), observed, geom, field, pixels);
      record(report, rel_error(pg.grad[a], (lp - lm) / (2 * h), 1e-8), tol);
    }
  }
  return report;
}

}  // namespace gradcheck
