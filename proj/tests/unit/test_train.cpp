#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "sonofield/dataset.hpp"
#include "sonofield/error.hpp"
#include "sonofield/phantom.hpp"
#include "sonofield/train.hpp"
#include "support.hpp"

using namespace sonofield;

namespace {

std::vector<PixelSample> random_samples(const GridConfig& c, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PixelSample> out(n);
  for (auto& s : out) {
    for (int a = 0; a < 3; ++a) s.point[a] = rng.uniform(c.domain_min[a], c.domain_max[a]);
    s.wave_dir = testing::random_unit(rng);
    s.target = rng.uniform();
  }
  return out;
}

// Small scan of the default phantom at reduced image size.
ScanDataset toy_dataset(int count, std::uint64_t seed) {
  const PhantomVolume vol = gen_phantom(default_phantom_spec());
  TrajectoryParams tp;
  tp.count = count;
  const auto poses = gen_trajectory(TrajectoryKind::kCircular, tp);
  ProbeGeometry g;
  g.image_w = 48;
  g.image_h = 36;
  const auto [nv, nt] = default_split_counts(count);
  return simulate_dataset(vol, poses, g, assign_splits(count, nv, nt), seed);
}

GridConfig toy_grid(const ScanDataset& ds) {
  GridConfig c;
  c.levels = 6;
  c.features = 2;
  c.table_size = 1u << 10;
  c.res_min = 4;
  c.res_max = 24;
  c.hidden_width = 16;
  const auto poses = ds.poses();
  std::tie(c.domain_min, c.domain_max) = domain_from_poses(poses, ds.geometry);
  return c;
}

}  // namespace

TEST_CASE("loss_recon examples") {
  const GridConfig c = testing::small_config();
  const ImpedanceField64 zero(c);  // renders 0.5 everywhere
  std::vector<PixelSample> one(1);
  one[0].target = 1.0;
  CHECK(loss_recon<double>(one, zero) == doctest::Approx(0.25).epsilon(1e-15));

  std::vector<PixelSample> three(3);
  three[0].target = 0.0;
  three[1].target = 0.5;
  three[2].target = 0.9;
  CHECK(loss_recon<double>(three, zero) == doctest::Approx((0.25 + 0.0 + 0.16) / 3).epsilon(1e-15));

  auto samples = random_samples(c, 20, 1);
  const auto field = testing::unit_field<double>(c, 2);
  for (auto& s : samples) s.target = render_pixel(s, field);
  CHECK(loss_recon<double>(samples, field) < 1e-28);

  GradientBuffer<double> g(field);
  CHECK(backward<double>(samples, field, g) < 1e-28);
  for (double v : g.values()) REQUIRE(std::abs(v) < 1e-14);

  samples[3].target.reset();
  try {
    loss_recon<double>(samples, field);
    FAIL("expected contract error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kContract);
  }
}

TEST_CASE("backward matches loss_recon and finite differences") {
  const GridConfig c = testing::small_config();
  const auto field = testing::unit_field<double>(c, 3);
  const auto samples = random_samples(c, 32, 4);
  GradientBuffer<double> g(field);
  CHECK(backward<double>(samples, field, g) == doctest::Approx(loss_recon<double>(samples, field)).epsilon(1e-14));

  const auto report = gradcheck::reconstruction(150, 5);
  INFO("worst relative error " << report.worst);
  CHECK(report.pass_rate() >= 0.99);
}

TEST_CASE("backward is linear in the batch") {
  const GridConfig c = testing::small_config();
  const auto field = testing::unit_field<double>(c, 6);
  const auto a = random_samples(c, 10, 7), b = random_samples(c, 30, 8);
  std::vector<PixelSample> both = a;
  both.insert(both.end(), b.begin(), b.end());
  GradientBuffer<double> ga(field), gb(field), gu(field);
  backward<double>(a, field, ga);
  backward<double>(b, field, gb);
  backward<double>(both, field, gu);
  for (std::size_t i = 0; i < gu.values().size(); ++i) {
    const double expect = (10 * ga.values()[i] + 30 * gb.values()[i]) / 40;
    REQUIRE(std::abs(gu.values()[i] - expect) < 1e-12);
  }
}

TEST_CASE("GradientBuffer clear resets touched rows") {
  const GridConfig c = testing::small_config();
  const auto field = testing::unit_field<double>(c, 9);
  GradientBuffer<double> g(field);
  backward<double>(random_samples(c, 8, 10), field, g);
  CHECK_FALSE(g.touched_rows().empty());
  g.clear();
  for (double v : g.values()) REQUIRE(v == 0.0);
  CHECK(g.touched_rows().empty());
}

TEST_CASE("adam_step closed forms") {
  const GridConfig c = testing::small_config();
  auto field = testing::unit_field<double>(c, 11);
  const auto before = std::vector<double>(field.params().begin(), field.params().end());
  GradientBuffer<double> g(field);
  AdamState<double> state(field.params().size());
  AdamConfig cfg;

  // Zero gradient: parameters fixed, moments decay.
  const std::size_t i = field.layout().color_out.weight_offset;
  state.m[i] = 0.2;
  state.v[i] = 0.04;
  adam_step(field, g, state, cfg);
  CHECK(state.m[i] == doctest::Approx(0.9 * 0.2).epsilon(1e-15));
  CHECK(state.v[i] == doctest::Approx(0.99 * 0.04).epsilon(1e-15));
  CHECK(field.params()[i - 1] == before[i - 1]);

  // Fresh state, g = 1 at t = 1: bias-corrected moments are both 1.
  AdamState<double> fresh(field.params().size());
  const double p0 = field.params()[i];
  g.values()[i] = 1.0;
  adam_step(field, g, fresh, cfg);
  CHECK(field.params()[i] - p0 == doctest::Approx(-cfg.lr_mlp / (1.0 + cfg.epsilon)).epsilon(1e-12));
  CHECK(fresh.step == 1);
}

TEST_CASE("sparse and dense Adam agree") {
  const GridConfig c = testing::small_config();
  const auto field = testing::unit_field<double>(c, 12);
  GradientBuffer<double> g(field);
  AdamConfig cfg;
  auto sparse = field, dense = field;
  AdamState<double> ss(field.params().size()), sd(field.params().size());
  // One fixed batch, so every step touches the same rows; lazy (sparse) Adam
  // only matches dense Adam on rows whose gradient is live each step.
  const auto samples = random_samples(c, 16, 13);
  for (int step = 0; step < 3; ++step) {
    g.clear();
    backward<double>(samples, sparse, g);
    adam_step(sparse, g, ss, cfg, true);
    GradientBuffer<double> gd(dense);
    backward<double>(samples, dense, gd);
    adam_step(dense, gd, sd, cfg, false);
  }
  for (std::size_t i = 0; i < field.params().size(); ++i)
    REQUIRE(std::abs(sparse.params()[i] - dense.params()[i]) <= 1e-12);
}

TEST_CASE("train: fixed point on a uniform image") {
  ScanDataset ds;
  ds.geometry.image_w = 16;
  ds.geometry.image_h = 12;
  DatasetEntry e;
  e.file = "a.pgm";
  e.image = ImageGray(16, 12, 0.5f);
  ds.entries.push_back(e);
  GridConfig c = testing::small_config();
  ImpedanceField field(c);
  TrainConfig tc;
  tc.iterations = 20;
  tc.pixels_per_step = 64;
  tc.validate_every = 0;
  const auto result = train(ds, field, tc);
  REQUIRE(result.step_losses.size() == 20);
  for (double l : result.step_losses) CHECK(l == 0.0);
  for (float p : field.params()) REQUIRE(p == 0.0f);

  ScanDataset empty;
  CHECK_THROWS_AS(train(empty, field, tc), Error);
}

TEST_CASE("train: deterministic and loss decreasing on a toy scan") {
  const ScanDataset ds = toy_dataset(12, 1);
  const GridConfig c = toy_grid(ds);
  TrainConfig tc;
  tc.iterations = 300;
  tc.pixels_per_step = 512;
  tc.validate_every = 100;

  auto f1 = ImpedanceField::initialized(c, 3), f2 = ImpedanceField::initialized(c, 3);
  const auto r1 = train(ds, f1, tc);
  const auto r2 = train(ds, f2, tc);
  CHECK(r1.step_losses == r2.step_losses);
  REQUIRE(r1.metrics.size() == 3);
  for (std::size_t i = 0; i < r1.metrics.size(); ++i) {
    CHECK(r1.metrics[i].psnr == r2.metrics[i].psnr);
    CHECK(r1.metrics[i].ssim == r2.metrics[i].ssim);
  }
  CHECK(std::equal(f1.params().begin(), f1.params().end(), f2.params().begin()));
  CHECK(f1.all_finite());

  auto mean = [&](int from, int to) {
    double s = 0;
    for (int i = from; i < to; ++i) s += r1.step_losses[i];
    return s / (to - from);
  };
  CHECK(mean(250, 300) < mean(0, 50));
}
