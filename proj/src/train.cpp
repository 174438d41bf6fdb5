#include "sonofield/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "sonofield/dataset.hpp"
#include "sonofield/error.hpp"
#include "sonofield/rng.hpp"

namespace sonofield {

namespace {

template <typename Real>
using RowMajorMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using ColVec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

template <typename Real>
Eigen::Map<const RowMajorMat<Real>> weights(const ImpedanceFieldT<Real>& f, const DenseLayerLayout& l) {
  return {f.params().data() + l.weight_offset, l.out, l.in};
}

template <typename Real>
Eigen::Map<RowMajorMat<Real>> weight_grad(GradientBuffer<Real>& g, const DenseLayerLayout& l) {
  return {g.values().data() + l.weight_offset, l.out, l.in};
}

template <typename Real>
Eigen::Map<ColVec<Real>> bias_grad(GradientBuffer<Real>& g, const DenseLayerLayout& l) {
  return {g.values().data() + l.bias_offset, l.out};
}

void split_samples(std::span<const PixelSample> samples, std::vector<Vec3>& points, std::vector<Vec3>& dirs,
                   std::vector<double>& targets) {
  points.resize(samples.size());
  dirs.resize(samples.size());
  targets.resize(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].target) {
      fail(ErrorKind::kContract, "sample " + std::to_string(i) + " carries no target intensity");
    }
    points[i] = samples[i].point;
    dirs[i] = samples[i].wave_dir;
    targets[i] = *samples[i].target;
  }
}

}  // namespace

template <typename Real>
GradientBuffer<Real>::GradientBuffer(const ImpedanceFieldT<Real>& field)
    : features_(field.config().features),
      table_params_(field.layout().table_params),
      values_(field.layout().total, Real(0)),
      touched_flag_(field.layout().table_rows, 0) {}

template <typename Real>
void GradientBuffer<Real>::clear() {
  for (std::uint64_t r : touched_) {
    std::fill_n(values_.begin() + static_cast<std::ptrdiff_t>(r * features_), features_, Real(0));
    touched_flag_[r] = 0;
  }
  touched_.clear();
  std::fill(values_.begin() + static_cast<std::ptrdiff_t>(table_params_), values_.end(), Real(0));
}

template <typename Real>
bool GradientBuffer<Real>::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](Real v) { return std::isfinite(v); });
}

template <typename Real>
void backward_batch(const ImpedanceFieldT<Real>& field, const FieldBatch<Real>& b,
                    const typename FieldBatch<Real>::RowVec& d_intensity, GradientBuffer<Real>* grads,
                    typename FieldBatch<Real>::Mat* d_features, typename FieldBatch<Real>::Mat* d_sh) {
  using Mat = typename FieldBatch<Real>::Mat;
  using RowVec = typename FieldBatch<Real>::RowVec;
  const ParameterLayout& L = field.layout();
  const GridConfig& c = field.config();
  constexpr int kEmbed = GridConfig::kEmbedDim;

  const RowVec d_logit =
      (d_intensity.array() * b.intensity.array() * (Real(1) - b.intensity.array())).matrix();

  Mat d_hidden_color = weights(field, L.color_out).transpose() * d_logit;
  d_hidden_color = (b.hidden_color.array() > Real(0)).select(d_hidden_color, Real(0));
  const Mat d_color_in = weights(field, L.color_hidden).transpose() * d_hidden_color;
  if (d_sh) *d_sh = d_color_in.bottomRows(d_color_in.rows() - kEmbed);

  Mat d_density_out = Mat::Zero(1 + kEmbed, b.count);
  d_density_out.bottomRows(kEmbed) = d_color_in.topRows(kEmbed);
  Mat d_hidden_density = weights(field, L.density_out).transpose() * d_density_out;
  d_hidden_density = (b.hidden_density.array() > Real(0)).select(d_hidden_density, Real(0));

  const bool need_features = d_features != nullptr || grads != nullptr;
  Mat d_feat;
  if (need_features) d_feat.noalias() = weights(field, L.density_hidden).transpose() * d_hidden_density;

  if (grads) {
    weight_grad(*grads, L.color_out).noalias() += d_logit * b.hidden_color.transpose();
    bias_grad(*grads, L.color_out)(0) += d_logit.sum();
    weight_grad(*grads, L.color_hidden).noalias() += d_hidden_color * b.color_in.transpose();
    bias_grad(*grads, L.color_hidden) += d_hidden_color.rowwise().sum();
    weight_grad(*grads, L.density_out).noalias() += d_density_out * b.hidden_density.transpose();
    bias_grad(*grads, L.density_out) += d_density_out.rowwise().sum();
    weight_grad(*grads, L.density_hidden).noalias() += d_hidden_density * b.features.transpose();
    bias_grad(*grads, L.density_hidden) += d_hidden_density.rowwise().sum();

    const int f = c.features;
    for (int s = 0; s < b.count; ++s) {
      const Real* df = d_feat.col(s).data();
      for (int l = 0; l < c.levels; ++l) {
        const std::size_t base = (static_cast<std::size_t>(s) * c.levels + l) * 8;
        for (int corner = 0; corner < 8; ++corner) {
          const std::uint64_t r = b.corner_rows[base + corner];
          const Real w = b.corner_weights[base + corner];
          grads->mark_row(r);
          Real* g = grads->row(r);
          for (int q = 0; q < f; ++q) g[q] += w * df[l * f + q];
        }
      }
    }
  }
  if (d_features) *d_features = std::move(d_feat);
}

template <typename Real>
double loss_recon(std::span<const PixelSample> samples, const ImpedanceFieldT<Real>& field) {
  require(!samples.empty(), ErrorKind::kContract, "loss over an empty sample set");
  std::vector<Vec3> points, dirs;
  std::vector<double> targets;
  split_samples(samples, points, dirs, targets);
  FieldBatch<Real> batch;
  evaluate_batch<Real>(field, points, dirs, false, batch);
  double sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double d = static_cast<double>(batch.intensity(i)) - targets[i];
    sum += d * d;
  }
  return sum / static_cast<double>(samples.size());
}

template <typename Real>
double backward(std::span<const PixelSample> samples, const ImpedanceFieldT<Real>& field,
                GradientBuffer<Real>& out) {
  require(!samples.empty(), ErrorKind::kContract, "backward over an empty sample set");
  std::vector<Vec3> points, dirs;
  std::vector<double> targets;
  split_samples(samples, points, dirs, targets);
  FieldBatch<Real> batch;
  evaluate_batch<Real>(field, points, dirs, false, batch);
  const double n = static_cast<double>(samples.size());
  typename FieldBatch<Real>::RowVec d_intensity(samples.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double d = static_cast<double>(batch.intensity(i)) - targets[i];
    sum += d * d;
    d_intensity(i) = static_cast<Real>(2.0 * d / n);
  }
  backward_batch<Real>(field, batch, d_intensity, &out, nullptr, nullptr);
  return sum / n;
}

template <typename Real>
void adam_step(ImpedanceFieldT<Real>& field, const GradientBuffer<Real>& grads, AdamState<Real>& state,
               const AdamConfig& cfg, bool sparse) {
  const auto g = grads.values();
  auto p = field.params();
  require(g.size() == p.size() && state.m.size() == p.size() && state.v.size() == p.size(),
          ErrorKind::kShape, "optimizer state does not match the field layout");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto update = [&](std::size_t i, double lr) {
    const double gi = static_cast<double>(g[i]);
    const double m = cfg.beta1 * static_cast<double>(state.m[i]) + (1.0 - cfg.beta1) * gi;
    const double v = cfg.beta2 * static_cast<double>(state.v[i]) + (1.0 - cfg.beta2) * gi * gi;
    state.m[i] = static_cast<Real>(m);
    state.v[i] = static_cast<Real>(v);
    p[i] = static_cast<Real>(static_cast<double>(p[i]) - lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.epsilon));
  };

  const std::size_t f = static_cast<std::size_t>(field.config().features);
  const std::size_t table_params = field.layout().table_params;
  if (sparse) {
    for (std::uint64_t r : grads.touched_rows()) {
      const std::size_t base = static_cast<std::size_t>(r) * f;
      bool nonzero = false;
      for (std::size_t q = 0; q < f; ++q) nonzero = nonzero || g[base + q] != Real(0);
      if (!nonzero) continue;
      for (std::size_t q = 0; q < f; ++q) update(base + q, cfg.lr_table);
    }
  } else {
    for (std::size_t i = 0; i < table_params; ++i) update(i, cfg.lr_table);
  }
  for (std::size_t i = table_params; i < p.size(); ++i) update(i, cfg.lr_mlp);
}

namespace {

template <typename Real>
bool updated_params_finite(const ImpedanceFieldT<Real>& field, const GradientBuffer<Real>& grads) {
  const auto p = field.params();
  const std::size_t f = static_cast<std::size_t>(field.config().features);
  for (std::uint64_t r : grads.touched_rows()) {
    for (std::size_t q = 0; q < f; ++q) {
      if (!std::isfinite(p[r * f + q])) return false;
    }
  }
  for (std::size_t i = field.layout().table_params; i < p.size(); ++i) {
    if (!std::isfinite(p[i])) return false;
  }
  return true;
}

}  // namespace

template <typename Real>
TrainResult train(const ScanDataset& dataset, ImpedanceFieldT<Real>& field, const TrainConfig& config,
                  const std::function<void(const MetricRow&)>& on_metric) {
  require(config.iterations >= 1, ErrorKind::kConfig, "iterations must be >= 1");
  require(config.pixels_per_step >= 1, ErrorKind::kConfig, "pixels_per_step must be >= 1");
  require(config.adam.lr_table > 0 && config.adam.lr_mlp > 0, ErrorKind::kConfig, "learning rates must be > 0");
  const auto train_ids = dataset.indices(Split::kTrain);
  const auto val_ids = dataset.indices(Split::kVal);
  require(!train_ids.empty(), ErrorKind::kContract, "dataset has no training images");

  const ProbeGeometry& geom = dataset.geometry;
  std::vector<Mat3> rotations;
  for (const auto& e : dataset.entries) rotations.push_back(pose_rotation(e.pose));

  Rng rng(config.seed);
  GradientBuffer<Real> grads(field);
  AdamState<Real> adam(field.params().size());
  TrainResult result;
  std::vector<PixelSample> samples(config.pixels_per_step);
  double window_sum = 0.0;
  int window_count = 0;

  for (int step = 1; step <= config.iterations; ++step) {
    const std::size_t id = train_ids[rng.index(train_ids.size())];
    const DatasetEntry& entry = dataset.entries[id];
    for (auto& s : samples) {
      const int u = static_cast<int>(rng.index(static_cast<std::size_t>(geom.image_w)));
      const int v = static_cast<int>(rng.index(static_cast<std::size_t>(geom.image_h)));
      const PixelRay ray = pixel_to_world(rotations[id], entry.pose.position, geom, u, v);
      s.point = ray.point;
      s.wave_dir = ray.wave_dir;
      s.target = entry.image.at(u, v);
    }
    const double loss = backward<Real>(samples, field, grads);
    if (!std::isfinite(loss) || !grads.all_finite()) {
      std::ostringstream msg;
      msg << "non-finite loss/gradient at step " << step << " (image " << entry.file << ", loss " << loss << ")";
      fail(ErrorKind::kNumeric, msg.str());
    }
    AdamConfig adam_cfg = config.adam;
    if (config.cosine_decay) {
      const double scale = 0.5 * (1.0 + std::cos(M_PI * (step - 1) / config.iterations));
      adam_cfg.lr_table *= scale;
      adam_cfg.lr_mlp *= scale;
    }
    adam_step(field, grads, adam, adam_cfg, true);
    if (!updated_params_finite(field, grads)) {
      fail(ErrorKind::kNumeric, "parameter became non-finite at step " + std::to_string(step));
    }
    grads.clear();
    result.step_losses.push_back(loss);
    window_sum += loss;
    ++window_count;

    const bool last = step == config.iterations;
    if (config.validate_every > 0 && (step % config.validate_every == 0 || last) && !val_ids.empty()) {
      MetricRow row;
      row.step = step;
      row.loss = window_sum / window_count;
      RenderOptions opts;
      opts.threads = config.threads;
      for (std::size_t id_val : val_ids) {
        const auto& e = dataset.entries[id_val];
        const ImageGray rendered = render_image(e.pose, geom, field, opts);
        row.psnr += psnr(rendered, e.image);
        row.ssim += ssim(rendered, e.image);
      }
      row.psnr /= static_cast<double>(val_ids.size());
      row.ssim /= static_cast<double>(val_ids.size());
      result.metrics.push_back(row);
      if (on_metric) on_metric(row);
      window_sum = 0.0;
      window_count = 0;
    }
  }
  return result;
}

#define SONOFIELD_INSTANTIATE(Real)                                                                        \
  template class GradientBuffer<Real>;                                                                     \
  template void backward_batch<Real>(const ImpedanceFieldT<Real>&, const FieldBatch<Real>&,               \
                                     const typename FieldBatch<Real>::RowVec&, GradientBuffer<Real>*,     \
                                     typename FieldBatch<Real>::Mat*, typename FieldBatch<Real>::Mat*);   \
  template double loss_recon<Real>(std::span<const PixelSample>, const ImpedanceFieldT<Real>&);           \
  template double backward<Real>(std::span<const PixelSample>, const ImpedanceFieldT<Real>&,              \
                                 GradientBuffer<Real>&);                                                   \
  template void adam_step<Real>(ImpedanceFieldT<Real>&, const GradientBuffer<Real>&, AdamState<Real>&,    \
                                const AdamConfig&, bool);                                                  \
  template TrainResult train<Real>(const ScanDataset&, ImpedanceFieldT<Real>&, const TrainConfig&,        \
                                   const std::function<void(const MetricRow&)>&);

SONOFIELD_INSTANTIATE(float)
SONOFIELD_INSTANTIATE(double)

}  // namespace sonofield
