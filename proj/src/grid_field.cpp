#include "sonofield/grid_field.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "sonofield/error.hpp"
#include "sonofield/field_batch.hpp"
#include "sonofield/parallel.hpp"
#include "sonofield/rng.hpp"
#include "sonofield/spherical_harmonics.hpp"

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
Eigen::Map<const ColVec<Real>> bias(const ImpedanceFieldT<Real>& f, const DenseLayerLayout& l) {
  return {f.params().data() + l.bias_offset, l.out};
}

constexpr std::size_t kRenderChunk = 1024;
constexpr std::size_t kMarchPixelsPerChunk = 64;

}  // namespace

double GridConfig::growth() const {
  if (levels <= 1) return 1.0;
  return std::exp((std::log(static_cast<double>(res_max)) - std::log(static_cast<double>(res_min))) /
                  (levels - 1));
}

void GridConfig::validate() const {
  require(levels >= 1, ErrorKind::kConfig, "levels must be >= 1");
  require(features >= 1, ErrorKind::kConfig, "feature_dim must be >= 1");
  require(table_size >= 2 && (table_size & (table_size - 1)) == 0, ErrorKind::kConfig,
          "table_size must be a power of two >= 2");
  require(res_min >= 1 && res_min <= res_max, ErrorKind::kConfig, "need 1 <= res_min <= res_max");
  require((domain_min.array() < domain_max.array()).all(), ErrorKind::kConfig,
          "domain_min must be below domain_max on every axis");
  require(sh_degree >= 1 && sh_degree <= kMaxShDegree, ErrorKind::kConfig, "sh_degree must be in [1, 4]");
  require(hidden_width >= 1, ErrorKind::kConfig, "hidden_width must be >= 1");
}

int grid_resolution(const GridConfig& config, int level) {
  require(level >= 1 && level <= config.levels, ErrorKind::kBounds,
          "level " + std::to_string(level) + " outside [1, " + std::to_string(config.levels) + "]");
  const double value = config.res_min * std::pow(config.growth(), level - 1);
  // The epsilon absorbs exp/log round-off so that level L lands on res_max.
  return static_cast<int>(std::floor(value + 1e-9));
}

std::uint64_t hash_index(std::uint64_t i, std::uint64_t j, std::uint64_t k, const GridConfig& config) {
  return (i ^ (j * config.prime1) ^ (k * config.prime2)) & (static_cast<std::uint64_t>(config.table_size) - 1);
}

ParameterLayout::ParameterLayout(const GridConfig& c) {
  c.validate();
  std::uint64_t row = 0;
  for (int l = 1; l <= c.levels; ++l) {
    const int n = grid_resolution(c, l);
    const std::uint64_t side = static_cast<std::uint64_t>(n) + 1;
    const std::uint64_t verts = side * side * side;
    const bool is_dense = verts <= c.table_size;
    resolution.push_back(n);
    dense.push_back(is_dense);
    rows.push_back(is_dense ? verts : c.table_size);
    row_offset.push_back(row);
    row += rows.back();
  }
  table_rows = row;
  table_params = static_cast<std::size_t>(row) * c.features;

  std::size_t offset = table_params;
  auto add_layer = [&](int in, int out) {
    DenseLayerLayout l;
    l.in = in;
    l.out = out;
    l.weight_offset = offset;
    offset += static_cast<std::size_t>(in) * out;
    l.bias_offset = offset;
    offset += out;
    return l;
  };
  density_hidden = add_layer(c.encoding_dim(), c.hidden_width);
  density_out = add_layer(c.hidden_width, 1 + GridConfig::kEmbedDim);
  color_hidden = add_layer(c.color_input_dim(), c.hidden_width);
  color_out = add_layer(c.hidden_width, 1);
  total = offset;
}

template <typename Real>
ImpedanceFieldT<Real>::ImpedanceFieldT(const GridConfig& config)
    : config_(config), layout_(config), params_(layout_.total, Real(0)) {}

template <typename Real>
ImpedanceFieldT<Real> ImpedanceFieldT<Real>::initialized(const GridConfig& config, std::uint64_t seed) {
  ImpedanceFieldT field(config);
  Rng rng(seed);
  auto& p = field.params_;
  for (std::size_t i = 0; i < field.layout_.table_params; ++i) {
    p[i] = static_cast<Real>(rng.uniform(-1e-4, 1e-4));
  }
  for (const auto* l : {&field.layout_.density_hidden, &field.layout_.density_out,
                        &field.layout_.color_hidden, &field.layout_.color_out}) {
    const double bound = std::sqrt(6.0 / l->in);
    for (std::size_t i = 0; i < static_cast<std::size_t>(l->in) * l->out; ++i) {
      p[l->weight_offset + i] = static_cast<Real>(rng.uniform(-bound, bound));
    }
  }
  return field;
}

template <typename Real>
bool ImpedanceFieldT<Real>::all_finite() const {
  return std::all_of(params_.begin(), params_.end(), [](Real v) { return std::isfinite(v); });
}

Vec3 normalize_to_domain(const GridConfig& c, const ParameterLayout&, const Vec3& x, bool clamp) {
  Vec3 n = (x - c.domain_min).cwiseQuotient(c.domain_max - c.domain_min);
  if (!((n.array() >= 0.0).all() && (n.array() <= 1.0).all())) {
    if (!clamp) {
      fail(ErrorKind::kDomain, "point (" + std::to_string(x[0]) + ", " + std::to_string(x[1]) + ", " +
                                   std::to_string(x[2]) + ") outside the field domain");
    }
    n = n.cwiseMax(0.0).cwiseMin(1.0);
  }
  return n;
}

LevelCorners level_corners(const GridConfig& c, const ParameterLayout& layout, int l, const Vec3& xn) {
  LevelCorners out;
  const int n = layout.resolution[l];
  const std::uint64_t side = static_cast<std::uint64_t>(n) + 1;
  std::uint64_t cell[3];
  for (int a = 0; a < 3; ++a) {
    const double pos = xn[a] * n;
    const double fl = std::min(std::floor(pos), static_cast<double>(n - 1));
    cell[a] = static_cast<std::uint64_t>(std::max(fl, 0.0));
    out.frac[a] = pos - static_cast<double>(cell[a]);
    out.cell_scale[a] = n / (c.domain_max[a] - c.domain_min[a]);
  }
  for (int corner = 0; corner < 8; ++corner) {
    const std::uint64_t i = cell[0] + (corner & 1);
    const std::uint64_t j = cell[1] + ((corner >> 1) & 1);
    const std::uint64_t k = cell[2] + ((corner >> 2) & 1);
    const std::uint64_t row = layout.dense[l] ? i + side * (j + side * k) : hash_index(i, j, k, c);
    out.rows[corner] = layout.row_offset[l] + row;
    double w = 1.0;
    for (int a = 0; a < 3; ++a) w *= ((corner >> a) & 1) ? out.frac[a] : 1.0 - out.frac[a];
    out.weights[corner] = w;
  }
  return out;
}

template <typename Real>
void encode_batch(const ImpedanceFieldT<Real>& field, std::span<const Vec3> points, bool clamp,
                  FieldBatch<Real>& batch) {
  const GridConfig& c = field.config();
  const ParameterLayout& layout = field.layout();
  const int n = static_cast<int>(points.size());
  const int f = c.features;
  batch.count = n;
  batch.features.setZero(c.encoding_dim(), n);
  const std::size_t corners = static_cast<std::size_t>(n) * c.levels * 8;
  batch.corner_rows.resize(corners);
  batch.corner_weights.resize(corners);
  for (int s = 0; s < n; ++s) {
    const Vec3 xn = normalize_to_domain(c, layout, points[s], clamp);
    Real* feat = batch.features.col(s).data();
    for (int l = 0; l < c.levels; ++l) {
      const LevelCorners lc = level_corners(c, layout, l, xn);
      const std::size_t base = (static_cast<std::size_t>(s) * c.levels + l) * 8;
      Real* out = feat + l * f;
      for (int corner = 0; corner < 8; ++corner) {
        const Real w = static_cast<Real>(lc.weights[corner]);
        batch.corner_rows[base + corner] = lc.rows[corner];
        batch.corner_weights[base + corner] = w;
        const Real* row = field.table_row(lc.rows[corner]);
        for (int q = 0; q < f; ++q) out[q] += w * row[q];
      }
    }
  }
}

template <typename Real>
void sh_batch(const ImpedanceFieldT<Real>& field, std::span<const Vec3> dirs, FieldBatch<Real>& batch) {
  const int degree = field.config().sh_degree;
  batch.sh.resize(field.config().sh_dim(), static_cast<Eigen::Index>(dirs.size()));
  for (std::size_t s = 0; s < dirs.size(); ++s) {
    sh_encode_unchecked<Real>(static_cast<Real>(dirs[s][0]), static_cast<Real>(dirs[s][1]),
                              static_cast<Real>(dirs[s][2]), degree, batch.sh.col(s).data());
  }
}

template <typename Real>
void forward_batch(const ImpedanceFieldT<Real>& field, FieldBatch<Real>& b) {
  const ParameterLayout& L = field.layout();
  const int n = static_cast<int>(b.features.cols());
  b.count = n;

  b.hidden_density.noalias() = weights(field, L.density_hidden) * b.features;
  b.hidden_density.colwise() += bias(field, L.density_hidden);
  b.hidden_density = b.hidden_density.cwiseMax(Real(0));

  b.density_out.noalias() = weights(field, L.density_out) * b.hidden_density;
  b.density_out.colwise() += bias(field, L.density_out);
  b.sigma = b.density_out.row(0).cwiseMax(Real(0));

  const int sh_dim = static_cast<int>(b.sh.rows());
  b.color_in.resize(GridConfig::kEmbedDim + sh_dim, n);
  b.color_in.topRows(GridConfig::kEmbedDim) = b.density_out.bottomRows(GridConfig::kEmbedDim);
  b.color_in.bottomRows(sh_dim) = b.sh;

  b.hidden_color.noalias() = weights(field, L.color_hidden) * b.color_in;
  b.hidden_color.colwise() += bias(field, L.color_hidden);
  b.hidden_color = b.hidden_color.cwiseMax(Real(0));

  typename FieldBatch<Real>::RowVec logit = weights(field, L.color_out) * b.hidden_color;
  logit.array() += bias(field, L.color_out)(0);
  b.intensity = (Real(1) / (Real(1) + (-logit.array()).exp())).matrix();
}

template <typename Real>
void evaluate_batch(const ImpedanceFieldT<Real>& field, std::span<const Vec3> points,
                    std::span<const Vec3> dirs, bool clamp, FieldBatch<Real>& batch) {
  encode_batch(field, points, clamp, batch);
  sh_batch(field, dirs, batch);
  forward_batch(field, batch);
}

template <typename Real>
std::vector<Real> encode_point(const Vec3& x, const ImpedanceFieldT<Real>& field) {
  FieldBatch<Real> batch;
  encode_batch(field, std::span<const Vec3>(&x, 1), false, batch);
  return std::vector<Real>(batch.features.data(), batch.features.data() + batch.features.size());
}

template <typename Real>
Decoded decode(std::span<const Real> features, std::span<const Real> sh, const ImpedanceFieldT<Real>& field) {
  const GridConfig& c = field.config();
  require(features.size() == static_cast<std::size_t>(c.encoding_dim()), ErrorKind::kShape,
          "feature vector has length " + std::to_string(features.size()) + ", expected " +
              std::to_string(c.encoding_dim()));
  require(sh.size() == static_cast<std::size_t>(c.sh_dim()), ErrorKind::kShape,
          "SH vector has length " + std::to_string(sh.size()) + ", expected " + std::to_string(c.sh_dim()));
  FieldBatch<Real> b;
  b.features = Eigen::Map<const typename FieldBatch<Real>::Mat>(features.data(), c.encoding_dim(), 1);
  b.sh = Eigen::Map<const typename FieldBatch<Real>::Mat>(sh.data(), c.sh_dim(), 1);
  forward_batch(field, b);
  Decoded d;
  d.intensity = static_cast<double>(b.intensity(0));
  d.sigma = static_cast<double>(b.sigma(0));
  for (int i = 0; i < GridConfig::kEmbedDim; ++i) d.embedding[i] = static_cast<double>(b.density_out(1 + i, 0));
  return d;
}

template <typename Real>
double render_pixel(const PixelSample& sample, const ImpedanceFieldT<Real>& field) {
  const auto features = encode_point(sample.point, field);
  std::vector<double> sh(field.config().sh_dim());
  sh_encode(sample.wave_dir[0], sample.wave_dir[1], sample.wave_dir[2], field.config().sh_degree, sh);
  std::vector<Real> sh_r(sh.begin(), sh.end());
  return decode<Real>(features, sh_r, field).intensity;
}

template <typename Real>
ImageGray render_image(const Pose& pose, const ProbeGeometry& geom, const ImpedanceFieldT<Real>& field,
                       const RenderOptions& options) {
  geom.validate();
  ImageGray img(geom.image_w, geom.image_h);
  const Mat3 rot = pose_rotation(pose);
  const std::size_t total = img.size();
  const std::size_t chunks = (total + kRenderChunk - 1) / kRenderChunk;
  const int workers = static_cast<int>(std::min<std::size_t>(std::max(options.threads, 1), chunks));
  std::vector<FieldBatch<Real>> batches(std::max(workers, 1));
  parallel_chunks(chunks, workers, [&](std::size_t worker, std::size_t chunk) {
    const std::size_t begin = chunk * kRenderChunk;
    const std::size_t end = std::min(total, begin + kRenderChunk);
    std::vector<Vec3> points(end - begin), dirs(end - begin);
    for (std::size_t p = begin; p < end; ++p) {
      const PixelRay ray = pixel_to_world(rot, pose.position, geom, static_cast<double>(p % geom.image_w),
                                          static_cast<double>(p / geom.image_w));
      points[p - begin] = ray.point;
      dirs[p - begin] = ray.wave_dir;
    }
    FieldBatch<Real>& batch = batches[worker];
    evaluate_batch<Real>(field, points, dirs, options.clamp_to_domain, batch);
    for (std::size_t p = begin; p < end; ++p) img.data[p] = static_cast<float>(batch.intensity(p - begin));
  });
  return img;
}

template <typename Real>
ImageGray render_image_raymarch(const Pose& pose, const ProbeGeometry& geom, const ImpedanceFieldT<Real>& field,
                                int samples_per_ray, const RenderOptions& options) {
  require(samples_per_ray >= 2, ErrorKind::kConfig, "ray marching needs at least 2 samples per ray");
  geom.validate();
  ImageGray img(geom.image_w, geom.image_h);
  const Mat3 rot = pose_rotation(pose);
  const std::size_t total = img.size();
  const std::size_t chunks = (total + kMarchPixelsPerChunk - 1) / kMarchPixelsPerChunk;
  const int k = samples_per_ray;
  const int workers = static_cast<int>(std::min<std::size_t>(std::max(options.threads, 1), chunks));
  std::vector<FieldBatch<Real>> batches(std::max(workers, 1));
  parallel_chunks(chunks, workers, [&](std::size_t worker, std::size_t chunk) {
    const std::size_t begin = chunk * kMarchPixelsPerChunk;
    const std::size_t end = std::min(total, begin + kMarchPixelsPerChunk);
    const std::size_t np = end - begin;
    std::vector<Vec3> points(np * k), dirs(np * k);
    std::vector<double> delta(np);
    for (std::size_t p = begin; p < end; ++p) {
      const double u = static_cast<double>(p % geom.image_w), v = static_cast<double>(p / geom.image_w);
      const PixelRay face = pixel_to_world(rot, pose.position, geom, u, 0.0);
      const PixelRay target = pixel_to_world(rot, pose.position, geom, u, v);
      const Vec3 seg = target.point - face.point;
      delta[p - begin] = seg.norm() / (k - 1);
      for (int i = 0; i < k; ++i) {
        points[(p - begin) * k + i] = face.point + (static_cast<double>(i) / (k - 1)) * seg;
        dirs[(p - begin) * k + i] = target.wave_dir;
      }
    }
    FieldBatch<Real>& batch = batches[worker];
    evaluate_batch<Real>(field, points, dirs, options.clamp_to_domain, batch);
    for (std::size_t p = 0; p < np; ++p) {
      double transmittance = 1.0, color = 0.0;
      for (int i = 0; i < k; ++i) {
        const double sigma = static_cast<double>(batch.sigma(p * k + i));
        const double alpha = 1.0 - std::exp(-sigma * delta[p]);
        color += transmittance * alpha * static_cast<double>(batch.intensity(p * k + i));
        transmittance *= 1.0 - alpha;
      }
      img.data[begin + p] = static_cast<float>(color);
    }
  });
  return img;
}

std::pair<Vec3, Vec3> domain_from_poses(std::span<const Pose> poses, const ProbeGeometry& geom) {
  geom.validate();
  require(!poses.empty(), ErrorKind::kContract, "cannot derive a domain from zero poses");
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const Pose& pose : poses) {
    const Mat3 rot = pose_rotation(pose);
    auto visit = [&](int u, int v) {
      const Vec3 p = pixel_to_world(rot, pose.position, geom, u, v).point;
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    };
    for (int u = 0; u < geom.image_w; ++u) {
      visit(u, 0);
      visit(u, geom.image_h - 1);
    }
    for (int v = 0; v < geom.image_h; ++v) {
      visit(0, v);
      visit(geom.image_w - 1, v);
    }
  }
  const Vec3 extent = hi - lo;
  const double fallback = std::max(extent.maxCoeff(), 1.0);
  Vec3 pad;
  for (int a = 0; a < 3; ++a) pad[a] = 0.05 * (extent[a] > 1e-9 ? extent[a] : fallback);
  return {lo - pad, hi + pad};
}

#define SONOFIELD_INSTANTIATE(Real)                                                                    \
  template class ImpedanceFieldT<Real>;                                                                \
  template void encode_batch<Real>(const ImpedanceFieldT<Real>&, std::span<const Vec3>, bool,         \
                                   FieldBatch<Real>&);                                                 \
  template void sh_batch<Real>(const ImpedanceFieldT<Real>&, std::span<const Vec3>, FieldBatch<Real>&); \
  template void forward_batch<Real>(const ImpedanceFieldT<Real>&, FieldBatch<Real>&);                  \
  template void evaluate_batch<Real>(const ImpedanceFieldT<Real>&, std::span<const Vec3>,             \
                                     std::span<const Vec3>, bool, FieldBatch<Real>&);                 \
  template std::vector<Real> encode_point<Real>(const Vec3&, const ImpedanceFieldT<Real>&);            \
  template Decoded decode<Real>(std::span<const Real>, std::span<const Real>, const ImpedanceFieldT<Real>&); \
  template double render_pixel<Real>(const PixelSample&, const ImpedanceFieldT<Real>&);                \
  template ImageGray render_image<Real>(const Pose&, const ProbeGeometry&, const ImpedanceFieldT<Real>&, \
                                        const RenderOptions&);                                         \
  template ImageGray render_image_raymarch<Real>(const Pose&, const ProbeGeometry&,                    \
                                                 const ImpedanceFieldT<Real>&, int, const RenderOptions&);

SONOFIELD_INSTANTIATE(float)
SONOFIELD_INSTANTIATE(double)

}  // namespace sonofield
