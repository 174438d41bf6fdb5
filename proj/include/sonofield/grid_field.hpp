#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sonofield/aligned.hpp"
#include "sonofield/geometry.hpp"
#include "sonofield/image.hpp"

namespace sonofield {

/// Multi-resolution hash grid plus decoder hyperparameters.
struct GridConfig {
  static constexpr int kEmbedDim = 15;

  int levels = 16;
  int features = 8;
  std::uint32_t table_size = 1u << 21;  // rows per level, power of two
  int res_min = 16;
  int res_max = 512;
  Vec3 domain_min = Vec3::Constant(-1.0);
  Vec3 domain_max = Vec3::Constant(1.0);
  std::uint64_t prime1 = 2654435761ULL;
  std::uint64_t prime2 = 805459861ULL;
  int sh_degree = 4;
  int hidden_width = 128;

  /// Per-level growth factor b = exp((ln N_L - ln N_1) / (L - 1)); 1 when L = 1.
  double growth() const;
  int encoding_dim() const { return levels * features; }
  int sh_dim() const { return sh_degree * sh_degree; }
  int color_input_dim() const { return kEmbedDim + sh_dim(); }
  void validate() const;
};

/// N_l = floor(N_1 * b^(l-1)) for 1-based level l.
int grid_resolution(const GridConfig& config, int level);

/// Spatial hash slot: (i XOR j*pi1 XOR k*pi2) mod N_h, wrapping 64-bit products.
std::uint64_t hash_index(std::uint64_t i, std::uint64_t j, std::uint64_t k, const GridConfig& config);

struct DenseLayerLayout {
  std::size_t weight_offset = 0;  // out x in, row-major
  std::size_t bias_offset = 0;
  int in = 0;
  int out = 0;
};

/// Flat parameter layout: hash tables (level 1..L, rows x features), then the
/// density MLP (hidden, output) and the colour MLP (hidden, output). This is
/// also the checkpoint order.
struct ParameterLayout {
  ParameterLayout() = default;
  explicit ParameterLayout(const GridConfig& config);

  std::vector<int> resolution;
  std::vector<std::uint64_t> rows;
  std::vector<std::uint64_t> row_offset;
  std::vector<bool> dense;
  std::uint64_t table_rows = 0;
  std::size_t table_params = 0;
  DenseLayerLayout density_hidden, density_out, color_hidden, color_out;
  std::size_t total = 0;
};

template <typename Real>
class ImpedanceFieldT {
 public:
  explicit ImpedanceFieldT(const GridConfig& config);

  /// Tables uniform in [-1e-4, 1e-4]; MLP weights Kaiming-uniform, biases zero.
  static ImpedanceFieldT initialized(const GridConfig& config, std::uint64_t seed);

  const GridConfig& config() const { return config_; }
  const ParameterLayout& layout() const { return layout_; }
  std::span<Real> params() { return params_; }
  std::span<const Real> params() const { return params_; }

  Real* table_row(std::uint64_t global_row) {
    return params_.data() + global_row * static_cast<std::uint64_t>(config_.features);
  }
  const Real* table_row(std::uint64_t global_row) const {
    return params_.data() + global_row * static_cast<std::uint64_t>(config_.features);
  }

  template <typename Other>
  ImpedanceFieldT<Other> cast() const {
    ImpedanceFieldT<Other> out(config_);
    auto dst = out.params();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<Other>(params_[i]);
    return out;
  }

  bool all_finite() const;

 private:
  GridConfig config_;
  ParameterLayout layout_;
  AlignedVector<Real> params_;
};

using ImpedanceField = ImpedanceFieldT<float>;
using ImpedanceField64 = ImpedanceFieldT<double>;

struct PixelSample {
  Vec3 point = Vec3::Zero();
  Vec3 wave_dir = Vec3::UnitZ();
  std::optional<double> target;
};

/// The 8 enclosing vertices of a point at one level and their trilinear
/// weights. Corner c uses offset (c & 1, (c >> 1) & 1, (c >> 2) & 1).
struct LevelCorners {
  std::array<std::uint64_t, 8> rows{};  // global table rows
  std::array<double, 8> weights{};
  Vec3 frac = Vec3::Zero();
  double cell_scale[3] = {0, 0, 0};  // d frac / d x, per axis
};

/// Normalized coordinate of x inside the domain box. Throws kDomain outside
/// unless clamp is set.
Vec3 normalize_to_domain(const GridConfig& config, const ParameterLayout&, const Vec3& x, bool clamp);

LevelCorners level_corners(const GridConfig& config, const ParameterLayout& layout, int level0,
                           const Vec3& normalized);

/// Concatenated per-level trilinear features, length L * f.
template <typename Real>
std::vector<Real> encode_point(const Vec3& x, const ImpedanceFieldT<Real>& field);

struct Decoded {
  double intensity = 0.0;
  double sigma = 0.0;
  std::array<double, GridConfig::kEmbedDim> embedding{};
};

template <typename Real>
Decoded decode(std::span<const Real> features, std::span<const Real> sh, const ImpedanceFieldT<Real>& field);

template <typename Real>
double render_pixel(const PixelSample& sample, const ImpedanceFieldT<Real>& field);

struct RenderOptions {
  bool clamp_to_domain = true;
  int threads = 1;
};

/// Direct per-pixel decoding of every pixel of the probe plane. Output is
/// independent of the thread count.
template <typename Real>
ImageGray render_image(const Pose& pose, const ProbeGeometry& geom, const ImpedanceFieldT<Real>& field,
                       const RenderOptions& options = {});

/// Dense-sampling baseline: K points per beam from the probe face to the
/// pixel, alpha-composited with transmittance weights.
template <typename Real>
ImageGray render_image_raymarch(const Pose& pose, const ProbeGeometry& geom,
                                const ImpedanceFieldT<Real>& field, int samples_per_ray,
                                const RenderOptions& options = {});

/// Domain box enclosing all pixel world points of the given poses, padded
/// by 5% of the extent on each side.
std::pair<Vec3, Vec3> domain_from_poses(std::span<const Pose> poses, const ProbeGeometry& geom);

}  // namespace sonofield
