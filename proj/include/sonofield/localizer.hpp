#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sonofield/aligned.hpp"
#include "sonofield/geometry.hpp"
#include "sonofield/image.hpp"

namespace sonofield {

struct EncoderConfig {
  int input_size = 64;
  std::array<int, 3> channels{16, 32, 64};
  int code_bits = 64;  // q

  void validate() const;
};

struct ConvLayout {
  std::size_t weight_offset = 0;  // out x (in * 9), row-major
  std::size_t bias_offset = 0;
  int in = 0;
  int out = 0;
  int in_size = 0;   // input is in_size x in_size
  int out_size = 0;  // stride 2, pad 1
};

/// Three 3x3 stride-2 ReLU convolutions, global average pool, affine head.
/// One weight set serves both the teacher and the student path.
template <typename Real>
class EncoderT {
 public:
  explicit EncoderT(const EncoderConfig& config);

  /// Kaiming-uniform weights, zero biases.
  static EncoderT initialized(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  const std::array<ConvLayout, 3>& conv() const { return conv_; }
  std::size_t fc_weight_offset() const { return fc_w_; }
  std::size_t fc_bias_offset() const { return fc_b_; }
  std::span<Real> params() { return params_; }
  std::span<const Real> params() const { return params_; }

  template <typename Other>
  EncoderT<Other> cast() const {
    EncoderT<Other> out(config_);
    auto dst = out.params();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<Other>(params_[i]);
    return out;
  }

 private:
  EncoderConfig config_;
  std::array<ConvLayout, 3> conv_;
  std::size_t fc_w_ = 0, fc_b_ = 0;
  AlignedVector<Real> params_;
};

using Encoder = EncoderT<float>;
using Encoder64 = EncoderT<double>;

/// Activations kept by the forward pass for backpropagation.
template <typename Real>
struct EncoderCache {
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  Mat input;                   // 1 x (S*S)
  std::array<Mat, 3> columns;  // im2col of each conv input
  std::array<Mat, 3> act;      // post-ReLU outputs, channels x pixels
  Vec pooled;
  Vec h;
};

/// Image area-resampled to the encoder input size.
ImageGray encoder_input(const ImageGray& img, const EncoderConfig& config);

/// Forward pass on an image already at the encoder input size.
template <typename Real>
const typename EncoderCache<Real>::Vec& encoder_forward(const EncoderT<Real>& encoder, const ImageGray& input,
                                                        EncoderCache<Real>& cache);

/// Accumulates dLoss/dparams (+=) given dLoss/dh for the cached pass.
template <typename Real>
void encoder_backward(const EncoderT<Real>& encoder, const EncoderCache<Real>& cache,
                      const typename EncoderCache<Real>::Vec& d_h, std::span<Real> d_params);

/// Real-valued code h for an arbitrary-size image (resampled first).
template <typename Real>
std::vector<double> encode(const ImageGray& img, const EncoderT<Real>& encoder);

/// b = sign(h) with sign(0) = +1.
std::vector<std::int8_t> binarize(std::span<const double> h);
int hamming(std::span<const std::int8_t> a, std::span<const std::int8_t> b);

enum class AugmentMode { kWeak, kStrong };

struct BlockRect {
  int x = 0, y = 0, w = 0, h = 0;
};

struct AugmentOptions {
  std::vector<BlockRect> forced_blocks;  // zeroed after all other transforms
  int extra_random_blocks = 0;           // on top of the strong-mode 1-3
};

/// weak: brightness x[0.9, 1.1], shift <= 2% of width. strong: brightness
/// x[0.6, 1.4], shift <= 8%, Gaussian noise sigma 0.05, 1-3 black blocks of
/// <= 10% area each. Shifted-in borders are black. Output clamped to [0, 1].
ImageGray augment(const ImageGray& img, AugmentMode mode, std::uint64_t seed, const AugmentOptions& options = {});

/// 1 - cos(h_t, h_s).
double loss_dhl(std::span<const double> h_t, std::span<const double> h_s);

/// Cosine similarity of h against every proxy row.
std::vector<double> class_predictions(std::span<const double> h, const Eigen::MatrixXd& proxies);

/// H(y, softmax(P_t / tau_t)) + H(y, softmax(P_s / tau_s)) for one-hot y.
double loss_hpl(std::span<const double> y, std::span<const double> p_t, std::span<const double> p_s, double tau_t,
                double tau_s);

enum class QuantLoss {
  kPosterior,    // BCE on g+/(g+ + g-) against t = [h >= 0]
  kGaussianBce,  // BCE(g+(h), t) + BCE(g-(h), 1 - t)
};

/// Mean per-bit quantization loss with Gaussian estimators of width rho.
double loss_ql(std::span<const double> h, double rho = 0.5, QuantLoss form = QuantLoss::kPosterior);
/// d loss_ql / dh.
std::vector<double> loss_ql_grad(std::span<const double> h, double rho = 0.5, QuantLoss form = QuantLoss::kPosterior);

/// 1 when both one-hot vectors point at the same class, else 1 / |i - j|.
double similarity_score(std::span<const double> y1, std::span<const double> y2);

struct LocalizerConfig {
  EncoderConfig encoder;
  int iterations = 400;
  int batch = 16;
  double tau_t = 0.2;
  double tau_s = 0.2;
  double lambda1 = 1.0;
  double lambda2 = 0.5;
  double rho = 0.5;
  QuantLoss quant = QuantLoss::kPosterior;
  double lr = 3e-3;
  double lr_proxy = 3e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
};

/// One training example after augmentation: teacher and student views at the
/// encoder input size plus the class label.
struct LocalBatchItem {
  ImageGray weak;
  ImageGray strong;
  int label = 0;
};

struct LocalLossTerms {
  double total = 0.0;
  double hpl = 0.0;
  double dhl = 0.0;
  double ql = 0.0;
};

/// Batch mean of L_hpl + lambda1 L_dhl + lambda2 (L_ql(h_t) + L_ql(h_s)).
/// Gradients are accumulated (+=) into d_encoder / d_proxies when non-null.
template <typename Real>
LocalLossTerms loss_local(std::span<const LocalBatchItem> batch, const EncoderT<Real>& encoder,
                          const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>& proxies,
                          const LocalizerConfig& config, std::span<Real> d_encoder,
                          Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>* d_proxies);

struct GalleryEntry {
  std::vector<std::int8_t> code;
  Pose pose;
  int class_index = 0;
};

struct Gallery {
  int code_bits = 0;
  std::vector<GalleryEntry> entries;

  void validate() const;
};

struct TrainedLocalizer {
  Encoder encoder;
  Eigen::MatrixXf proxies;  // N_cls x q, unit rows
  Gallery gallery;
  std::vector<double> losses;  // per iteration
};

/// Mini-batch Adam over encoder weights and proxies (rows renormalized after
/// every step), then every image is encoded without augmentation into the
/// gallery. labels[i] is the class of images[i]; classes must be 0..N-1.
TrainedLocalizer train_localizer(std::span<const ImageGray> images, std::span<const int> labels,
                                 std::span<const Pose> poses, const LocalizerConfig& config);

/// Encodes the gallery images with a trained encoder.
Gallery build_gallery(std::span<const ImageGray> images, std::span<const int> labels, std::span<const Pose> poses,
                      const Encoder& encoder);

struct RetrievalResult {
  Pose pose;
  int class_index = 0;
  int hamming = 0;
};

/// Nearest gallery code in Hamming distance; ties go to the lowest class.
RetrievalResult retrieve(const ImageGray& query, const Encoder& encoder, const Gallery& gallery);
RetrievalResult retrieve_code(std::span<const std::int8_t> code, const Gallery& gallery);

struct RetrievalReport {
  double mean_error_deg = 0.0;
  double success_rate = 0.0;  // fraction with error < 10 degrees
  std::vector<double> errors_deg;
  std::vector<RetrievalResult> results;
};

RetrievalReport evaluate_retrieval(std::span<const ImageGray> queries, std::span<const Pose> truth,
                                   const Encoder& encoder, const Gallery& gallery);

}  // namespace sonofield
