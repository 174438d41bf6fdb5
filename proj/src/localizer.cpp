#include "sonofield/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sonofield/error.hpp"
#include "sonofield/rng.hpp"

namespace sonofield {

namespace {

template <typename Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Real>
using RowMajorMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using ColVec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

int conv_out_size(int in) { return (in - 1) / 2 + 1; }

template <typename Real>
void im2col(const Mat<Real>& in, int channels, int size, int out_size, Mat<Real>& cols) {
  cols.setZero(channels * 9, out_size * out_size);
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int row = c * 9 + ky * 3 + kx;
        for (int oy = 0; oy < out_size; ++oy) {
          const int iy = 2 * oy - 1 + ky;
          if (iy < 0 || iy >= size) continue;
          for (int ox = 0; ox < out_size; ++ox) {
            const int ix = 2 * ox - 1 + kx;
            if (ix < 0 || ix >= size) continue;
            cols(row, oy * out_size + ox) = in(c, iy * size + ix);
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im(const Mat<Real>& cols, int channels, int size, int out_size, Mat<Real>& out) {
  out.setZero(channels, size * size);
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int row = c * 9 + ky * 3 + kx;
        for (int oy = 0; oy < out_size; ++oy) {
          const int iy = 2 * oy - 1 + ky;
          if (iy < 0 || iy >= size) continue;
          for (int ox = 0; ox < out_size; ++ox) {
            const int ix = 2 * ox - 1 + kx;
            if (ix < 0 || ix >= size) continue;
            out(c, iy * size + ix) += cols(row, oy * out_size + ox);
          }
        }
      }
    }
  }
}

void require_one_hot(std::span<const double> y, const char* what) {
  int ones = 0;
  for (double v : y) {
    if (v == 1.0) {
      ++ones;
    } else if (v != 0.0) {
      ones = -1;
      break;
    }
  }
  if (ones != 1) fail(ErrorKind::kContract, std::string(what) + " is not a one-hot vector");
}

int one_hot_index(std::span<const double> y) {
  return static_cast<int>(std::find(y.begin(), y.end(), 1.0) - y.begin());
}

// Softmax cross-entropy of logits p / tau against class y; writes dL/dp.
double softmax_ce(std::span<const double> p, int y, double tau, std::vector<double>* grad) {
  double peak = -INFINITY;
  for (double v : p) peak = std::max(peak, v / tau);
  double sum = 0.0;
  for (double v : p) sum += std::exp(v / tau - peak);
  const double log_z = peak + std::log(sum);
  if (grad) {
    grad->resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      (*grad)[i] = (std::exp(p[i] / tau - log_z) - (static_cast<int>(i) == y ? 1.0 : 0.0)) / tau;
    }
  }
  return log_z - p[y] / tau;
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// -ln(1 - exp(-a)) for a >= 0 and its derivative with respect to a.
double neg_log_one_minus_exp(double a, double* d) {
  const double e = std::exp(-a);
  if (d) *d = -e / -std::expm1(-a);
  return -std::log(-std::expm1(-a));
}

double quant_bit(double h, double rho, QuantLoss form, double* grad) {
  const bool positive = h >= 0.0;
  const double s2 = 2.0 * rho * rho;
  if (form == QuantLoss::kPosterior) {
    // g+/(g+ + g-) = logistic(2h / rho^2)
    const double z = 2.0 * h / (rho * rho);
    if (grad) *grad = (positive ? -logistic(-z) : logistic(z)) * 2.0 / (rho * rho);
    return positive ? softplus(-z) : softplus(z);
  }
  // BCE(g+(h), t) + BCE(g-(h), 1 - t): the matching estimator is pulled to 1
  // and the opposite one to 0.
  const double near = positive ? h - 1.0 : h + 1.0;
  const double far = positive ? h + 1.0 : h - 1.0;
  double d_far = 0.0;
  const double loss = near * near / s2 + neg_log_one_minus_exp(far * far / s2, &d_far);
  if (grad) *grad = 2.0 * near / s2 + d_far * 2.0 * far / s2;
  return loss;
}

}  // namespace

void EncoderConfig::validate() const {
  require(input_size >= 8, ErrorKind::kConfig, "encoder input size must be >= 8");
  require(code_bits >= 1, ErrorKind::kConfig, "code length q must be >= 1");
  for (int c : channels) require(c >= 1, ErrorKind::kConfig, "encoder channel counts must be >= 1");
}

template <typename Real>
EncoderT<Real>::EncoderT(const EncoderConfig& config) : config_(config) {
  config_.validate();
  std::size_t offset = 0;
  int size = config_.input_size;
  int in = 1;
  for (int l = 0; l < 3; ++l) {
    ConvLayout& c = conv_[l];
    c.in = in;
    c.out = config_.channels[l];
    c.in_size = size;
    c.out_size = conv_out_size(size);
    c.weight_offset = offset;
    offset += static_cast<std::size_t>(c.out) * c.in * 9;
    c.bias_offset = offset;
    offset += c.out;
    in = c.out;
    size = c.out_size;
  }
  fc_w_ = offset;
  offset += static_cast<std::size_t>(config_.code_bits) * in;
  fc_b_ = offset;
  offset += config_.code_bits;
  params_.assign(offset, Real(0));
}

template <typename Real>
EncoderT<Real> EncoderT<Real>::initialized(const EncoderConfig& config, std::uint64_t seed) {
  EncoderT e(config);
  Rng rng(seed);
  for (const auto& c : e.conv_) {
    const double bound = std::sqrt(6.0 / (c.in * 9));
    for (std::size_t i = 0; i < static_cast<std::size_t>(c.out) * c.in * 9; ++i) {
      e.params_[c.weight_offset + i] = static_cast<Real>(rng.uniform(-bound, bound));
    }
  }
  const int last = e.conv_[2].out;
  const double bound = std::sqrt(6.0 / last);
  for (std::size_t i = 0; i < static_cast<std::size_t>(config.code_bits) * last; ++i) {
    e.params_[e.fc_w_ + i] = static_cast<Real>(rng.uniform(-bound, bound));
  }
  return e;
}

ImageGray encoder_input(const ImageGray& img, const EncoderConfig& config) {
  if (img.width == config.input_size && img.height == config.input_size) return img;
  return resample_area(img, config.input_size, config.input_size);
}

template <typename Real>
const typename EncoderCache<Real>::Vec& encoder_forward(const EncoderT<Real>& enc, const ImageGray& input,
                                                        EncoderCache<Real>& cache) {
  const int s = enc.config().input_size;
  if (input.width != s || input.height != s) {
    fail(ErrorKind::kShape, "encoder expects a " + std::to_string(s) + "x" + std::to_string(s) + " input");
  }
  cache.input.resize(1, static_cast<Eigen::Index>(s) * s);
  for (int i = 0; i < s * s; ++i) cache.input(0, i) = static_cast<Real>(input.data[i]);

  const Real* p = enc.params().data();
  const Mat<Real>* in = &cache.input;
  for (int l = 0; l < 3; ++l) {
    const ConvLayout& c = enc.conv()[l];
    im2col(*in, c.in, c.in_size, c.out_size, cache.columns[l]);
    Eigen::Map<const RowMajorMat<Real>> w(p + c.weight_offset, c.out, c.in * 9);
    Eigen::Map<const ColVec<Real>> b(p + c.bias_offset, c.out);
    cache.act[l].noalias() = w * cache.columns[l];
    cache.act[l].colwise() += b;
    cache.act[l] = cache.act[l].cwiseMax(Real(0));
    in = &cache.act[l];
  }
  cache.pooled = cache.act[2].rowwise().mean();
  const int last = enc.conv()[2].out;
  Eigen::Map<const RowMajorMat<Real>> wf(p + enc.fc_weight_offset(), enc.config().code_bits, last);
  Eigen::Map<const ColVec<Real>> bf(p + enc.fc_bias_offset(), enc.config().code_bits);
  cache.h = wf * cache.pooled + bf;
  return cache.h;
}

template <typename Real>
void encoder_backward(const EncoderT<Real>& enc, const EncoderCache<Real>& cache,
                      const typename EncoderCache<Real>::Vec& d_h, std::span<Real> d_params) {
  require(d_params.size() == enc.params().size(), ErrorKind::kShape, "encoder gradient size mismatch");
  const Real* p = enc.params().data();
  Real* g = d_params.data();
  const int last = enc.conv()[2].out;
  const int q = enc.config().code_bits;
  Eigen::Map<const RowMajorMat<Real>> wf(p + enc.fc_weight_offset(), q, last);
  Eigen::Map<RowMajorMat<Real>>(g + enc.fc_weight_offset(), q, last).noalias() += d_h * cache.pooled.transpose();
  Eigen::Map<ColVec<Real>>(g + enc.fc_bias_offset(), q) += d_h;

  const ColVec<Real> d_pooled = wf.transpose() * d_h;
  const auto pixels = cache.act[2].cols();
  Mat<Real> dz = (d_pooled / static_cast<Real>(pixels)).replicate(1, pixels);
  dz = (cache.act[2].array() > Real(0)).select(dz, Real(0));
  Mat<Real> d_cols, d_act;
  for (int l = 2; l >= 0; --l) {
    const ConvLayout& c = enc.conv()[l];
    Eigen::Map<RowMajorMat<Real>>(g + c.weight_offset, c.out, c.in * 9).noalias() +=
        dz * cache.columns[l].transpose();
    Eigen::Map<ColVec<Real>>(g + c.bias_offset, c.out) += dz.rowwise().sum();
    if (l == 0) break;
    Eigen::Map<const RowMajorMat<Real>> w(p + c.weight_offset, c.out, c.in * 9);
    d_cols.noalias() = w.transpose() * dz;
    col2im(d_cols, c.in, c.in_size, c.out_size, d_act);
    dz = (cache.act[l - 1].array() > Real(0)).select(d_act, Real(0));
  }
}

template <typename Real>
std::vector<double> encode(const ImageGray& img, const EncoderT<Real>& encoder) {
  EncoderCache<Real> cache;
  const auto& h = encoder_forward(encoder, encoder_input(img, encoder.config()), cache);
  std::vector<double> out(h.size());
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    out[i] = static_cast<double>(h[i]);
    if (!std::isfinite(out[i])) fail(ErrorKind::kNumeric, "encoder produced a non-finite code");
  }
  return out;
}

std::vector<std::int8_t> binarize(std::span<const double> h) {
  std::vector<std::int8_t> b(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) b[i] = h[i] >= 0.0 ? 1 : -1;
  return b;
}

int hamming(std::span<const std::int8_t> a, std::span<const std::int8_t> b) {
  require(a.size() == b.size(), ErrorKind::kShape, "hash codes differ in length");
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

ImageGray augment(const ImageGray& img, AugmentMode mode, std::uint64_t seed, const AugmentOptions& options) {
  const bool strong = mode == AugmentMode::kStrong;
  Rng rng(mix64(seed));
  const int w = img.width, h = img.height;
  const int max_shift = static_cast<int>(std::floor((strong ? 0.08 : 0.02) * w));
  const int dx = static_cast<int>(rng.index(2 * max_shift + 1)) - max_shift;
  const int dy = static_cast<int>(rng.index(2 * max_shift + 1)) - max_shift;
  const double gain = strong ? rng.uniform(0.6, 1.4) : rng.uniform(0.9, 1.1);

  ImageGray out(w, h);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const int su = u - dx, sv = v - dy;
      double value = (su >= 0 && su < w && sv >= 0 && sv < h) ? img.at(su, sv) * gain : 0.0;
      if (strong) value += 0.05 * rng.normal();
      out.at(u, v) = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }

  auto zero = [&](const BlockRect& r) {
    for (int v = std::max(r.y, 0); v < std::min(r.y + r.h, h); ++v) {
      for (int u = std::max(r.x, 0); u < std::min(r.x + r.w, w); ++u) out.at(u, v) = 0.0f;
    }
  };
  const int blocks = (strong ? 1 + static_cast<int>(rng.index(3)) : 0) + options.extra_random_blocks;
  const double limit = 0.10 * w * h;
  for (int b = 0; b < blocks; ++b) {
    const double area = rng.uniform(0.02, 0.10) * w * h;
    const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    BlockRect r;
    r.w = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, w);
    r.h = std::clamp(static_cast<int>(area / r.w), 1, h);
    while (r.w * r.h > limit && r.h > 1) --r.h;
    r.x = static_cast<int>(rng.index(w - r.w + 1));
    r.y = static_cast<int>(rng.index(h - r.h + 1));
    zero(r);
  }
  for (const auto& r : options.forced_blocks) zero(r);
  return out;
}

double loss_dhl(std::span<const double> h_t, std::span<const double> h_s) {
  require(h_t.size() == h_s.size(), ErrorKind::kShape, "hash codes differ in length");
  double dot = 0.0, nt = 0.0, ns = 0.0;
  for (std::size_t i = 0; i < h_t.size(); ++i) {
    dot += h_t[i] * h_s[i];
    nt += h_t[i] * h_t[i];
    ns += h_s[i] * h_s[i];
  }
  if (nt == 0.0 || ns == 0.0) fail(ErrorKind::kContract, "cosine similarity of a zero hash code is undefined");
  return 1.0 - dot / std::sqrt(nt * ns);
}

std::vector<double> class_predictions(std::span<const double> h, const Eigen::MatrixXd& proxies) {
  require(static_cast<Eigen::Index>(h.size()) == proxies.cols(), ErrorKind::kShape,
          "code length does not match the proxy bank");
  const Eigen::VectorXd hv = Eigen::Map<const Eigen::VectorXd>(h.data(), h.size());
  const double nh = hv.norm();
  if (nh == 0.0) fail(ErrorKind::kContract, "cosine similarity of a zero hash code is undefined");
  std::vector<double> out(proxies.rows());
  for (Eigen::Index i = 0; i < proxies.rows(); ++i) {
    const double np = proxies.row(i).norm();
    if (np == 0.0) fail(ErrorKind::kContract, "proxy row " + std::to_string(i) + " is zero");
    out[i] = proxies.row(i).dot(hv) / (nh * np);
  }
  return out;
}

double loss_hpl(std::span<const double> y, std::span<const double> p_t, std::span<const double> p_s, double tau_t,
                double tau_s) {
  require(y.size() == p_t.size() && y.size() == p_s.size(), ErrorKind::kShape,
          "label and prediction lengths differ");
  require(tau_t > 0 && tau_s > 0, ErrorKind::kConfig, "temperatures must be positive");
  require_one_hot(y, "label");
  const int cls = one_hot_index(y);
  return softmax_ce(p_t, cls, tau_t, nullptr) + softmax_ce(p_s, cls, tau_s, nullptr);
}

double loss_ql(std::span<const double> h, double rho, QuantLoss form) {
  require(!h.empty(), ErrorKind::kShape, "empty hash code");
  double sum = 0.0;
  for (double v : h) sum += quant_bit(v, rho, form, nullptr);
  return sum / h.size();
}

std::vector<double> loss_ql_grad(std::span<const double> h, double rho, QuantLoss form) {
  std::vector<double> g(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    quant_bit(h[i], rho, form, &g[i]);
    g[i] /= h.size();
  }
  return g;
}

double similarity_score(std::span<const double> y1, std::span<const double> y2) {
  require(y1.size() == y2.size(), ErrorKind::kShape, "label lengths differ");
  require_one_hot(y1, "first label");
  require_one_hot(y2, "second label");
  const int i = one_hot_index(y1), j = one_hot_index(y2);
  if (i == j) return 1.0;
  return 1.0 / std::abs(i - j);
}

template <typename Real>
LocalLossTerms loss_local(std::span<const LocalBatchItem> batch, const EncoderT<Real>& encoder,
                          const Mat<Real>& proxies, const LocalizerConfig& cfg, std::span<Real> d_encoder,
                          Mat<Real>* d_proxies) {
  require(!batch.empty(), ErrorKind::kContract, "empty localization batch");
  const int q = encoder.config().code_bits;
  require(proxies.cols() == q, ErrorKind::kShape, "proxy bank width does not match the code length");
  const bool want_grad = !d_encoder.empty() || d_proxies;
  const int n_cls = static_cast<int>(proxies.rows());
  const Eigen::MatrixXd pd = proxies.template cast<double>();
  const Eigen::VectorXd pnorm = pd.rowwise().norm();
  for (int i = 0; i < n_cls; ++i) {
    if (pnorm[i] == 0.0) fail(ErrorKind::kContract, "proxy row " + std::to_string(i) + " is zero");
  }
  const double inv_b = 1.0 / batch.size();

  LocalLossTerms terms;
  EncoderCache<Real> ct, cs;
  Eigen::MatrixXd d_p = Eigen::MatrixXd::Zero(n_cls, q);
  for (const auto& item : batch) {
    require(item.label >= 0 && item.label < n_cls, ErrorKind::kContract, "label outside the proxy bank");
    const Eigen::VectorXd ht = encoder_forward(encoder, item.weak, ct).template cast<double>();
    const Eigen::VectorXd hs = encoder_forward(encoder, item.strong, cs).template cast<double>();
    const double nt = ht.norm(), ns = hs.norm();
    if (nt == 0.0 || ns == 0.0) fail(ErrorKind::kNumeric, "encoder produced a zero hash code");

    const Eigen::VectorXd pt = (pd * ht).cwiseQuotient(pnorm) / nt;
    const Eigen::VectorXd ps = (pd * hs).cwiseQuotient(pnorm) / ns;
    std::vector<double> gpt, gps;
    const double hpl = softmax_ce({pt.data(), static_cast<std::size_t>(n_cls)}, item.label, cfg.tau_t, &gpt) +
                       softmax_ce({ps.data(), static_cast<std::size_t>(n_cls)}, item.label, cfg.tau_s, &gps);
    const double cosine = ht.dot(hs) / (nt * ns);
    const std::span<const double> st(ht.data(), q), ss(hs.data(), q);
    const double ql_t = loss_ql(st, cfg.rho, cfg.quant);
    const double ql_s = loss_ql(ss, cfg.rho, cfg.quant);
    terms.hpl += hpl * inv_b;
    terms.dhl += (1.0 - cosine) * inv_b;
    terms.ql += (ql_t + ql_s) * inv_b;
    if (!want_grad) continue;

    const Eigen::VectorXd gt = Eigen::Map<const Eigen::VectorXd>(gpt.data(), n_cls);
    const Eigen::VectorXd gs = Eigen::Map<const Eigen::VectorXd>(gps.data(), n_cls);
    // d cos(h, p_i) / dh = p_i / (|h||p_i|) - cos_i h / |h|^2
    Eigen::VectorXd dht = pd.transpose() * gt.cwiseQuotient(pnorm) / nt - gt.dot(pt) * ht / (nt * nt);
    Eigen::VectorXd dhs = pd.transpose() * gs.cwiseQuotient(pnorm) / ns - gs.dot(ps) * hs / (ns * ns);
    if (d_proxies) {
      for (int i = 0; i < n_cls; ++i) {
        const double pn2 = pnorm[i] * pnorm[i];
        d_p.row(i) += inv_b * (gt[i] * (ht.transpose() / (pnorm[i] * nt) - pt[i] * pd.row(i) / pn2) +
                               gs[i] * (hs.transpose() / (pnorm[i] * ns) - ps[i] * pd.row(i) / pn2));
      }
    }
    dht -= cfg.lambda1 * (hs / (nt * ns) - cosine * ht / (nt * nt));
    dhs -= cfg.lambda1 * (ht / (nt * ns) - cosine * hs / (ns * ns));
    const auto qt = loss_ql_grad(st, cfg.rho, cfg.quant);
    const auto qs = loss_ql_grad(ss, cfg.rho, cfg.quant);
    dht += cfg.lambda2 * Eigen::Map<const Eigen::VectorXd>(qt.data(), q);
    dhs += cfg.lambda2 * Eigen::Map<const Eigen::VectorXd>(qs.data(), q);
    if (!d_encoder.empty()) {
      encoder_backward(encoder, ct, ColVec<Real>((dht * inv_b).template cast<Real>()), d_encoder);
      encoder_backward(encoder, cs, ColVec<Real>((dhs * inv_b).template cast<Real>()), d_encoder);
    }
  }
  if (d_proxies) *d_proxies += d_p.template cast<Real>();
  terms.total = terms.hpl + cfg.lambda1 * terms.dhl + cfg.lambda2 * terms.ql;
  return terms;
}

void Gallery::validate() const {
  require(code_bits >= 1, ErrorKind::kValidation, "gallery code length must be >= 1");
  std::vector<char> seen(entries.size(), 0);
  for (const auto& e : entries) {
    require(static_cast<int>(e.code.size()) == code_bits, ErrorKind::kValidation,
            "gallery code length mismatch");
    require(e.class_index >= 0 && e.class_index < static_cast<int>(entries.size()) && !seen[e.class_index],
            ErrorKind::kValidation, "gallery classes must be 0..N-1, each once");
    seen[e.class_index] = 1;
  }
}

namespace {

struct DenseAdam {
  std::vector<double> m, v;
  std::uint64_t t = 0;

  template <typename Real>
  void step(std::span<Real> params, std::span<const Real> grads, double lr, const LocalizerConfig& c) {
    if (m.empty()) {
      m.assign(params.size(), 0.0);
      v.assign(params.size(), 0.0);
    }
    ++t;
    const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      params[i] = static_cast<Real>(params[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + c.epsilon));
    }
  }
};

void check_labels(std::span<const ImageGray> images, std::span<const int> labels, std::span<const Pose> poses) {
  require(!images.empty(), ErrorKind::kContract, "localizer needs at least one image");
  require(labels.size() == images.size() && poses.size() == images.size(), ErrorKind::kShape,
          "images, labels and poses must have the same length");
  const int n = static_cast<int>(images.size());
  std::vector<int> count(n, 0);
  for (int l : labels) {
    require(l >= 0 && l < n, ErrorKind::kContract, "class label " + std::to_string(l) + " outside 0..N-1");
    ++count[l];
  }
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  for (int c = 0; c < classes; ++c) {
    require(count[c] >= 1, ErrorKind::kContract, "class " + std::to_string(c) + " has no image");
  }
}

}  // namespace

Gallery build_gallery(std::span<const ImageGray> images, std::span<const int> labels, std::span<const Pose> poses,
                      const Encoder& encoder) {
  check_labels(images, labels, poses);
  Gallery g;
  g.code_bits = encoder.config().code_bits;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto h = encode(images[i], encoder);
    g.entries.push_back({binarize(h), poses[i], labels[i]});
  }
  return g;
}

TrainedLocalizer train_localizer(std::span<const ImageGray> images, std::span<const int> labels,
                                 std::span<const Pose> poses, const LocalizerConfig& cfg) {
  check_labels(images, labels, poses);
  require(cfg.iterations >= 1 && cfg.batch >= 1, ErrorKind::kConfig, "iterations and batch must be >= 1");
  const int q = cfg.encoder.code_bits;
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;

  TrainedLocalizer out{Encoder::initialized(cfg.encoder, mix64(cfg.seed ^ 0x1)), Eigen::MatrixXf(classes, q), {}, {}};
  Rng init(mix64(cfg.seed ^ 0x2));
  for (int i = 0; i < classes; ++i) {
    for (int j = 0; j < q; ++j) out.proxies(i, j) = static_cast<float>(init.normal());
    out.proxies.row(i).normalize();
  }

  Rng rng(cfg.seed);
  AlignedVector<float> d_enc(out.encoder.params().size());
  Eigen::MatrixXf d_prox(classes, q);
  DenseAdam adam_enc, adam_prox;
  std::vector<LocalBatchItem> batch(cfg.batch);
  for (int it = 0; it < cfg.iterations; ++it) {
    for (auto& item : batch) {
      const std::size_t idx = rng.index(images.size());
      const std::uint64_t s_weak = rng.next(), s_strong = rng.next();
      item.weak = encoder_input(augment(images[idx], AugmentMode::kWeak, s_weak), cfg.encoder);
      item.strong = encoder_input(augment(images[idx], AugmentMode::kStrong, s_strong), cfg.encoder);
      item.label = labels[idx];
    }
    std::fill(d_enc.begin(), d_enc.end(), 0.0f);
    d_prox.setZero();
    const LocalLossTerms terms = loss_local<float>(batch, out.encoder, out.proxies, cfg, d_enc, &d_prox);
    if (!std::isfinite(terms.total)) {
      fail(ErrorKind::kNumeric, "localizer loss became non-finite at iteration " + std::to_string(it));
    }
    out.losses.push_back(terms.total);
    adam_enc.step<float>(out.encoder.params(), d_enc, cfg.lr, cfg);
    adam_prox.step<float>({out.proxies.data(), static_cast<std::size_t>(out.proxies.size())},
                          {d_prox.data(), static_cast<std::size_t>(d_prox.size())}, cfg.lr_proxy, cfg);
    for (int i = 0; i < classes; ++i) out.proxies.row(i).normalize();
  }
  out.gallery = build_gallery(images, labels, poses, out.encoder);
  return out;
}

RetrievalResult retrieve_code(std::span<const std::int8_t> code, const Gallery& gallery) {
  if (gallery.entries.empty()) fail(ErrorKind::kContract, "retrieval against an empty gallery");
  const GalleryEntry* best = nullptr;
  int best_d = 0;
  for (const auto& e : gallery.entries) {
    const int d = hamming(code, e.code);
    if (!best || d < best_d || (d == best_d && e.class_index < best->class_index)) {
      best = &e;
      best_d = d;
    }
  }
  return {best->pose, best->class_index, best_d};
}

RetrievalResult retrieve(const ImageGray& query, const Encoder& encoder, const Gallery& gallery) {
  if (gallery.entries.empty()) fail(ErrorKind::kContract, "retrieval against an empty gallery");
  require(gallery.code_bits == encoder.config().code_bits, ErrorKind::kShape,
          "gallery and encoder code lengths differ");
  const auto h = encode(query, encoder);
  return retrieve_code(binarize(h), gallery);
}

RetrievalReport evaluate_retrieval(std::span<const ImageGray> queries, std::span<const Pose> truth,
                                   const Encoder& encoder, const Gallery& gallery) {
  require(!queries.empty(), ErrorKind::kContract, "evaluation needs at least one query");
  require(queries.size() == truth.size(), ErrorKind::kShape, "one ground-truth pose per query required");
  RetrievalReport r;
  int hits = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    r.results.push_back(retrieve(queries[i], encoder, gallery));
    const double err = angular_error_deg(truth[i], r.results.back().pose);
    r.errors_deg.push_back(err);
    hits += err < 10.0;
  }
  r.mean_error_deg = std::accumulate(r.errors_deg.begin(), r.errors_deg.end(), 0.0) / queries.size();
  r.success_rate = static_cast<double>(hits) / queries.size();
  return r;
}

#define SONOFIELD_INSTANTIATE(Real)                                                                         \
  template class EncoderT<Real>;                                                                            \
  template const EncoderCache<Real>::Vec& encoder_forward<Real>(const EncoderT<Real>&, const ImageGray&,   \
                                                                 EncoderCache<Real>&);                      \
  template void encoder_backward<Real>(const EncoderT<Real>&, const EncoderCache<Real>&,                    \
                                       const EncoderCache<Real>::Vec&, std::span<Real>);                    \
  template std::vector<double> encode<Real>(const ImageGray&, const EncoderT<Real>&);                      \
  template LocalLossTerms loss_local<Real>(std::span<const LocalBatchItem>, const EncoderT<Real>&,          \
                                           const Mat<Real>&, const LocalizerConfig&, std::span<Real>,       \
                                           Mat<Real>*);

SONOFIELD_INSTANTIATE(float)
SONOFIELD_INSTANTIATE(double)

#undef SONOFIELD_INSTANTIATE

}  // namespace sonofield
