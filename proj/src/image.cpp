#include "sonofield/image.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

#include "sonofield/error.hpp"

namespace sonofield {

std::vector<unsigned char> encode_pgm(const ImageGray& img) {
  const std::string header =
      "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(header.size() + img.size());
  for (float v : img.data) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    out.push_back(static_cast<unsigned char>(std::lround(c * 255.0)));
  }
  return out;
}

ImageGray decode_pgm(const std::vector<unsigned char>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    long value = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > 1 << 24) fail(ErrorKind::kParse, "PGM header value too large");
      ++pos;
      ++digits;
    }
    if (digits == 0) fail(ErrorKind::kParse, "malformed PGM header");
    return value;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    fail(ErrorKind::kParse, "not a binary PGM (missing P5 magic)");
  }
  pos = 2;
  const long w = read_int();
  const long h = read_int();
  const long maxval = read_int();
  if (w < 1 || h < 1) fail(ErrorKind::kParse, "PGM has empty dimensions");
  if (maxval != 255) fail(ErrorKind::kParse, "only 8-bit PGM (maxval 255) is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail(ErrorKind::kParse, "malformed PGM header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - pos < n) fail(ErrorKind::kParse, "PGM pixel data truncated");
  ImageGray img(static_cast<int>(w), static_cast<int>(h));
  for (std::size_t i = 0; i < n; ++i) img.data[i] = static_cast<float>(bytes[pos + i] / 255.0);
  return img;
}

void write_pgm(const std::filesystem::path& path, const ImageGray& img) {
  const auto bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "write failed: " + path.string());
}

ImageGray read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_pgm(bytes);
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

ImageGray quantize8(const ImageGray& img) {
  ImageGray out = img;
  for (float& v : out.data) {
    v = static_cast<float>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0) / 255.0);
  }
  return out;
}

namespace {

void check_same_shape(const ImageGray& a, const ImageGray& b) {
  if (a.width != b.width || a.height != b.height) {
    fail(ErrorKind::kShape, "image dimensions differ: " + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height));
  }
}

}  // namespace

double psnr(const ImageGray& a, const ImageGray& b) {
  check_same_shape(a, b);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const ImageGray& a, const ImageGray& b) {
  constexpr int kWin = 11;
  constexpr int kRadius = kWin / 2;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  check_same_shape(a, b);
  if (a.width < kWin || a.height < kWin) {
    fail(ErrorKind::kShape, "SSIM needs images of at least 11x11");
  }

  std::array<double, kWin> g{};
  double gsum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double x = i - kRadius;
    g[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    gsum += g[i];
  }
  for (double& w : g) w /= gsum;

  const int w = a.width, h = a.height;
  const int ow = w - kWin + 1, oh = h - kWin + 1;
  // Horizontal pass over the five moment images, valid columns only.
  const std::size_t hsize = static_cast<std::size_t>(ow) * h;
  std::vector<double> ha(hsize), hb(hsize), haa(hsize), hbb(hsize), hab(hsize);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int k = 0; k < kWin; ++k) {
        const double va = a.at(x + k, y), vb = b.at(x + k, y);
        sa += g[k] * va;
        sb += g[k] * vb;
        saa += g[k] * va * va;
        sbb += g[k] * vb * vb;
        sab += g[k] * va * vb;
      }
      const std::size_t i = static_cast<std::size_t>(y) * ow + x;
      ha[i] = sa, hb[i] = sb, haa[i] = saa, hbb[i] = sbb, hab[i] = sab;
    }
  }
  double total = 0.0;
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
      for (int k = 0; k < kWin; ++k) {
        const std::size_t i = static_cast<std::size_t>(y + k) * ow + x;
        ma += g[k] * ha[i];
        mb += g[k] * hb[i];
        maa += g[k] * haa[i];
        mbb += g[k] * hbb[i];
        mab += g[k] * hab[i];
      }
      const double va = maa - ma * ma, vb = mbb - mb * mb, cov = mab - ma * mb;
      total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
               ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
    }
  }
  return total / (static_cast<double>(ow) * oh);
}

namespace {

// Row k holds the overlap of output bin k with each source cell.
std::vector<std::vector<std::pair<int, double>>> area_weights(int src, int dst) {
  std::vector<std::vector<std::pair<int, double>>> rows(dst);
  const double scale = static_cast<double>(src) / dst;
  for (int k = 0; k < dst; ++k) {
    const double lo = k * scale, hi = (k + 1) * scale;
    for (int s = static_cast<int>(std::floor(lo)); s < std::min(src, static_cast<int>(std::ceil(hi))); ++s) {
      const double overlap = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
      if (overlap > 0) rows[k].emplace_back(s, overlap / scale);
    }
  }
  return rows;
}

}  // namespace

ImageGray resample_area(const ImageGray& img, int width, int height) {
  require(width > 0 && height > 0, ErrorKind::kShape, "resample target must be non-empty");
  if (img.width == width && img.height == height) return img;
  const auto wx = area_weights(img.width, width);
  const auto wy = area_weights(img.height, height);
  std::vector<double> tmp(static_cast<std::size_t>(width) * img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < width; ++x) {
      double s = 0.0;
      for (auto [src, w] : wx[x]) s += w * img.at(src, y);
      tmp[static_cast<std::size_t>(y) * width + x] = s;
    }
  }
  ImageGray out(width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double s = 0.0;
      for (auto [src, w] : wy[y]) s += w * tmp[static_cast<std::size_t>(src) * width + x];
      out.at(x, y) = static_cast<float>(s);
    }
  }
  return out;
}

}  // namespace sonofield
