#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace sonofield {

/// Row-major grayscale image with intensities in [0, 1].
struct ImageGray {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  ImageGray() = default;
  ImageGray(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  float& at(int u, int v) { return data[static_cast<std::size_t>(v) * width + u]; }
  float at(int u, int v) const { return data[static_cast<std::size_t>(v) * width + u]; }
  std::size_t size() const { return data.size(); }
};

/// Binary PGM ("P5", maxval 255). Intensity i is stored as round(i * 255).
std::vector<unsigned char> encode_pgm(const ImageGray& img);
ImageGray decode_pgm(const std::vector<unsigned char>& bytes);
void write_pgm(const std::filesystem::path& path, const ImageGray& img);
ImageGray read_pgm(const std::filesystem::path& path);

/// Quantizes every pixel to the nearest 8-bit level, i.e. what a PGM
/// round-trip would produce.
ImageGray quantize8(const ImageGray& img);

/// PSNR in dB with peak 1.0. Identical images return +infinity.
double psnr(const ImageGray& a, const ImageGray& b);

/// Mean SSIM over all fully-covered 11x11 Gaussian windows (sigma 1.5,
/// C1 = 0.01^2, C2 = 0.03^2, data range 1).
double ssim(const ImageGray& a, const ImageGray& b);

/// Area-weighted resampling ("mean pooling" with fractional bin edges).
ImageGray resample_area(const ImageGray& img, int width, int height);

}  // namespace sonofield
