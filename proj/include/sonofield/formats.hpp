#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sonofield/error.hpp"
#include "sonofield/grid_field.hpp"
#include "sonofield/localizer.hpp"
#include "sonofield/phantom.hpp"

namespace sonofield {

// All binary formats are little-endian with a 4-byte magic and a u32 version.

/// "AIAU": GridConfig (levels, features, table_size, res_min, res_max as u32;
/// domain min/max as 6 f64; primes as 2 u64; sh_degree, hidden_width as u32),
/// then every parameter as f32 in layout order.
std::vector<std::uint8_t> encode_checkpoint(const ImpedanceField& field);
ImpedanceField decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const ImpedanceField& field);
ImpedanceField load_checkpoint(const std::filesystem::path& path);

/// "AIPZ": u32 nx ny nz, f32 spacing x3, f32 origin x3, then values with z
/// fastest (index = (ix * ny + iy) * nz + iz).
std::vector<std::uint8_t> encode_phantom(const PhantomVolume& volume);
PhantomVolume decode_phantom(const std::vector<std::uint8_t>& bytes);
void save_phantom(const std::filesystem::path& path, const PhantomVolume& volume);
PhantomVolume load_phantom(const std::filesystem::path& path);

/// "AIAG": u32 q, u32 count, then per entry ceil(q/8) code bytes (bit j of the
/// code is bit j%8 of byte j/8, 1 meaning +1), pose as 6 f64 (position then
/// ZYX euler), u32 class.
std::vector<std::uint8_t> encode_gallery(const Gallery& gallery);
Gallery decode_gallery(const std::vector<std::uint8_t>& bytes);
void save_gallery(const std::filesystem::path& path, const Gallery& gallery);
Gallery load_gallery(const std::filesystem::path& path);

/// "AIAE": u32 input_size, 3 x u32 channels, u32 q, u32 class count, then
/// encoder parameters and proxies (class-major) as f32.
struct LocalizerModel {
  Encoder encoder{EncoderConfig{}};
  Eigen::MatrixXf proxies;
};
std::vector<std::uint8_t> encode_localizer(const LocalizerModel& model);
LocalizerModel decode_localizer(const std::vector<std::uint8_t>& bytes);
void save_localizer(const std::filesystem::path& path, const LocalizerModel& model);
LocalizerModel load_localizer(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace sonofield
