#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sonofield/geometry.hpp"
#include "sonofield/image.hpp"

namespace sonofield {

enum class Split { kTrain, kVal, kTest };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct DatasetEntry {
  std::string file;  // relative to the manifest directory
  Pose pose;
  Split split = Split::kTrain;
  int class_index = 0;
  ImageGray image;  // empty until loaded
};

/// Posed images sharing one probe geometry.
struct ScanDataset {
  std::filesystem::path manifest_path;
  ProbeGeometry geometry;
  std::vector<DatasetEntry> entries;

  std::vector<std::size_t> indices(Split split) const;
  std::vector<Pose> poses() const;

  /// Unique class indices; loaded images match the geometry's pixel size.
  void validate() const;
};

/// Canonical manifest text: sorted keys, two-space indent, reals rounded to 9
/// significant digits, trailing newline.
std::string manifest_to_json(const ScanDataset& dataset);

/// Parses a manifest without touching image files. Missing fields raise
/// kParse naming the field; duplicate classes raise kValidation.
ScanDataset manifest_from_json(std::string_view text);

void save_manifest(const ScanDataset& dataset, const std::filesystem::path& path);

/// Reads the manifest and, when requested, every referenced PGM.
ScanDataset load_dataset(const std::filesystem::path& manifest, bool load_images = true);

std::string geometry_kind_name(ProbeKind kind);

}  // namespace sonofield
