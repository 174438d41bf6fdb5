#include "sonofield/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sonofield/error.hpp"

namespace sonofield {

using nlohmann::json;

namespace {

double round9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::strtod(buf, nullptr);
}

const json& field(const json& obj, const char* name, const std::string& where) {
  if (!obj.is_object() || !obj.contains(name)) {
    fail(ErrorKind::kParse, "manifest: missing field \"" + std::string(name) + "\" in " + where);
  }
  return obj.at(name);
}

double number(const json& obj, const char* name, const std::string& where) {
  const json& v = field(obj, name, where);
  if (!v.is_number()) fail(ErrorKind::kParse, "manifest: field \"" + std::string(name) + "\" must be a number");
  return v.get<double>();
}

int integer(const json& obj, const char* name, const std::string& where) {
  const json& v = field(obj, name, where);
  if (!v.is_number_integer()) {
    fail(ErrorKind::kParse, "manifest: field \"" + std::string(name) + "\" must be an integer");
  }
  return v.get<int>();
}

Vec3 triple(const json& obj, const char* name, const std::string& where) {
  const json& v = field(obj, name, where);
  if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() || !v[2].is_number()) {
    fail(ErrorKind::kParse, "manifest: field \"" + std::string(name) + "\" must be an array of 3 numbers");
  }
  return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

json triple_json(const Vec3& v) { return json::array({round9(v[0]), round9(v[1]), round9(v[2])}); }

}  // namespace

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  fail(ErrorKind::kParse, "manifest: unknown split \"" + std::string(name) + "\"");
}

std::string geometry_kind_name(ProbeKind kind) { return kind == ProbeKind::kLinear ? "linear" : "convex"; }

std::vector<std::size_t> ScanDataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) out.push_back(i);
  }
  return out;
}

std::vector<Pose> ScanDataset::poses() const {
  std::vector<Pose> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.pose);
  return out;
}

void ScanDataset::validate() const {
  geometry.validate();
  std::set<int> classes;
  for (const auto& e : entries) {
    if (!classes.insert(e.class_index).second) {
      fail(ErrorKind::kValidation, "manifest: duplicate class index " + std::to_string(e.class_index));
    }
    if (!e.image.data.empty() && (e.image.width != geometry.image_w || e.image.height != geometry.image_h)) {
      fail(ErrorKind::kValidation, "image " + e.file + " does not match the probe geometry size");
    }
  }
}

std::string manifest_to_json(const ScanDataset& d) {
  json geom = {
      {"kind", geometry_kind_name(d.geometry.kind)},
      {"width_mm", round9(d.geometry.width_mm)},
      {"depth_mm", round9(d.geometry.depth_mm)},
      {"apex_offset_mm", round9(d.geometry.apex_offset_mm)},
      {"image_w", d.geometry.image_w},
      {"image_h", d.geometry.image_h},
  };
  json entries = json::array();
  for (const auto& e : d.entries) {
    entries.push_back({
        {"file", e.file},
        {"position_mm", triple_json(e.pose.position)},
        {"euler_zyx_rad", triple_json(e.pose.euler_zyx)},
        {"split", std::string(split_name(e.split))},
        {"class", e.class_index},
    });
  }
  json doc = {{"geometry", geom}, {"entries", entries}};
  return doc.dump(2) + "\n";
}

ScanDataset manifest_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, std::string("manifest is not valid JSON: ") + e.what());
  }
  ScanDataset d;
  const json& g = field(doc, "geometry", "manifest");
  const json& kind = field(g, "kind", "geometry");
  if (kind == "linear") {
    d.geometry.kind = ProbeKind::kLinear;
  } else if (kind == "convex") {
    d.geometry.kind = ProbeKind::kConvex;
  } else {
    fail(ErrorKind::kParse, "manifest: geometry kind must be \"linear\" or \"convex\"");
  }
  d.geometry.width_mm = number(g, "width_mm", "geometry");
  d.geometry.depth_mm = number(g, "depth_mm", "geometry");
  d.geometry.apex_offset_mm = number(g, "apex_offset_mm", "geometry");
  d.geometry.image_w = integer(g, "image_w", "geometry");
  d.geometry.image_h = integer(g, "image_h", "geometry");

  const json& entries = field(doc, "entries", "manifest");
  if (!entries.is_array()) fail(ErrorKind::kParse, "manifest: \"entries\" must be an array");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const json& j = entries[i];
    const std::string where = "entry " + std::to_string(i);
    DatasetEntry e;
    const json& file = field(j, "file", where);
    if (!file.is_string()) fail(ErrorKind::kParse, "manifest: field \"file\" must be a string");
    e.file = file.get<std::string>();
    e.pose.position = triple(j, "position_mm", where);
    e.pose.euler_zyx = triple(j, "euler_zyx_rad", where);
    const json& split = field(j, "split", where);
    if (!split.is_string()) fail(ErrorKind::kParse, "manifest: field \"split\" must be a string");
    e.split = parse_split(split.get<std::string>());
    e.class_index = integer(j, "class", where);
    d.entries.push_back(std::move(e));
  }
  d.validate();
  return d;
}

void save_manifest(const ScanDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out << manifest_to_json(dataset);
  if (!out) fail(ErrorKind::kIo, "write failed: " + path.string());
}

ScanDataset load_dataset(const std::filesystem::path& manifest, bool load_images) {
  std::ifstream in(manifest, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open manifest " + manifest.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ScanDataset d = manifest_from_json(text);
  d.manifest_path = manifest;
  if (load_images) {
    const auto dir = manifest.parent_path();
    for (auto& e : d.entries) e.image = read_pgm(dir / e.file);
    d.validate();
  }
  return d;
}

}  // namespace sonofield
