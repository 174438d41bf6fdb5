#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "sonofield/grid_field.hpp"
#include "sonofield/rng.hpp"

namespace testing {

using namespace sonofield;

// Small grid with both dense and hashed levels, unit-scale table values so
// finite differences see real curvature.
inline GridConfig small_config() {
  GridConfig c;
  c.levels = 4;
  c.features = 2;
  c.table_size = 1u << 8;
  c.res_min = 3;
  c.res_max = 12;
  c.hidden_width = 16;
  c.sh_degree = 4;
  c.domain_min = Vec3(-10, -10, -2);
  c.domain_max = Vec3(10, 10, 30);
  return c;
}

template <typename Real>
ImpedanceFieldT<Real> unit_field(const GridConfig& c, std::uint64_t seed) {
  auto f = ImpedanceFieldT<Real>::initialized(c, seed);
  Rng rng(seed ^ 0xabcdef);
  auto p = f.params();
  for (std::size_t i = 0; i < f.layout().table_params; ++i) p[i] = static_cast<Real>(rng.uniform(-1, 1));
  return f;
}

inline Vec3 random_unit(Rng& rng) {
  Vec3 v(rng.normal(), rng.normal(), rng.normal());
  return v.normalized();
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("sonofield_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
