#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>

#include "sonofield/dataset.hpp"
#include "sonofield/error.hpp"
#include "sonofield/formats.hpp"
#include "sonofield/phantom.hpp"
#include "support.hpp"

using namespace sonofield;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::kIo;
}

template <typename Decode>
void check_corruption(std::vector<std::uint8_t> bytes, Decode decode) {
  auto bad_magic = bytes;
  bad_magic[0] ^= 0xff;
  CHECK(kind_of([&] { decode(bad_magic); }) == ErrorKind::kParse);
  auto bad_version = bytes;
  bad_version[4] += 1;
  CHECK(kind_of([&] { decode(bad_version); }) == ErrorKind::kParse);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{8}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + cut);
    CHECK(kind_of([&] { decode(truncated); }) == ErrorKind::kParse);
  }
  bytes.push_back(0);
  CHECK(kind_of([&] { decode(bytes); }) == ErrorKind::kParse);
}

Gallery sample_gallery(int q) {
  Gallery g;
  g.code_bits = q;
  Rng rng(4);
  for (int c = 0; c < 5; ++c) {
    GalleryEntry e;
    for (int j = 0; j < q; ++j) e.code.push_back(rng.uniform() < 0.5 ? -1 : 1);
    e.pose.position = Vec3(rng.normal(), rng.normal(), rng.normal());
    e.pose.euler_zyx = Vec3(rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(-3, 3));
    e.class_index = 4 - c;
    g.entries.push_back(e);
  }
  return g;
}

ScanDataset sample_manifest() {
  ScanDataset ds;
  ds.geometry.image_w = 20;
  ds.geometry.image_h = 10;
  for (int i = 0; i < 3; ++i) {
    DatasetEntry e;
    e.file = "img_" + std::to_string(i) + ".pgm";
    e.pose.position = Vec3(0.1 * i, 1.0 / 3.0, -2);
    e.pose.euler_zyx = Vec3(0.3 * i, 0.05, 0);
    e.split = i == 1 ? Split::kVal : i == 2 ? Split::kTest : Split::kTrain;
    e.class_index = i;
    ds.entries.push_back(e);
  }
  return ds;
}

}  // namespace

TEST_CASE("checkpoint round trip and corruption") {
  GridConfig c = testing::small_config();
  c.prime1 = 3;
  const auto field = testing::unit_field<float>(c, 1);
  const auto bytes = encode_checkpoint(field);
  CHECK(std::memcmp(bytes.data(), "AIAU", 4) == 0);
  const ImpedanceField back = decode_checkpoint(bytes);
  CHECK(back.config().levels == c.levels);
  CHECK(back.config().table_size == c.table_size);
  CHECK(back.config().prime1 == 3);
  CHECK(back.config().domain_max == c.domain_max);
  CHECK(std::equal(back.params().begin(), back.params().end(), field.params().begin()));
  CHECK(encode_checkpoint(back) == bytes);
  check_corruption(bytes, [](const auto& b) { decode_checkpoint(b); });

  testing::TempDir dir("ckpt");
  save_checkpoint(dir.path() / "f.bin", field);
  CHECK(read_file(dir.path() / "f.bin") == bytes);
  CHECK(encode_checkpoint(load_checkpoint(dir.path() / "f.bin")) == bytes);
  CHECK(kind_of([&] { load_checkpoint(dir.path() / "missing.bin"); }) == ErrorKind::kIo);
}

TEST_CASE("phantom volume round trip and corruption") {
  PhantomSpec spec;
  spec.dims = {6, 5, 4};
  spec.spacing = Vec3(0.5, 1, 2);
  spec.origin = Vec3(-1, 2, 0.25);
  PhantomVolume vol = gen_phantom(spec);
  for (std::size_t i = 0; i < vol.values.size(); ++i) vol.values[i] = 1.0f + 0.01f * static_cast<float>(i);
  const auto bytes = encode_phantom(vol);
  CHECK(std::memcmp(bytes.data(), "AIPZ", 4) == 0);
  const PhantomVolume back = decode_phantom(bytes);
  CHECK(back.dims == vol.dims);
  CHECK(back.values == vol.values);
  CHECK((back.spacing - vol.spacing).norm() == 0);
  CHECK((back.origin - vol.origin).norm() == 0);
  // z is the fastest index: value at (ix, iy, iz) sits at (ix * ny + iy) * nz + iz.
  CHECK(back.at(1, 2, 3) == vol.values[(1 * 5 + 2) * 4 + 3]);
  check_corruption(bytes, [](const auto& b) { decode_phantom(b); });
}

TEST_CASE("gallery round trip, bit packing and validation") {
  for (int q : {5, 8, 13, 64}) {
    const Gallery g = sample_gallery(q);
    const auto bytes = encode_gallery(g);
    CHECK(std::memcmp(bytes.data(), "AIAG", 4) == 0);
    CHECK(bytes.size() == 4 + 4 + 8 + g.entries.size() * ((q + 7) / 8 + 48 + 4));
    const Gallery back = decode_gallery(bytes);
    REQUIRE(back.entries.size() == g.entries.size());
    CHECK(back.code_bits == q);
    for (std::size_t i = 0; i < g.entries.size(); ++i) {
      CHECK(back.entries[i].code == g.entries[i].code);
      CHECK(back.entries[i].class_index == g.entries[i].class_index);
      CHECK((back.entries[i].pose.position - g.entries[i].pose.position).norm() == 0);
      CHECK((back.entries[i].pose.euler_zyx - g.entries[i].pose.euler_zyx).norm() == 0);
    }
    check_corruption(bytes, [](const auto& b) { decode_gallery(b); });
  }

  Gallery one;
  one.code_bits = 10;
  GalleryEntry e;
  e.code = {1, -1, -1, -1, -1, -1, -1, -1, -1, 1};
  one.entries.push_back(e);
  const auto bytes = encode_gallery(one);
  CHECK(bytes[16] == 0x01);
  CHECK(bytes[17] == 0x02);

  Gallery dup = sample_gallery(8);
  dup.entries[2].class_index = dup.entries[0].class_index;
  CHECK(kind_of([&] { encode_gallery(dup); }) == ErrorKind::kValidation);
  Gallery wrong = sample_gallery(8);
  wrong.entries[1].code.pop_back();
  CHECK(kind_of([&] { wrong.validate(); }) == ErrorKind::kValidation);
}

TEST_CASE("localizer model round trip") {
  LocalizerModel m;
  EncoderConfig cfg;
  cfg.input_size = 16;
  cfg.channels = {2, 3, 4};
  cfg.code_bits = 6;
  m.encoder = Encoder::initialized(cfg, 3);
  m.proxies = Eigen::MatrixXf::Random(4, 6);
  const auto bytes = encode_localizer(m);
  CHECK(std::memcmp(bytes.data(), "AIAE", 4) == 0);
  const auto back = decode_localizer(bytes);
  CHECK(back.encoder.config().channels == cfg.channels);
  CHECK(back.encoder.config().code_bits == 6);
  CHECK(back.proxies == m.proxies);
  CHECK(std::equal(back.encoder.params().begin(), back.encoder.params().end(), m.encoder.params().begin()));
  CHECK(encode_localizer(back) == bytes);
  check_corruption(bytes, [](const auto& b) { decode_localizer(b); });
}

TEST_CASE("manifest canonical text and errors") {
  const ScanDataset ds = sample_manifest();
  const std::string text = manifest_to_json(ds);
  CHECK(text.back() == '\n');
  const ScanDataset back = manifest_from_json(text);
  CHECK(manifest_to_json(back) == text);
  REQUIRE(back.entries.size() == 3);
  CHECK(back.entries[1].split == Split::kVal);
  CHECK(back.entries[2].file == "img_2.pgm");
  CHECK(back.geometry.image_w == 20);
  CHECK(std::abs(back.entries[0].pose.position[1] - 1.0 / 3.0) < 1e-9);
  CHECK(back.indices(Split::kTest) == std::vector<std::size_t>{2});

  auto j = nlohmann::json::parse(text);
  REQUIRE(j.contains("entries"));
  j["entries"][1].erase("split");
  try {
    manifest_from_json(j.dump());
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kParse);
    CHECK(std::string(e.what()).find("split") != std::string::npos);
  }

  auto dup = nlohmann::json::parse(text);
  dup["entries"][2]["class"] = dup["entries"][0]["class"];
  CHECK(kind_of([&] { manifest_from_json(dup.dump()); }) == ErrorKind::kValidation);

  auto badsplit = nlohmann::json::parse(text);
  badsplit["entries"][0]["split"] = "holdout";
  CHECK(kind_of([&] { manifest_from_json(badsplit.dump()); }) == ErrorKind::kParse);
  CHECK(kind_of([&] { manifest_from_json("{not json"); }) == ErrorKind::kParse);
  CHECK(parse_split("val") == Split::kVal);
  CHECK(split_name(Split::kTest) == "test");
}

TEST_CASE("load_dataset reads images and checks their size") {
  testing::TempDir dir("ds");
  ScanDataset ds = sample_manifest();
  for (auto& e : ds.entries) write_pgm(dir.path() / e.file, ImageGray(20, 10, 0.5f));
  save_manifest(ds, dir.path() / "manifest.json");
  const ScanDataset loaded = load_dataset(dir.path() / "manifest.json");
  REQUIRE(loaded.entries.size() == 3);
  CHECK(loaded.entries[0].image.width == 20);
  CHECK(loaded.entries[2].image.data[5] == doctest::Approx(128.0 / 255.0));
  CHECK(load_dataset(dir.path() / "manifest.json", false).entries[0].image.data.empty());

  write_pgm(dir.path() / "img_1.pgm", ImageGray(8, 8));
  CHECK(kind_of([&] { load_dataset(dir.path() / "manifest.json"); }) == ErrorKind::kValidation);
  std::filesystem::remove(dir.path() / "img_2.pgm");
  CHECK(kind_of([&] { load_dataset(dir.path() / "manifest.json"); }) == ErrorKind::kIo);
}
