#include "sonofield/formats.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string_view>

namespace sonofield {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::string_view magic) { bytes_.insert(bytes_.end(), magic.begin(), magic.end()); put<std::uint32_t>(kVersion); }

  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void raw(const std::uint8_t* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }

  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string_view magic, std::string_view what)
      : bytes_(bytes), what_(what) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), magic.data(), 4) != 0)
      fail(ErrorKind::kParse, std::string(what) + ": bad magic, expected " + std::string(magic));
    pos_ = 4;
    const auto version = get<std::uint32_t>();
    if (version != kVersion) fail(ErrorKind::kParse, std::string(what) + ": unsupported version " + std::to_string(version));
  }

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  const std::uint8_t* raw(std::size_t n) {
    need(n);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void finish() const {
    if (pos_ != bytes_.size()) fail(ErrorKind::kParse, std::string(what_) + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::kParse, std::string(what_) + ": truncated");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::string_view what_;
  std::size_t pos_ = 0;
};

void put_floats(Writer& w, std::span<const float> v) {
  w.raw(reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(float));
}

void get_floats(Reader& r, std::span<float> v, std::string_view what) {
  if (r.remaining() < v.size() * sizeof(float)) fail(ErrorKind::kParse, std::string(what) + ": truncated");
  std::memcpy(v.data(), r.raw(v.size() * sizeof(float)), v.size() * sizeof(float));
}

std::uint32_t checked_u32(int v, const char* name) {
  if (v < 0) fail(ErrorKind::kContract, std::string(name) + " is negative");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "write failed: " + path.string());
}

std::vector<std::uint8_t> encode_checkpoint(const ImpedanceField& field) {
  const auto& c = field.config();
  Writer w("AIAU");
  w.put(checked_u32(c.levels, "levels"));
  w.put(checked_u32(c.features, "features"));
  w.put<std::uint32_t>(c.table_size);
  w.put(checked_u32(c.res_min, "res_min"));
  w.put(checked_u32(c.res_max, "res_max"));
  for (int a = 0; a < 3; ++a) w.put<double>(c.domain_min[a]);
  for (int a = 0; a < 3; ++a) w.put<double>(c.domain_max[a]);
  w.put<std::uint64_t>(c.prime1);
  w.put<std::uint64_t>(c.prime2);
  w.put(checked_u32(c.sh_degree, "sh_degree"));
  w.put(checked_u32(c.hidden_width, "hidden_width"));
  put_floats(w, field.params());
  return w.take();
}

ImpedanceField decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "AIAU", "checkpoint");
  GridConfig c;
  c.levels = static_cast<int>(r.get<std::uint32_t>());
  c.features = static_cast<int>(r.get<std::uint32_t>());
  c.table_size = r.get<std::uint32_t>();
  c.res_min = static_cast<int>(r.get<std::uint32_t>());
  c.res_max = static_cast<int>(r.get<std::uint32_t>());
  for (int a = 0; a < 3; ++a) c.domain_min[a] = r.get<double>();
  for (int a = 0; a < 3; ++a) c.domain_max[a] = r.get<double>();
  c.prime1 = r.get<std::uint64_t>();
  c.prime2 = r.get<std::uint64_t>();
  c.sh_degree = static_cast<int>(r.get<std::uint32_t>());
  c.hidden_width = static_cast<int>(r.get<std::uint32_t>());
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kParse, std::string("checkpoint: ") + e.what());
  }
  ImpedanceField field(c);
  if (r.remaining() != field.params().size() * sizeof(float))
    fail(ErrorKind::kParse, "checkpoint: parameter block has " + std::to_string(r.remaining()) + " bytes, expected " +
                                std::to_string(field.params().size() * sizeof(float)));
  get_floats(r, field.params(), "checkpoint");
  r.finish();
  return field;
}

void save_checkpoint(const std::filesystem::path& path, const ImpedanceField& field) {
  write_file(path, encode_checkpoint(field));
}

ImpedanceField load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::vector<std::uint8_t> encode_phantom(const PhantomVolume& volume) {
  volume.validate();
  Writer w("AIPZ");
  for (int d : volume.dims) w.put(checked_u32(d, "dims"));
  for (int a = 0; a < 3; ++a) w.put<float>(static_cast<float>(volume.spacing[a]));
  for (int a = 0; a < 3; ++a) w.put<float>(static_cast<float>(volume.origin[a]));
  put_floats(w, volume.values);
  return w.take();
}

PhantomVolume decode_phantom(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "AIPZ", "phantom");
  PhantomVolume v;
  std::uint64_t count = 1;
  for (int& d : v.dims) {
    d = static_cast<int>(r.get<std::uint32_t>());
    if (d < 2 || d > 4096) fail(ErrorKind::kParse, "phantom: dimension out of range");
    count *= static_cast<std::uint64_t>(d);
  }
  for (int a = 0; a < 3; ++a) v.spacing[a] = r.get<float>();
  for (int a = 0; a < 3; ++a) v.origin[a] = r.get<float>();
  if (r.remaining() != count * sizeof(float)) fail(ErrorKind::kParse, "phantom: value block size mismatch");
  v.values.resize(count);
  get_floats(r, v.values, "phantom");
  r.finish();
  try {
    v.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kParse, std::string("phantom: ") + e.what());
  }
  return v;
}

void save_phantom(const std::filesystem::path& path, const PhantomVolume& volume) {
  write_file(path, encode_phantom(volume));
}

PhantomVolume load_phantom(const std::filesystem::path& path) { return decode_phantom(read_file(path)); }

std::vector<std::uint8_t> encode_gallery(const Gallery& gallery) {
  gallery.validate();
  Writer w("AIAG");
  w.put(checked_u32(gallery.code_bits, "code_bits"));
  w.put(static_cast<std::uint32_t>(gallery.entries.size()));
  const std::size_t nbytes = (gallery.code_bits + 7) / 8;
  std::vector<std::uint8_t> packed(nbytes);
  for (const auto& e : gallery.entries) {
    std::fill(packed.begin(), packed.end(), 0);
    for (int j = 0; j < gallery.code_bits; ++j)
      if (e.code[j] > 0) packed[j / 8] |= static_cast<std::uint8_t>(1u << (j % 8));
    w.raw(packed.data(), nbytes);
    for (int a = 0; a < 3; ++a) w.put<double>(e.pose.position[a]);
    for (int a = 0; a < 3; ++a) w.put<double>(e.pose.euler_zyx[a]);
    w.put(checked_u32(e.class_index, "class"));
  }
  return w.take();
}

Gallery decode_gallery(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "AIAG", "gallery");
  Gallery g;
  g.code_bits = static_cast<int>(r.get<std::uint32_t>());
  if (g.code_bits < 1 || g.code_bits > 1 << 16) fail(ErrorKind::kParse, "gallery: code length out of range");
  const auto count = r.get<std::uint32_t>();
  const std::size_t nbytes = (g.code_bits + 7) / 8;
  if (r.remaining() != count * (nbytes + 6 * sizeof(double) + sizeof(std::uint32_t)))
    fail(ErrorKind::kParse, "gallery: entry block size mismatch");
  g.entries.resize(count);
  for (auto& e : g.entries) {
    const auto* p = r.raw(nbytes);
    e.code.resize(g.code_bits);
    for (int j = 0; j < g.code_bits; ++j) e.code[j] = (p[j / 8] >> (j % 8)) & 1 ? 1 : -1;
    for (int a = 0; a < 3; ++a) e.pose.position[a] = r.get<double>();
    for (int a = 0; a < 3; ++a) e.pose.euler_zyx[a] = r.get<double>();
    e.class_index = static_cast<int>(r.get<std::uint32_t>());
  }
  r.finish();
  try {
    g.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kParse, std::string("gallery: ") + e.what());
  }
  return g;
}

void save_gallery(const std::filesystem::path& path, const Gallery& gallery) {
  write_file(path, encode_gallery(gallery));
}

Gallery load_gallery(const std::filesystem::path& path) { return decode_gallery(read_file(path)); }

std::vector<std::uint8_t> encode_localizer(const LocalizerModel& model) {
  const auto& c = model.encoder.config();
  if (model.proxies.cols() != c.code_bits) fail(ErrorKind::kContract, "proxy width differs from code length");
  Writer w("AIAE");
  w.put(checked_u32(c.input_size, "input_size"));
  for (int ch : c.channels) w.put(checked_u32(ch, "channels"));
  w.put(checked_u32(c.code_bits, "code_bits"));
  w.put(static_cast<std::uint32_t>(model.proxies.rows()));
  put_floats(w, model.encoder.params());
  for (Eigen::Index k = 0; k < model.proxies.rows(); ++k)
    for (Eigen::Index j = 0; j < model.proxies.cols(); ++j) w.put<float>(model.proxies(k, j));
  return w.take();
}

LocalizerModel decode_localizer(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "AIAE", "localizer");
  EncoderConfig c;
  c.input_size = static_cast<int>(r.get<std::uint32_t>());
  for (int& ch : c.channels) ch = static_cast<int>(r.get<std::uint32_t>());
  c.code_bits = static_cast<int>(r.get<std::uint32_t>());
  const auto classes = r.get<std::uint32_t>();
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kParse, std::string("localizer: ") + e.what());
  }
  LocalizerModel m{Encoder(c), Eigen::MatrixXf(classes, c.code_bits)};
  if (r.remaining() != (m.encoder.params().size() + std::size_t{classes} * c.code_bits) * sizeof(float))
    fail(ErrorKind::kParse, "localizer: parameter block size mismatch");
  get_floats(r, m.encoder.params(), "localizer");
  for (std::uint32_t k = 0; k < classes; ++k)
    for (int j = 0; j < c.code_bits; ++j) m.proxies(k, j) = r.get<float>();
  r.finish();
  return m;
}

void save_localizer(const std::filesystem::path& path, const LocalizerModel& model) {
  write_file(path, encode_localizer(model));
}

LocalizerModel load_localizer(const std::filesystem::path& path) { return decode_localizer(read_file(path)); }

}  // namespace sonofield
