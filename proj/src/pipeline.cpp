#include "sonofield/pipeline.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <map>

#include <nlohmann/json.hpp>

#include "sonofield/error.hpp"
#include "sonofield/rng.hpp"

namespace sonofield {

using nlohmann::json;

namespace {

// Each config key is bound once to a reference so reading and dumping share
// one table.
struct Binding {
  std::function<void(const json&, const std::string&)> set;
  std::function<json()> get;
};
using Section = std::map<std::string, Binding>;

[[noreturn]] void bad_type(const std::string& key, const char* expected) {
  fail(ErrorKind::kConfig, "config key \"" + key + "\" must be " + expected);
}

Binding bind(int& v) {
  return {[&v](const json& j, const std::string& key) {
            if (!j.is_number_integer()) bad_type(key, "an integer");
            v = j.get<int>();
          },
          [&v] { return json(v); }};
}

Binding bind(double& v) {
  return {[&v](const json& j, const std::string& key) {
            if (!j.is_number()) bad_type(key, "a number");
            v = j.get<double>();
          },
          [&v] { return json(v); }};
}

Binding bind(bool& v) {
  return {[&v](const json& j, const std::string& key) {
            if (!j.is_boolean()) bad_type(key, "a boolean");
            v = j.get<bool>();
          },
          [&v] { return json(v); }};
}

Binding bind(Vec3& v) {
  return {[&v](const json& j, const std::string& key) {
            if (!j.is_array() || j.size() != 3) bad_type(key, "an array of 3 numbers");
            for (int a = 0; a < 3; ++a) {
              if (!j[a].is_number()) bad_type(key, "an array of 3 numbers");
              v[a] = j[a].get<double>();
            }
          },
          [&v] { return json::array({v[0], v[1], v[2]}); }};
}

Binding bind(std::array<int, 3>& v) {
  return {[&v](const json& j, const std::string& key) {
            if (!j.is_array() || j.size() != 3) bad_type(key, "an array of 3 integers");
            for (int a = 0; a < 3; ++a) {
              if (!j[a].is_number_integer()) bad_type(key, "an array of 3 integers");
              v[a] = j[a].get<int>();
            }
          },
          [&v] { return json::array({v[0], v[1], v[2]}); }};
}

Binding bind(std::vector<double>& v) {
  return {[&v](const json& j, const std::string& key) {
            if (!j.is_array()) bad_type(key, "an array of numbers");
            v.clear();
            for (const auto& x : j) {
              if (!x.is_number()) bad_type(key, "an array of numbers");
              v.push_back(x.get<double>());
            }
          },
          [&v] { return json(v); }};
}

Binding bind_log2(std::uint32_t& v) {
  return {[&v](const json& j, const std::string& key) {
            if (!j.is_number_integer() || j.get<int>() < 1 || j.get<int>() > 31) bad_type(key, "an integer in [1, 31]");
            v = 1u << j.get<int>();
          },
          [&v] { return json(static_cast<int>(std::lround(std::log2(static_cast<double>(v))))); }};
}

template <typename Enum>
Binding bind_enum(Enum& v, std::vector<std::pair<std::string, Enum>> names) {
  return {[&v, names](const json& j, const std::string& key) {
            if (j.is_string()) {
              for (const auto& [n, e] : names) {
                if (j.get<std::string>() == n) {
                  v = e;
                  return;
                }
              }
            }
            std::string options;
            for (const auto& [n, e] : names) options += (options.empty() ? "" : "|") + n;
            bad_type(key, options.c_str());
          },
          [&v, names] {
            for (const auto& [n, e] : names)
              if (e == v) return json(n);
            return json(nullptr);
          }};
}

std::map<std::string, Section> sections(PipelineConfig& c) {
  std::map<std::string, Section> s;
  s["phantom"] = {{"dims", bind(c.phantom.dims)},
                  {"spacing_mm", bind(c.phantom.spacing)},
                  {"origin_mm", bind(c.phantom.origin)},
                  {"background", bind(c.phantom.background)},
                  {"speckle", bind(c.phantom.speckle)}};
  s["bmode"] = {{"beta", bind(c.bmode.beta)},
                {"r_max", bind(c.bmode.r_max)},
                {"speckle", bind(c.bmode.speckle)},
                {"noise_cell_mm", bind(c.bmode.noise_cell_mm)},
                {"attenuation", bind(c.bmode.attenuation)}};
  s["probe"] = {{"kind", bind_enum(c.probe.kind, {{"linear", ProbeKind::kLinear}, {"convex", ProbeKind::kConvex}})},
                {"width_mm", bind(c.probe.width_mm)},
                {"depth_mm", bind(c.probe.depth_mm)},
                {"apex_offset_mm", bind(c.probe.apex_offset_mm)},
                {"image_w", bind(c.probe.image_w)},
                {"image_h", bind(c.probe.image_h)}};
  s["scan"] = {{"trajectory", bind_enum(c.trajectory, {{"circular", TrajectoryKind::kCircular},
                                                       {"fixed-rotation", TrajectoryKind::kFixedRotation},
                                                       {"rcm-grid", TrajectoryKind::kRcmGrid}})},
               {"count", bind(c.scan.count)},
               {"diameter_mm", bind(c.scan.diameter_mm)},
               {"step_deg", bind(c.scan.step_deg)},
               {"center_mm", bind(c.scan.center)},
               {"rcm_depth_mm", bind(c.scan.rcm_depth_mm)}};
  s["grid"] = {{"levels", bind(c.grid.levels)},
               {"features", bind(c.grid.features)},
               {"log2_table_size", bind_log2(c.grid.table_size)},
               {"res_min", bind(c.grid.res_min)},
               {"res_max", bind(c.grid.res_max)},
               {"sh_degree", bind(c.grid.sh_degree)},
               {"hidden_width", bind(c.grid.hidden_width)}};
  s["train"] = {{"iterations", bind(c.train.iterations)},
                {"pixels_per_step", bind(c.train.pixels_per_step)},
                {"validate_every", bind(c.train.validate_every)},
                {"lr_table", bind(c.train.adam.lr_table)},
                {"lr_mlp", bind(c.train.adam.lr_mlp)},
                {"beta1", bind(c.train.adam.beta1)},
                {"beta2", bind(c.train.adam.beta2)},
                {"epsilon", bind(c.train.adam.epsilon)},
                {"cosine_decay", bind(c.train.cosine_decay)}};
  s["gallery"] = {{"azimuth_count", bind(c.gallery.azimuth_count)},
                  {"azimuth_step_deg", bind(c.gallery.azimuth_step_deg)},
                  {"tilts_deg", bind(c.gallery.tilts_deg)},
                  {"center_mm", bind(c.gallery.center)},
                  {"rcm_depth_mm", bind(c.gallery.rcm_depth_mm)}};
  auto& l = c.localizer;
  s["localizer"] = {{"input_size", bind(l.encoder.input_size)},
                    {"channels", bind(l.encoder.channels)},
                    {"code_bits", bind(l.encoder.code_bits)},
                    {"iterations", bind(l.iterations)},
                    {"batch", bind(l.batch)},
                    {"tau_t", bind(l.tau_t)},
                    {"tau_s", bind(l.tau_s)},
                    {"lambda1", bind(l.lambda1)},
                    {"lambda2", bind(l.lambda2)},
                    {"rho", bind(l.rho)},
                    {"quant", bind_enum(l.quant, {{"posterior", QuantLoss::kPosterior},
                                                  {"gaussian-bce", QuantLoss::kGaussianBce}})},
                    {"lr", bind(l.lr)},
                    {"lr_proxy", bind(l.lr_proxy)},
                    {"beta1", bind(l.beta1)},
                    {"beta2", bind(l.beta2)},
                    {"epsilon", bind(l.epsilon)}};
  auto& r = c.refine;
  s["refine"] = {{"pixels_per_step", bind(r.pixels_per_step)},
                 {"eval_pixels", bind(r.eval_pixels)},
                 {"max_iterations", bind(r.max_iterations)},
                 {"lr_trans_mm", bind(r.lr_trans_mm)},
                 {"lr_rot_deg", bind(r.lr_rot_deg)},
                 {"restarts", bind(r.restarts)},
                 {"restart_rot_deg", bind(r.restart_rot_deg)},
                 {"restart_trans_mm", bind(r.restart_trans_mm)},
                 {"tolerance", bind(r.tolerance)},
                 {"patience", bind(r.patience)},
                 {"resample_every", bind(r.resample_every)}};
  return s;
}

void validate_config(const PipelineConfig& c) {
  c.phantom.validate();
  c.probe.validate();
  c.grid.validate();
  c.localizer.encoder.validate();
  c.refine.validate();
  require(c.scan.count >= 1, ErrorKind::kConfig, "scan.count must be >= 1");
  require(c.train.iterations >= 1 && c.train.pixels_per_step >= 1 && c.train.validate_every >= 0, ErrorKind::kConfig,
          "train.iterations and train.pixels_per_step must be >= 1, train.validate_every >= 0");
  require(c.localizer.iterations >= 1 && c.localizer.batch >= 1, ErrorKind::kConfig,
          "localizer.iterations and localizer.batch must be >= 1");
  require(c.gallery.azimuth_count >= 1 && !c.gallery.tilts_deg.empty(), ErrorKind::kConfig,
          "gallery needs at least one azimuth and one tilt");
  require(c.threads >= 1, ErrorKind::kConfig, "threads must be >= 1");
}

json pose_json(const Pose& p) {
  return {{"position_mm", json::array({p.position[0], p.position[1], p.position[2]})},
          {"euler_zyx_rad", json::array({p.euler_zyx[0], p.euler_zyx[1], p.euler_zyx[2]})}};
}

}  // namespace

PipelineConfig preset_config(std::string_view name) {
  PipelineConfig c;
  c.phantom = default_phantom_spec();
  c.gallery = TrajectoryParams{};
  if (name == "paper") {
    // Hash grid and trajectory as published; everything else shares the desk values.
    c.preset = "paper";
    c.scan.count = 72;
    c.train.iterations = 50000;
    c.train.validate_every = 1000;
    c.localizer.iterations = 400;
  } else if (name == "desk") {
    c.preset = "desk";
    c.scan.count = 36;
    c.grid.levels = 12;
    c.grid.features = 2;
    c.grid.table_size = 1u << 12;
    c.grid.res_min = 8;
    c.grid.res_max = 16;
    c.grid.hidden_width = 64;
    c.train.iterations = 5000;
    c.train.validate_every = 250;
    c.localizer.iterations = 3000;
  } else {
    fail(ErrorKind::kConfig, "unknown preset \"" + std::string(name) + "\" (desk|paper)");
  }
  return c;
}

void apply_config_json(PipelineConfig& config, std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("config: ") + e.what());
  }
  if (!root.is_object()) fail(ErrorKind::kParse, "config: top level must be an object");
  if (root.contains("preset")) {
    if (!root["preset"].is_string()) bad_type("preset", "a string");
    const int threads = config.threads;
    config = preset_config(root["preset"].get<std::string>());
    config.threads = threads;
  }
  PipelineConfig next = config;
  auto table = sections(next);
  for (const auto& [name, value] : root.items()) {
    if (name == "preset") continue;
    if (name == "threads") {
      bind(next.threads).set(value, name);
      continue;
    }
    if (name == "seed") {
      if (!value.is_number_unsigned()) bad_type(name, "a non-negative integer");
      set_seed(next, value.get<std::uint64_t>());
      continue;
    }
    auto sec = table.find(name);
    if (sec == table.end()) fail(ErrorKind::kConfig, "unknown config section \"" + name + "\"");
    if (!value.is_object()) bad_type(name, "an object");
    for (const auto& [key, v] : value.items()) {
      auto b = sec->second.find(key);
      if (b == sec->second.end()) fail(ErrorKind::kConfig, "unknown config key \"" + name + "." + key + "\"");
      b->second.set(v, name + "." + key);
    }
  }
  validate_config(next);
  config = next;
}

std::string config_to_json(const PipelineConfig& config) {
  PipelineConfig copy = config;
  json root;
  for (auto& [name, section] : sections(copy)) {
    json obj = json::object();
    for (auto& [key, b] : section) obj[key] = b.get();
    root[name] = obj;
  }
  root["preset"] = config.preset;
  root["seed"] = config.train.seed;
  root["threads"] = config.threads;
  return root.dump(2) + "\n";
}

void set_seed(PipelineConfig& config, std::uint64_t seed) {
  config.phantom.seed = seed;
  config.train.seed = seed;
  config.localizer.seed = seed;
  config.refine.seed = seed;
}

TrajectoryKind parse_trajectory(std::string_view name) {
  if (name == "circular") return TrajectoryKind::kCircular;
  if (name == "fixed-rotation") return TrajectoryKind::kFixedRotation;
  if (name == "rcm-grid") return TrajectoryKind::kRcmGrid;
  fail(ErrorKind::kConfig, "unknown trajectory \"" + std::string(name) + "\" (circular|fixed-rotation|rcm-grid)");
}

std::string_view trajectory_name(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::kCircular: return "circular";
    case TrajectoryKind::kFixedRotation: return "fixed-rotation";
    case TrajectoryKind::kRcmGrid: return "rcm-grid";
  }
  return "circular";
}

ImpedanceField init_field_for(const ScanDataset& dataset, const PipelineConfig& config) {
  GridConfig grid = config.grid;
  const auto poses = dataset.poses();
  const auto [lo, hi] = domain_from_poses(poses, dataset.geometry);
  grid.domain_min = lo;
  grid.domain_max = hi;
  return ImpedanceField::initialized(grid, mix64(config.train.seed ^ 0xf1e1dULL));
}

std::vector<unsigned char> render_pgm(const ImpedanceField& field, const Pose& pose, const ProbeGeometry& geom,
                                      int threads) {
  RenderOptions opts;
  opts.threads = threads;
  return encode_pgm(quantize8(render_image(pose, geom, field, opts)));
}

GalleryImages render_gallery(const ImpedanceField& field, const ProbeGeometry& geom, const PipelineConfig& config) {
  GalleryImages g;
  g.poses = gen_trajectory(TrajectoryKind::kRcmGrid, config.gallery);
  RenderOptions opts;
  opts.threads = config.threads;
  for (std::size_t i = 0; i < g.poses.size(); ++i) {
    g.images.push_back(quantize8(render_image(g.poses[i], geom, field, opts)));
    g.labels.push_back(static_cast<int>(i));
  }
  return g;
}

std::string pose_to_json(const Pose& pose) { return pose_json(pose).dump(); }

Pose pose_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("pose: ") + e.what());
  }
  Pose p;
  for (const auto& [key, dst] : {std::pair<const char*, Vec3*>{"position_mm", &p.position}, {"euler_zyx_rad", &p.euler_zyx}}) {
    if (!j.is_object() || !j.contains(key)) fail(ErrorKind::kParse, std::string("pose: missing field \"") + key + "\"");
    const json& v = j[key];
    if (!v.is_array() || v.size() != 3) fail(ErrorKind::kParse, std::string("pose: \"") + key + "\" needs 3 numbers");
    for (int a = 0; a < 3; ++a) {
      if (!v[a].is_number()) fail(ErrorKind::kParse, std::string("pose: \"") + key + "\" needs 3 numbers");
      (*dst)[a] = v[a].get<double>();
    }
  }
  return p;
}

Pose parse_pose_list(std::string_view text) {
  double v[6];
  std::size_t pos = 0;
  for (int i = 0; i < 6; ++i) {
    const std::size_t end = i < 5 ? text.find(',', pos) : text.size();
    if (end == std::string_view::npos) fail(ErrorKind::kParse, "pose needs 6 comma-separated numbers");
    const std::string item(text.substr(pos, end - pos));
    char* stop = nullptr;
    v[i] = std::strtod(item.c_str(), &stop);
    if (item.empty() || *stop != '\0' || !std::isfinite(v[i]))
      fail(ErrorKind::kParse, "pose component \"" + item + "\" is not a finite number");
    pos = end + 1;
  }
  Pose p;
  p.position = Vec3(v[0], v[1], v[2]);
  p.euler_zyx = Vec3(v[3], v[4], v[5]);
  return p;
}

std::string format_real(double value) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  if (std::isnan(value)) return "nan";
  if (value == 0.0) return "0";  // no "-0"
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, end);
}

}  // namespace sonofield
