#include <doctest.h>

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>
#include <thread>

#include "sonofield/cli.hpp"
#include "sonofield/error.hpp"
#include "sonofield/formats.hpp"
#include "sonofield/pipeline.hpp"
#include "sonofield/service.hpp"
#include "support.hpp"

// After Eigen: resolv.h, pulled in here, defines a `_res` macro.
#include <httplib.h>

using namespace sonofield;
using nlohmann::json;

namespace {

constexpr const char* kTinyConfig = R"({
  "probe": {"image_w": 32, "image_h": 24},
  "scan": {"count": 8},
  "grid": {"levels": 4, "log2_table_size": 10, "res_min": 4, "res_max": 12, "hidden_width": 16},
  "train": {"iterations": 30, "pixels_per_step": 256, "validate_every": 10},
  "gallery": {"azimuth_count": 3, "tilts_deg": [0, 5]},
  "localizer": {"iterations": 20, "input_size": 16, "channels": [4, 8, 8], "code_bits": 16, "batch": 4},
  "refine": {"max_iterations": 10, "restarts": 1, "eval_pixels": 256, "pixels_per_step": 128},
  "phantom": {"dims": [32, 32, 32], "spacing_mm": [1.6, 1.6, 1.6]}
})";

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sonofield");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

void write_text(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

// Runs the tiny pipeline once per process; later cases reuse the artifacts.
const std::filesystem::path& artifacts() {
  static testing::TempDir dir("cli");
  static bool built = false;
  if (!built) {
    const std::string cfg = (dir.path() / "tiny.json").string();
    write_text(cfg, kTinyConfig);
    const std::string out = (dir.path() / "out").string();
    for (const auto& args : std::vector<std::vector<std::string>>{
             {"--config", cfg, "--out", out, "gen-phantom"},
             {"--config", cfg, "--out", out, "simulate-scan", "--phantom", out + "/phantom.aipz"},
             {"--config", cfg, "--out", out, "train", "--manifest", out + "/manifest.json"},
             {"--config", cfg, "--out", out, "train-hash", "--checkpoint", out + "/checkpoint.aiau"}}) {
      const CliRun r = cli(args);
      INFO(r.err);
      REQUIRE(r.code == 0);
    }
    built = true;
  }
  return dir.path();
}

ServiceState tiny_state(bool with_gallery) {
  const auto out = artifacts() / "out";
  ServiceState s;
  s.field = load_checkpoint(out / "checkpoint.aiau");
  const ScanDataset ds = load_dataset(out / "manifest.json", false);
  s.geometry = ds.geometry;
  s.manifest_json = manifest_to_json(ds);
  if (with_gallery) {
    s.localizer = load_localizer(out / "localizer.aiae");
    s.gallery = load_gallery(out / "gallery.aiag");
  }
  s.refine.max_iterations = 10;
  s.refine.restarts = 1;
  s.refine.eval_pixels = 256;
  s.refine.pixels_per_step = 128;
  return s;
}

std::multimap<std::string, std::string> render_query(double rz) {
  return {{"px", "0"}, {"py", "0.5"}, {"pz", "0"}, {"rz", std::to_string(rz)}, {"ry", "0"}, {"rx", "0"}};
}

}  // namespace

TEST_CASE("pipeline config: presets, overrides, errors") {
  PipelineConfig desk = preset_config("desk");
  CHECK(desk.grid.levels == 12);
  CHECK(preset_config("paper").grid.table_size == (1u << 21));
  CHECK_THROWS_AS(preset_config("laptop"), Error);

  apply_config_json(desk, R"({"grid": {"levels": 6}, "threads": 3})");
  CHECK(desk.grid.levels == 6);
  CHECK(desk.threads == 3);
  PipelineConfig again = preset_config("desk");
  apply_config_json(again, config_to_json(desk));
  CHECK(config_to_json(again) == config_to_json(desk));

  auto kind = [&](const char* text) {
    PipelineConfig c = preset_config("desk");
    try {
      apply_config_json(c, text);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kIo;
  };
  CHECK(kind(R"({"grid": {"levelz": 6}})") == ErrorKind::kConfig);
  CHECK(kind(R"({"colour": 1})") == ErrorKind::kConfig);
  CHECK(kind(R"({"grid": {"levels": "six"}})") == ErrorKind::kConfig);
  CHECK(kind("{grid") == ErrorKind::kParse);

  const Pose p = parse_pose_list("1,2,3,0.1,0.2,0.3");
  CHECK(p.position == Vec3(1, 2, 3));
  CHECK(p.euler_zyx == Vec3(0.1, 0.2, 0.3));
  CHECK_THROWS_AS(parse_pose_list("1,2,3"), Error);
  const Pose back = pose_from_json(pose_to_json(p));
  CHECK(back.position == p.position);
  CHECK(back.euler_zyx == p.euler_zyx);
  CHECK(format_real(0.1) == "0.1");
  CHECK(format_real(std::numeric_limits<double>::infinity()) == "inf");
}

TEST_CASE("cli: end-to-end artifacts and exit codes") {
  const auto root = artifacts();
  const auto out = root / "out";
  for (const char* f : {"phantom.aipz", "manifest.json", "checkpoint.aiau", "metrics.json", "localizer.aiae",
                        "gallery.aiag", "config.json"})
    CHECK(std::filesystem::exists(out / f));
  const std::string cfg = (root / "tiny.json").string();

  const CliRun rd = cli({"--config", cfg, "--out", out.string(), "render", "--checkpoint",
                         (out / "checkpoint.aiau").string(), "--pose", "0,0,0,0,0,0"});
  REQUIRE(rd.code == 0);
  const ImageGray img = read_pgm(out / "render.pgm");
  CHECK(img.width == 32);
  CHECK(img.height == 24);

  const CliRun rt = cli({"retrieve", "--localizer", (out / "localizer.aiae").string(), "--gallery",
                         (out / "gallery.aiag").string(), "--query", (out / "render.pgm").string()});
  CHECK(rt.code == 0);
  CHECK(rt.out.find("class ") != std::string::npos);

  const CliRun rf = cli({"--config", cfg, "refine", "--checkpoint", (out / "checkpoint.aiau").string(), "--observed",
                         (out / "render.pgm").string(), "--pose", "0.1,0,0,0.02,0,0"});
  CHECK(rf.code == 0);
  CHECK(rf.out.find("final_loss") != std::string::npos);

  const CliRun bn = cli({"--config", cfg, "bench", "--checkpoint", (out / "checkpoint.aiau").string(), "--images", "2",
                         "--k", "8"});
  CHECK(bn.code == 0);
  CHECK(bn.out.find("ratio") != std::string::npos);

  // Usage errors: 2. Missing or unreadable inputs: 3. Contract/config: 4.
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"render"}).code == 2);
  CHECK(cli({"--preset", "huge", "gen-phantom"}).code == 2);
  const CliRun missing = cli({"retrieve", "--localizer", (root / "nope.aiae").string(), "--gallery",
                              (out / "gallery.aiag").string(), "--query", (out / "render.pgm").string()});
  CHECK(missing.code == 3);
  CHECK(missing.err.rfind("error: io: ", 0) == 0);
  write_text(root / "broken.json", "{\"grid\": ");
  CHECK(cli({"--config", (root / "broken.json").string(), "--out", (root / "x").string(), "gen-phantom"}).code == 3);
  write_text(root / "unknown.json", R"({"grid": {"levelz": 2}})");
  const CliRun unk = cli({"--config", (root / "unknown.json").string(), "--out", (root / "x").string(), "gen-phantom"});
  CHECK(unk.code == 4);
  CHECK(unk.err.find("levelz") != std::string::npos);
  CHECK(cli({"--config", cfg, "render", "--checkpoint", (out / "checkpoint.aiau").string(), "--pose", "1,2"}).code != 0);
}

TEST_CASE("cli: same seed gives byte-identical artifacts") {
  testing::TempDir dir("seed");
  const std::string cfg = (dir.path() / "tiny.json").string();
  write_text(cfg, kTinyConfig);
  std::vector<std::vector<std::uint8_t>> runs;
  for (const char* sub : {"a", "b"}) {
    const std::string out = (dir.path() / sub).string();
    REQUIRE(cli({"--seed", "11", "--config", cfg, "--out", out, "simulate-scan"}).code == 0);
    REQUIRE(cli({"--seed", "11", "--config", cfg, "--out", out, "train", "--manifest", out + "/manifest.json"}).code == 0);
    runs.push_back(read_file(std::filesystem::path(out) / "checkpoint.aiau"));
    runs.push_back(read_file(std::filesystem::path(out) / "frame_003.pgm"));
  }
  CHECK(runs[0] == runs[2]);
  CHECK(runs[1] == runs[3]);
}

TEST_CASE("base64") {
  for (std::string s : {"", "f", "fo", "foo", "foob", "fooba", "foobar"}) CHECK(base64_decode(base64_encode(s)) == s);
  CHECK(base64_encode("foobar") == "Zm9vYmFy");
  CHECK(base64_encode("fo") == "Zm8=");
  std::string bytes;
  for (int i = 0; i < 256; ++i) bytes += static_cast<char>(i);
  CHECK(base64_decode(base64_encode(bytes)) == bytes);
  for (const char* bad : {"Zm9", "Zm9v!mFy", "Z=9v", "Zm=v"}) CHECK_THROWS_AS(base64_decode(bad), Error);
}

TEST_CASE("service handlers") {
  const Service svc(tiny_state(true));
  CHECK(json::parse(svc.health().body)["status"] == "ok");

  const HttpReply r1 = svc.render(render_query(0.3));
  REQUIRE(r1.status == 200);
  CHECK(r1.content_type == "application/octet-stream");
  const ImageGray img = decode_pgm(std::vector<unsigned char>(r1.body.begin(), r1.body.end()));
  CHECK(img.width == 32);
  Pose pose;
  pose.position = Vec3(0, 0.5, 0);
  pose.euler_zyx = Vec3(0.3, 0, 0);
  const auto expect = render_pgm(svc.state().field, pose, svc.state().geometry, 1);
  CHECK(r1.body == std::string(expect.begin(), expect.end()));

  auto sized = render_query(0.3);
  sized.insert({"w", "16"});
  sized.insert({"h", "8"});
  const std::string small = svc.render(sized).body;
  const ImageGray small_img = decode_pgm(std::vector<unsigned char>(small.begin(), small.end()));
  CHECK(small_img.width == 16);
  CHECK(small_img.height == 8);
  auto missing = render_query(0);
  missing.erase("rx");
  const HttpReply bad = svc.render(missing);
  CHECK(bad.status == 400);
  CHECK(json::parse(bad.body)["error"] == "parse");
  auto nan = render_query(0);
  nan.find("px")->second = "nan";
  CHECK(svc.render(nan).status == 400);

  const HttpReply rt = svc.retrieve(r1.body);
  REQUIRE(rt.status == 200);
  const json rj = json::parse(rt.body);
  CHECK(rj.contains("class"));
  CHECK(rj["pose"].contains("euler_zyx_rad"));
  CHECK(svc.retrieve("P5 garbage").status == 400);

  json req = {{"pose", json::parse(pose_to_json(pose))}, {"image", base64_encode(r1.body)}, {"seed", 3}};
  const HttpReply rf = svc.refine(req.dump());
  REQUIRE(rf.status == 200);
  const json fj = json::parse(rf.body);
  CHECK(fj["final_loss"].get<double>() <= fj["initial_loss"].get<double>());
  CHECK(svc.refine(req.dump()).body == rf.body);
  CHECK(svc.refine("{}").status == 400);
  CHECK(svc.refine(R"({"pose": 1, "image": "!!"})").status == 400);
  req["image"] = "not base64";
  CHECK(json::parse(svc.refine(req.dump()).body)["error"] == "parse");

  CHECK(manifest_from_json(svc.dataset().body).entries.size() == 8);
  CHECK(svc.metrics().status == 200);

  const Service bare(tiny_state(false));
  CHECK(bare.retrieve(r1.body).status == 404);
  ServiceState no_loc = tiny_state(true);
  no_loc.localizer.reset();
  CHECK_THROWS_AS(Service(std::move(no_loc)), Error);
}

TEST_CASE("http server round trip") {
  const Service svc(tiny_state(true));
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread loop([&] { server.run(); });
  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(60, 0);
  for (int i = 0; i < 100; ++i) {
    if (client.Get("/health")) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }

  const auto health = client.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

  const std::string path = "/render?px=0&py=0.5&pz=0&rz=0.3&ry=0&rx=0";
  const auto first = client.Get(path);
  REQUIRE(first);
  CHECK(first->status == 200);
  std::vector<std::string> bodies(4);
  std::vector<std::thread> workers;
  for (int i = 0; i < 4; ++i)
    workers.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", port);
      if (auto r = c.Get(path)) bodies[i] = r->body;
    });
  for (auto& w : workers) w.join();
  for (const auto& b : bodies) CHECK(b == first->body);

  const auto rt = client.Post("/retrieve", first->body, "application/octet-stream");
  REQUIRE(rt);
  CHECK(rt->status == 200);
  const auto ds = client.Get("/dataset");
  REQUIRE(ds);
  CHECK(ds->status == 200);
  const auto nf = client.Get("/nowhere");
  REQUIRE(nf);
  CHECK(nf->status == 404);
  CHECK(json::parse(nf->body)["error"] == "not-found");
  const auto bad = client.Get("/render?px=1");
  REQUIRE(bad);
  CHECK(bad->status == 400);

  server.stop();
  loop.join();
}
