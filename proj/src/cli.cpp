#include "sonofield/cli.hpp"

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sonofield/pipeline.hpp"
#include "sonofield/service.hpp"

namespace sonofield {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code_for(const Error& error) {
  switch (error.kind()) {
    case ErrorKind::kIo:
    case ErrorKind::kParse: return 3;
    default: return 4;
  }
}

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string preset = "desk";
  std::string out_dir = ".";
  std::optional<int> threads;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) fail(ErrorKind::kIo, "write failed: " + path.string());
}

fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + dir + ": " + ec.message());
  return dir;
}

PipelineConfig resolve(const Globals& g) {
  PipelineConfig c = preset_config(g.preset);
  if (!g.config_path.empty()) apply_config_json(c, read_text(g.config_path));
  if (g.seed) set_seed(c, *g.seed);
  if (g.threads) {
    c.threads = *g.threads;
  } else if (const char* env = std::getenv("AIA_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*env == '\0' || *end != '\0' || n < 1 || n > 1024) fail(ErrorKind::kConfig, "AIA_THREADS must be a positive integer");
    c.threads = static_cast<int>(n);
  }
  require(c.threads >= 1, ErrorKind::kConfig, "--threads must be >= 1");
  return c;
}

std::string pose_list(const Pose& p) {
  std::string s;
  for (int a = 0; a < 3; ++a) s += format_real(p.position[a]) + ",";
  for (int a = 0; a < 3; ++a) s += format_real(p.euler_zyx[a]) + (a < 2 ? "," : "");
  return s;
}

json real_json(double v) { return std::isfinite(v) ? json(v) : json(format_real(v)); }

std::vector<std::size_t> split_indices(const ScanDataset& d, const std::string& split) {
  if (split == "all") {
    std::vector<std::size_t> all(d.entries.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  return d.indices(parse_split(split));
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

HttpServer* g_server = nullptr;
extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Acoustic-impedance field reconstruction, rendering and plane localization"};
  app.set_version_flag("--version", "sonofield 1.0.0");
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every stochastic stage");
  app.add_option("--config", g.config_path, "JSON file overriding preset keys")->check(CLI::ExistingFile);
  app.add_option("--preset", g.preset, "Base configuration")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--out", g.out_dir, "Output directory");
  app.add_option("--threads", g.threads, "Worker threads (also AIA_THREADS)")->check(CLI::PositiveNumber);

  std::function<void()> action;

  // gen-phantom
  auto* gen = app.add_subcommand("gen-phantom", "Voxelize the procedural phantom to <out>/phantom.aipz");
  gen->callback([&] {
    action = [&] {
      const auto c = resolve(g);
      const auto vol = gen_phantom(c.phantom);
      const fs::path path = ensure_dir(g.out_dir) / "phantom.aipz";
      save_phantom(path, vol);
      out << "phantom " << vol.dims[0] << "x" << vol.dims[1] << "x" << vol.dims[2] << " spacing_mm "
          << format_real(vol.spacing[0]) << " -> " << path.string() << "\n";
    };
  });

  // simulate-scan
  std::string phantom_path, trajectory;
  std::optional<int> count;
  auto* sim = app.add_subcommand("simulate-scan", "Simulate a B-mode sweep to <out>/manifest.json + PGMs");
  sim->add_option("--phantom", phantom_path, "Phantom volume (.aipz); generated from the config when omitted");
  sim->add_option("--trajectory", trajectory, "circular | fixed-rotation | rcm-grid");
  sim->add_option("--count", count, "Number of frames")->check(CLI::PositiveNumber);
  sim->callback([&] {
    action = [&] {
      auto c = resolve(g);
      if (!trajectory.empty()) c.trajectory = parse_trajectory(trajectory);
      if (count) c.scan.count = *count;
      const auto vol = phantom_path.empty() ? gen_phantom(c.phantom) : load_phantom(phantom_path);
      const auto poses = gen_trajectory(c.trajectory, c.trajectory == TrajectoryKind::kRcmGrid ? c.gallery : c.scan);
      const int n = static_cast<int>(poses.size());
      const auto [nv, nt] = default_split_counts(n);
      const auto ds = export_dataset(vol, poses, c.probe, assign_splits(n, nv, nt), ensure_dir(g.out_dir),
                                     c.train.seed, c.bmode);
      out << "frames " << n << " train " << ds.indices(Split::kTrain).size() << " val "
          << ds.indices(Split::kVal).size() << " test " << ds.indices(Split::kTest).size() << " -> "
          << ds.manifest_path.string() << "\n";
    };
  });

  // train
  std::string manifest;
  std::optional<int> iterations;
  auto* tr = app.add_subcommand("train", "Fit the impedance field to a scan; writes checkpoint.aiau and metrics");
  tr->add_option("--manifest", manifest, "Dataset manifest")->required();
  tr->add_option("--iterations", iterations, "Override train.iterations")->check(CLI::PositiveNumber);
  tr->callback([&] {
    action = [&] {
      auto c = resolve(g);
      if (iterations) c.train.iterations = *iterations;
      c.train.threads = c.threads;
      const auto ds = load_dataset(manifest);
      auto field = init_field_for(ds, c);
      const fs::path dir = ensure_dir(g.out_dir);
      std::string log = "step psnr ssim loss\n";
      out << log;
      json rows = json::array();
      const auto result = train(ds, field, c.train, [&](const MetricRow& m) {
        const std::string line = std::to_string(m.step) + " " + format_real(m.psnr) + " " + format_real(m.ssim) + " " +
                                 format_real(m.loss) + "\n";
        out << line << std::flush;
        log += line;
        rows.push_back({{"step", m.step}, {"psnr", real_json(m.psnr)}, {"ssim", m.ssim}, {"loss", m.loss}});
      });
      save_checkpoint(dir / "checkpoint.aiau", field);
      write_text(dir / "metrics.log", log);
      json metrics = {{"validation", rows},
                      {"iterations", c.train.iterations},
                      {"final_step_loss", result.step_losses.empty() ? 0.0 : result.step_losses.back()}};
      write_text(dir / "metrics.json", metrics.dump(2) + "\n");
      write_text(dir / "config.json", config_to_json(c));
      out << "checkpoint -> " << (dir / "checkpoint.aiau").string() << "\n";
    };
  });

  // render
  std::string checkpoint, pose_text, output, split = "test";
  std::optional<int> width, height;
  auto* rd = app.add_subcommand("render", "Render the field at a pose (or at every pose of a manifest split)");
  rd->add_option("--checkpoint", checkpoint, "Field checkpoint (.aiau)")->required();
  rd->add_option("--pose", pose_text, "px,py,pz,rz,ry,rx in mm and radians");
  rd->add_option("--manifest", manifest, "Geometry source; renders its split when --pose is absent");
  rd->add_option("--split", split, "train | val | test | all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  rd->add_option("--width", width, "Image width override")->check(CLI::PositiveNumber);
  rd->add_option("--height", height, "Image height override")->check(CLI::PositiveNumber);
  rd->add_option("--output", output, "Output PGM for a single pose (default <out>/render.pgm)");
  rd->callback([&] {
    action = [&] {
      const auto c = resolve(g);
      const auto field = load_checkpoint(checkpoint);
      std::optional<ScanDataset> ds;
      if (!manifest.empty()) ds = load_dataset(manifest, false);
      ProbeGeometry geom = ds ? ds->geometry : c.probe;
      if (width) geom.image_w = *width;
      if (height) geom.image_h = *height;
      geom.validate();
      if (!pose_text.empty()) {
        const Pose pose = parse_pose_list(pose_text);
        const fs::path path = output.empty() ? ensure_dir(g.out_dir) / "render.pgm" : fs::path(output);
        const auto bytes = render_pgm(field, pose, geom, c.threads);
        write_file(path, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
        out << "render -> " << path.string() << "\n";
        return;
      }
      require(ds.has_value(), ErrorKind::kContract, "render needs --pose or --manifest");
      const fs::path dir = ensure_dir(g.out_dir);
      std::size_t n = 0;
      for (std::size_t i : split_indices(*ds, split)) {
        const auto bytes = render_pgm(field, ds->entries[i].pose, geom, c.threads);
        const fs::path path = dir / ("render_" + fs::path(ds->entries[i].file).filename().string());
        write_file(path, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
        ++n;
      }
      out << "rendered " << n << " -> " << dir.string() << "\n";
    };
  });

  // eval
  std::string reference;
  auto* ev = app.add_subcommand("eval", "PSNR/SSIM of a split against a checkpoint's renders or another dataset");
  ev->add_option("--manifest", manifest, "Dataset whose images are the ground truth")->required();
  ev->add_option("--checkpoint", checkpoint, "Field whose renders are scored");
  ev->add_option("--reference", reference, "Second dataset matched by class index");
  ev->add_option("--split", split, "train | val | test | all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  ev->callback([&] {
    action = [&] {
      const auto c = resolve(g);
      require(checkpoint.empty() != reference.empty(), ErrorKind::kContract,
              "eval needs exactly one of --checkpoint or --reference");
      const auto ds = load_dataset(manifest);
      std::optional<ImpedanceField> field;
      std::map<int, const DatasetEntry*> ref_by_class;
      std::optional<ScanDataset> ref;
      if (!checkpoint.empty()) field = load_checkpoint(checkpoint);
      if (!reference.empty()) {
        ref = load_dataset(reference);
        for (const auto& e : ref->entries) ref_by_class[e.class_index] = &e;
      }
      const auto idx = split_indices(ds, split);
      require(!idx.empty(), ErrorKind::kContract, "split \"" + split + "\" is empty");
      double sum_psnr = 0, sum_ssim = 0;
      json rows = json::array();
      out << "class psnr ssim\n";
      for (std::size_t i : idx) {
        const auto& e = ds.entries[i];
        ImageGray pred;
        if (field) {
          RenderOptions opts;
          opts.threads = c.threads;
          pred = quantize8(render_image(e.pose, ds.geometry, *field, opts));
        } else {
          auto it = ref_by_class.find(e.class_index);
          if (it == ref_by_class.end())
            fail(ErrorKind::kValidation, "reference has no class " + std::to_string(e.class_index));
          pred = it->second->image;
        }
        const double p = psnr(e.image, pred), s = ssim(e.image, pred);
        sum_psnr += p;
        sum_ssim += s;
        out << e.class_index << " " << format_real(p) << " " << format_real(s) << "\n";
        rows.push_back({{"class", e.class_index}, {"psnr", real_json(p)}, {"ssim", s}});
      }
      const double mp = sum_psnr / static_cast<double>(idx.size()), ms = sum_ssim / static_cast<double>(idx.size());
      out << "mean psnr " << format_real(mp) << " ssim " << format_real(ms) << "\n";
      if (app.get_option("--out")->count() > 0) {
        json report = {{"split", split}, {"images", rows}, {"mean_psnr", real_json(mp)}, {"mean_ssim", ms}};
        write_text(ensure_dir(g.out_dir) / "eval.json", report.dump(2) + "\n");
      }
    };
  });

  // bench
  int bench_k = 64, bench_images = 20;
  auto* bn = app.add_subcommand("bench", "Direct per-pixel rendering vs the K-sample ray-march baseline");
  bn->add_option("--checkpoint", checkpoint, "Field checkpoint (.aiau)")->required();
  bn->add_option("--k", bench_k, "Samples per beam for the ray-march")->check(CLI::PositiveNumber);
  bn->add_option("--images", bench_images, "Number of poses")->check(CLI::PositiveNumber);
  bn->add_option("--manifest", manifest, "Poses and geometry (default: the configured scan trajectory)");
  bn->callback([&] {
    action = [&] {
      const auto c = resolve(g);
      const auto field = load_checkpoint(checkpoint);
      std::vector<Pose> poses;
      ProbeGeometry geom = c.probe;
      if (!manifest.empty()) {
        const auto ds = load_dataset(manifest, false);
        poses = ds.poses();
        geom = ds.geometry;
      } else {
        poses = gen_trajectory(c.trajectory, c.scan);
      }
      RenderOptions opts;
      opts.threads = c.threads;
      render_image(poses[0], geom, field, opts);  // warm caches
      auto t0 = std::chrono::steady_clock::now();
      for (int i = 0; i < bench_images; ++i) render_image(poses[i % poses.size()], geom, field, opts);
      const double direct = elapsed_ms(t0) / bench_images;
      t0 = std::chrono::steady_clock::now();
      for (int i = 0; i < bench_images; ++i)
        render_image_raymarch(poses[i % poses.size()], geom, field, bench_k, opts);
      const double march = elapsed_ms(t0) / bench_images;
      out << "images " << bench_images << " size " << geom.image_w << "x" << geom.image_h << " k " << bench_k << "\n";
      out << "direct_ms " << format_real(direct) << "\n";
      out << "raymarch_ms " << format_real(march) << "\n";
      out << "ratio " << format_real(march / direct) << "\n";
    };
  });

  // train-hash
  auto* th = app.add_subcommand("train-hash", "Train the hashing localizer; writes localizer.aiae and gallery.aiag");
  th->add_option("--checkpoint", checkpoint, "Render the configured gallery poses from this field");
  th->add_option("--manifest", manifest, "Use this dataset's images and poses as the gallery instead");
  th->add_option("--iterations", iterations, "Override localizer.iterations")->check(CLI::PositiveNumber);
  th->callback([&] {
    action = [&] {
      auto c = resolve(g);
      if (iterations) c.localizer.iterations = *iterations;
      require(checkpoint.empty() != manifest.empty(), ErrorKind::kContract,
              "train-hash needs exactly one of --checkpoint or --manifest");
      GalleryImages gi;
      if (!checkpoint.empty()) {
        const auto field = load_checkpoint(checkpoint);
        gi = render_gallery(field, c.probe, c);
      } else {
        const auto ds = load_dataset(manifest);
        for (const auto& e : ds.entries) {
          gi.images.push_back(e.image);
          gi.labels.push_back(e.class_index);
          gi.poses.push_back(e.pose);
        }
      }
      const auto trained = train_localizer(gi.images, gi.labels, gi.poses, c.localizer);
      const fs::path dir = ensure_dir(g.out_dir);
      save_localizer(dir / "localizer.aiae", {trained.encoder, trained.proxies});
      save_gallery(dir / "gallery.aiag", trained.gallery);
      int exact = 0;
      for (std::size_t i = 0; i < gi.images.size(); ++i)
        exact += retrieve(gi.images[i], trained.encoder, trained.gallery).class_index == gi.labels[i];
      out << "gallery " << gi.images.size() << " iterations " << c.localizer.iterations << " loss "
          << format_real(trained.losses.front()) << " -> " << format_real(trained.losses.back()) << "\n";
      out << "self_retrieval " << exact << "/" << gi.images.size() << "\n";
      out << "localizer -> " << (dir / "localizer.aiae").string() << "\n";
      out << "gallery -> " << (dir / "gallery.aiag").string() << "\n";
    };
  });

  // retrieve
  std::string localizer_path, gallery_path, query_path, truth_text;
  auto* rt = app.add_subcommand("retrieve", "Nearest gallery pose for a query image");
  rt->add_option("--localizer", localizer_path, "Localizer model (.aiae)")->required();
  rt->add_option("--gallery", gallery_path, "Gallery (.aiag)")->required();
  rt->add_option("--query", query_path, "Query image (PGM)")->required();
  rt->add_option("--truth", truth_text, "Ground-truth pose px,py,pz,rz,ry,rx for the angular error");
  rt->callback([&] {
    action = [&] {
      resolve(g);
      const auto model = load_localizer(localizer_path);
      const auto gallery = load_gallery(gallery_path);
      const auto query = read_pgm(query_path);
      const auto r = retrieve(query, model.encoder, gallery);
      out << "class " << r.class_index << "\n";
      out << "hamming " << r.hamming << "\n";
      out << "pose " << pose_list(r.pose) << "\n";
      if (!truth_text.empty())
        out << "angular_error_deg " << format_real(angular_error_deg(r.pose, parse_pose_list(truth_text))) << "\n";
    };
  });

  // refine
  std::string observed_path;
  std::optional<int> restarts;
  auto* rf = app.add_subcommand("refine", "Refine a pose against an observed image by inverting the renderer");
  rf->add_option("--checkpoint", checkpoint, "Field checkpoint (.aiau)")->required();
  rf->add_option("--observed", observed_path, "Observed image (PGM)")->required();
  rf->add_option("--pose", pose_text, "Initial pose px,py,pz,rz,ry,rx")->required();
  rf->add_option("--manifest", manifest, "Geometry source (default: the configured probe)");
  rf->add_option("--iterations", iterations, "Override refine.max_iterations")->check(CLI::PositiveNumber);
  rf->add_option("--restarts", restarts, "Override refine.restarts")->check(CLI::PositiveNumber);
  rf->add_option("--truth", truth_text, "Ground-truth pose for angular errors");
  rf->callback([&] {
    action = [&] {
      auto c = resolve(g);
      if (iterations) c.refine.max_iterations = *iterations;
      if (restarts) c.refine.restarts = *restarts;
      const auto field = load_checkpoint(checkpoint);
      const auto observed = read_pgm(observed_path);
      ProbeGeometry geom = manifest.empty() ? c.probe : load_dataset(manifest, false).geometry;
      geom.image_w = observed.width;
      geom.image_h = observed.height;
      const Pose initial = parse_pose_list(pose_text);
      RefineResult r;
      try {
        r = refine(initial, observed, geom, field, c.refine);
      } catch (const RefinementFailed& e) {
        out << "best_pose " << pose_list(e.best_pose) << "\n";
        throw;
      }
      out << "initial_loss " << format_real(r.initial_loss) << "\n";
      out << "final_loss " << format_real(r.final_loss) << "\n";
      out << "iterations " << r.iterations << " accepted " << r.accepted_steps << " restart " << r.restart << "\n";
      out << "pose " << pose_list(r.pose) << "\n";
      if (!truth_text.empty()) {
        const Pose truth = parse_pose_list(truth_text);
        out << "angular_error_deg " << format_real(angular_error_deg(initial, truth)) << " -> "
            << format_real(angular_error_deg(r.pose, truth)) << "\n";
      }
      if (app.get_option("--out")->count() > 0) {
        json trace = json::array();
        for (double v : r.loss_trace) trace.push_back(v);
        json report = {{"pose", json::parse(pose_to_json(r.pose))}, {"initial_loss", r.initial_loss},
                       {"final_loss", r.final_loss}, {"iterations", r.iterations},
                       {"restart", r.restart}, {"loss_trace", trace}};
        write_text(ensure_dir(g.out_dir) / "refine.json", report.dump(2) + "\n");
      }
    };
  });

  // serve
  std::string metrics_path, host = "127.0.0.1";
  int port = 8080;
  auto* sv = app.add_subcommand("serve", "HTTP service over the loaded artifacts");
  sv->add_option("--checkpoint", checkpoint, "Field checkpoint (.aiau)")->required();
  sv->add_option("--gallery", gallery_path, "Gallery (.aiag); retrieval routes 404 without it");
  sv->add_option("--localizer", localizer_path, "Localizer model (.aiae), required with --gallery");
  sv->add_option("--manifest", manifest, "Dataset echoed by /dataset; also the render geometry");
  sv->add_option("--metrics", metrics_path, "JSON served by /metrics (default: metrics.json beside the checkpoint)");
  sv->add_option("--host", host, "Bind address");
  sv->add_option("--port", port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  sv->callback([&] {
    action = [&] {
      const auto c = resolve(g);
      ServiceState st;
      st.field = load_checkpoint(checkpoint);
      st.geometry = c.probe;
      st.refine = c.refine;
      st.threads = c.threads;
      if (!gallery_path.empty()) {
        require(!localizer_path.empty(), ErrorKind::kContract, "--gallery needs --localizer");
        st.gallery = load_gallery(gallery_path);
      }
      if (!localizer_path.empty()) st.localizer = load_localizer(localizer_path);
      if (!manifest.empty()) {
        const auto ds = load_dataset(manifest, false);
        st.geometry = ds.geometry;
        st.manifest_json = manifest_to_json(ds);
      }
      fs::path mpath = metrics_path.empty() ? fs::path(checkpoint).parent_path() / "metrics.json" : fs::path(metrics_path);
      if (fs::exists(mpath)) {
        const std::string text = read_text(mpath);
        try {
          st.metrics_json = json::parse(text).dump();
        } catch (const json::exception& e) {
          fail(ErrorKind::kParse, mpath.string() + ": " + e.what());
        }
      } else if (!metrics_path.empty()) {
        fail(ErrorKind::kIo, "cannot open " + metrics_path);
      }
      Service service(std::move(st));
      HttpServer server(service);
      const int bound = server.bind(host, port);
      out << "listening on http://" << host << ":" << bound << "\n" << std::flush;
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.run();
      g_server = nullptr;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << app.version() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    if (action) action();
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.category() << ": " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sonofield
