#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sonofield/cli.hpp"
#include "sonofield/pipeline.hpp"
#include "sonofield/spherical_harmonics.hpp"

namespace py = pybind11;
using namespace sonofield;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const ImageGray& img) {
  py::array_t<float> a({img.height, img.width});
  std::copy(img.data.begin(), img.data.end(), a.mutable_data());
  return a;
}

ImageGray from_numpy(const FloatArray& a) {
  if (a.ndim() != 2) throw py::value_error("image must be a 2-D array (height, width)");
  ImageGray img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

py::tuple run_cli_py(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  std::ostringstream out, err;
  int code;
  {
    py::gil_scoped_release release;
    code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hash-grid impedance fields, direct rendering, hashing localization and pose refinement";
  m.attr("__version__") = "1.0.0";

  PYBIND11_CONSTINIT static py::gil_safe_call_once_and_store<py::object> error_type;
  error_type.call_once_and_store_result([&] { return py::exception<Error>(m, "Error", PyExc_RuntimeError); });
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      // Category first so callers can match on it.
      py::set_error(error_type.get_stored(), (std::string(e.category()) + ": " + e.what()).c_str());
    }
  });

  py::class_<Pose>(m, "Pose")
      .def(py::init<>())
      .def(py::init([](const Vec3& p, const Vec3& e) { return Pose{p, e}; }), py::arg("position_mm"),
           py::arg("euler_zyx_rad"))
      .def_readwrite("position_mm", &Pose::position)
      .def_readwrite("euler_zyx_rad", &Pose::euler_zyx)
      .def("__repr__", [](const Pose& p) { return "Pose(" + pose_to_json(p) + ")"; });

  py::enum_<ProbeKind>(m, "ProbeKind").value("linear", ProbeKind::kLinear).value("convex", ProbeKind::kConvex);

  py::class_<ProbeGeometry>(m, "ProbeGeometry")
      .def(py::init<>())
      .def_readwrite("kind", &ProbeGeometry::kind)
      .def_readwrite("width_mm", &ProbeGeometry::width_mm)
      .def_readwrite("depth_mm", &ProbeGeometry::depth_mm)
      .def_readwrite("apex_offset_mm", &ProbeGeometry::apex_offset_mm)
      .def_readwrite("image_w", &ProbeGeometry::image_w)
      .def_readwrite("image_h", &ProbeGeometry::image_h);

  py::class_<GridConfig>(m, "GridConfig")
      .def(py::init<>())
      .def_readwrite("levels", &GridConfig::levels)
      .def_readwrite("features", &GridConfig::features)
      .def_readwrite("table_size", &GridConfig::table_size)
      .def_readwrite("res_min", &GridConfig::res_min)
      .def_readwrite("res_max", &GridConfig::res_max)
      .def_readwrite("domain_min", &GridConfig::domain_min)
      .def_readwrite("domain_max", &GridConfig::domain_max)
      .def_readwrite("sh_degree", &GridConfig::sh_degree)
      .def_readwrite("hidden_width", &GridConfig::hidden_width);

  m.def("grid_resolution", &grid_resolution, py::arg("config"), py::arg("level"));
  m.def("hash_index", [](std::uint64_t i, std::uint64_t j, std::uint64_t k, const GridConfig& c) {
    return hash_index(i, j, k, c);
  });
  m.def(
      "sh_encode",
      [](double x, double y, double z, int degree) {
        std::vector<double> out(static_cast<std::size_t>(degree) * degree);
        sh_encode(x, y, z, degree, out);
        return out;
      },
      py::arg("x"), py::arg("y"), py::arg("z"), py::arg("degree") = 4);

  py::class_<ImpedanceField>(m, "ImpedanceField")
      .def(py::init([](const GridConfig& c, std::uint64_t seed) { return ImpedanceField::initialized(c, seed); }),
           py::arg("config"), py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); })
      .def("save", [](const ImpedanceField& f, const std::filesystem::path& p) { save_checkpoint(p, f); })
      .def_property_readonly("config", &ImpedanceField::config)
      .def_property_readonly("parameter_count", [](const ImpedanceField& f) { return f.params().size(); })
      .def(
          "render",
          [](const ImpedanceField& f, const Pose& pose, const ProbeGeometry& g, int threads) {
            ImageGray img;
            {
              py::gil_scoped_release release;
              img = render_image(pose, g, f, RenderOptions{true, threads});
            }
            return to_numpy(img);
          },
          py::arg("pose"), py::arg("geometry") = ProbeGeometry{}, py::arg("threads") = 1)
      .def(
          "render_raymarch",
          [](const ImpedanceField& f, const Pose& pose, const ProbeGeometry& g, int k, int threads) {
            ImageGray img;
            {
              py::gil_scoped_release release;
              img = render_image_raymarch(pose, g, f, k, RenderOptions{true, threads});
            }
            return to_numpy(img);
          },
          py::arg("pose"), py::arg("geometry") = ProbeGeometry{}, py::arg("k") = 64, py::arg("threads") = 1)
      .def(
          "render_pgm",
          [](const ImpedanceField& f, const Pose& pose, const ProbeGeometry& g) {
            const auto bytes = render_pgm(f, pose, g, 1);
            return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
          },
          py::arg("pose"), py::arg("geometry") = ProbeGeometry{});

  py::class_<PhantomVolume>(m, "PhantomVolume")
      .def_static("load", [](const std::filesystem::path& p) { return load_phantom(p); })
      .def("save", [](const PhantomVolume& v, const std::filesystem::path& p) { save_phantom(p, v); })
      .def_readonly("dims", &PhantomVolume::dims)
      .def_readonly("spacing", &PhantomVolume::spacing)
      .def_readonly("origin", &PhantomVolume::origin)
      .def_property_readonly("values", [](const PhantomVolume& v) {
        py::array_t<float> a({v.dims[0], v.dims[1], v.dims[2]});
        std::copy(v.values.begin(), v.values.end(), a.mutable_data());
        return a;
      });

  m.def(
      "gen_phantom",
      [](const std::string& preset, std::uint64_t seed) {
        auto c = preset_config(preset);
        set_seed(c, seed);
        return gen_phantom(c.phantom);
      },
      py::arg("preset") = "desk", py::arg("seed") = 0);
  m.def(
      "simulate_bmode",
      [](const PhantomVolume& v, const Pose& pose, const ProbeGeometry& g, std::uint64_t seed) {
        return to_numpy(simulate_bmode(v, pose, g, seed));
      },
      py::arg("volume"), py::arg("pose"), py::arg("geometry") = ProbeGeometry{}, py::arg("noise_seed") = 0);

  m.def("psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(from_numpy(a), from_numpy(b)); });
  m.def("ssim", [](const FloatArray& a, const FloatArray& b) { return ssim(from_numpy(a), from_numpy(b)); });
  m.def("quantize8", [](const FloatArray& a) { return to_numpy(quantize8(from_numpy(a))); });
  m.def("angular_error_deg", py::overload_cast<const Pose&, const Pose&>(&angular_error_deg));
  m.def("perturb_pose", &perturb_pose, py::arg("pose"), py::arg("dt_mm"), py::arg("omega_rad"));

  py::class_<RetrievalResult>(m, "RetrievalResult")
      .def_readonly("pose", &RetrievalResult::pose)
      .def_readonly("class_index", &RetrievalResult::class_index)
      .def_readonly("hamming", &RetrievalResult::hamming);

  py::class_<LocalizerModel>(m, "Localizer")
      .def_static("load", [](const std::filesystem::path& p) { return load_localizer(p); })
      .def("save", [](const LocalizerModel& l, const std::filesystem::path& p) { save_localizer(p, l); })
      .def("encode", [](const LocalizerModel& l, const FloatArray& img) { return encode(from_numpy(img), l.encoder); })
      .def("code", [](const LocalizerModel& l, const FloatArray& img) {
        return binarize(encode(from_numpy(img), l.encoder));
      });

  py::class_<Gallery>(m, "Gallery")
      .def_static("load", [](const std::filesystem::path& p) { return load_gallery(p); })
      .def("save", [](const Gallery& g, const std::filesystem::path& p) { save_gallery(p, g); })
      .def_readonly("code_bits", &Gallery::code_bits)
      .def("__len__", [](const Gallery& g) { return g.entries.size(); })
      .def("retrieve", [](const Gallery& g, const LocalizerModel& l, const FloatArray& img) {
        return retrieve(from_numpy(img), l.encoder, g);
      });

  m.def(
      "train_localizer",
      [](const std::vector<FloatArray>& images, const std::vector<Pose>& poses, int iterations, std::uint64_t seed) {
        if (images.size() != poses.size()) throw py::value_error("one pose per image");
        std::vector<ImageGray> imgs;
        std::vector<int> labels;
        for (std::size_t i = 0; i < images.size(); ++i) {
          imgs.push_back(from_numpy(images[i]));
          labels.push_back(static_cast<int>(i));
        }
        LocalizerConfig cfg;
        cfg.iterations = iterations;
        cfg.seed = seed;
        TrainedLocalizer t = [&] {
          py::gil_scoped_release release;
          return train_localizer(imgs, labels, poses, cfg);
        }();
        return py::make_tuple(LocalizerModel{t.encoder, t.proxies}, t.gallery, t.losses);
      },
      py::arg("images"), py::arg("poses"), py::arg("iterations") = 400, py::arg("seed") = 0,
      "Trains on images labelled 0..N-1; returns (localizer, gallery, per-iteration losses).");

  m.def(
      "refine",
      [](const ImpedanceField& f, const FloatArray& observed, const Pose& initial, const ProbeGeometry& g,
         int restarts, int max_iterations, std::uint64_t seed) {
        ImageGray obs = from_numpy(observed);
        ProbeGeometry geom = g;
        geom.image_w = obs.width;
        geom.image_h = obs.height;
        RefineConfig cfg;
        cfg.restarts = restarts;
        cfg.max_iterations = max_iterations;
        cfg.seed = seed;
        RefineResult r = [&] {
          py::gil_scoped_release release;
          return refine(initial, obs, geom, f, cfg);
        }();
        py::dict d;
        d["pose"] = r.pose;
        d["initial_loss"] = r.initial_loss;
        d["final_loss"] = r.final_loss;
        d["iterations"] = r.iterations;
        d["accepted_steps"] = r.accepted_steps;
        d["restart"] = r.restart;
        d["loss_trace"] = r.loss_trace;
        return d;
      },
      py::arg("field"), py::arg("observed"), py::arg("initial"), py::arg("geometry") = ProbeGeometry{},
      py::arg("restarts") = 4, py::arg("max_iterations") = 300, py::arg("seed") = 0);

  m.def("run_cli", &run_cli_py, py::arg("argv"),
        "Runs the command line (argv[0] is the program name); returns (exit code, stdout, stderr).");
}
