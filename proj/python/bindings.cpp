// Python module `marmo`: numpy in, numpy out. Stacks are (z, y, x) arrays.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "marmo/evalsynth.hpp"
#include "marmo/injsite.hpp"
#include "marmo/mapping.hpp"
#include "marmo/nnseg.hpp"
#include "marmo/pipeline.hpp"
#include "marmo/tracerseg.hpp"

namespace py = pybind11;
using namespace marmo;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image to_image(const F64Array& a) {
  if (a.ndim() != 2) throw InvalidArgument("expected a 2-d array");
  Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::memcpy(img.data.data(), a.data(), img.size() * sizeof(double));
  return img;
}

Stack3D to_stack(const F64Array& a, std::array<double, 3> voxel_um) {
  if (a.ndim() != 3) throw InvalidArgument("expected a 3-d (z, y, x) array");
  Stack3D st({static_cast<int>(a.shape(2)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0))}, voxel_um);
  std::memcpy(st.data.data(), a.data(), st.size() * sizeof(double));
  return st;
}

py::array_t<double> from_image(const Image& img) {
  py::array_t<double> out({img.height, img.width});
  std::memcpy(out.mutable_data(), img.data.data(), img.size() * sizeof(double));
  return out;
}

py::array_t<std::uint8_t> from_mask(const Mask& m) {
  py::array_t<std::uint8_t> out({m.height, m.width});
  std::memcpy(out.mutable_data(), m.data.data(), m.size());
  return out;
}

py::array_t<double> from_stack(const Stack3D& st) {
  py::array_t<double> out({st.nz(), st.ny(), st.nx()});
  std::memcpy(out.mutable_data(), st.data.data(), st.size() * sizeof(double));
  return out;
}

CellPointCloud to_cells(const std::vector<std::tuple<int, int, int, double>>& pts) {
  CellPointCloud c;
  for (const auto& [x, y, z, s] : pts) c.push_back({x, y, z, s});
  return c;
}

std::vector<std::tuple<int, int, int, double>> from_cells(const CellPointCloud& c) {
  std::vector<std::tuple<int, int, int, double>> out;
  for (const auto& p : c) out.emplace_back(p.x, p.y, p.z, p.score);
  return out;
}

py::dict table_dict(const ConnectivityTable& t) {
  py::dict d;
  d["brain_id"] = t.brain_id;
  d["injection_id"] = t.injection_id;
  d["resolution_um"] = t.resolution_um;
  d["normalized"] = t.normalized;
  d["src"] = t.src;
  d["tgt"] = t.tgt;
  return d;
}

StorageType parse_storage(const std::string& s) {
  if (s == "u16") return StorageType::U16;
  if (s == "f32") return StorageType::F32;
  if (s == "f64") return StorageType::F64;
  throw InvalidArgument("dtype must be u16, f32 or f64");
}

}  // namespace

PYBIND11_MODULE(marmo, m) {
  m.doc() = "Tracer-image processing: phantoms, detection, segmentation and connectivity.";

  // Translators are tried newest first, so the base class goes in first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);

  m.def(
      "read_stack",
      [](const std::filesystem::path& prefix) {
        const Stack3D st = read_stack(prefix);
        return py::make_tuple(from_stack(st), st.voxel_um);
      },
      py::arg("prefix"), "Returns (array, voxel_um).");
  m.def(
      "write_stack",
      [](const std::filesystem::path& prefix, const F64Array& a, std::array<double, 3> voxel_um,
         const std::string& dtype) { write_stack(to_stack(a, voxel_um), prefix, parse_storage(dtype)); },
      py::arg("prefix"), py::arg("array"), py::arg("voxel_um") = std::array<double, 3>{1.0, 1.0, 1.0},
      py::arg("dtype") = "f32");

  m.def(
      "hessian_cell_filter",
      [](const F64Array& img, const std::vector<double>& sigmas) {
        return from_image(hessian_cell_filter(to_image(img), sigmas));
      },
      py::arg("image"), py::arg("sigmas_px"));
  m.def(
      "local_maxima",
      [](const F64Array& img, double threshold) { return from_cells(local_maxima(to_image(img), threshold)); },
      py::arg("saliency"), py::arg("threshold"), "Strict 8-neighbour maxima above threshold as (x, y, z, score).");
  m.def(
      "rough_localize",
      [](const F64Array& low, std::array<double, 3> voxel_um, double t_raw, double sigma_um) {
        return from_stack(rough_localize(to_stack(low, voxel_um), t_raw, sigma_um).mask);
      },
      py::arg("low_cb"), py::arg("voxel_um"), py::arg("t_raw") = 4500.0, py::arg("sigma_um") = 150.0);

  m.def(
      "threshold_pipeline",
      [](const F64Array& cg, const F64Array& cr, double t, double hi, double lo, int close_radius) {
        const TracerLabel l = threshold_pipeline(to_image(cg), to_image(cr), {t, hi, lo, close_radius});
        return py::make_tuple(from_mask(l.mask), from_image(l.signal));
      },
      py::arg("cg"), py::arg("cr"), py::arg("t") = 1.1, py::arg("hi") = 300.0, py::arg("lo") = 100.0,
      py::arg("close_radius") = 3, "Returns (mask, signal).");

  m.def(
      "unet_output_extent",
      [](int depth, int input_extent) {
        UNetConfig c;
        c.depth = depth;
        return unet_output_extent(c, input_extent);
      },
      py::arg("depth"), py::arg("input_extent"));

  m.def(
      "generate_phantom",
      [](const std::string& spec_text) {
        const Phantom ph = generate_phantom(parse_phantom_spec(spec_text));
        py::dict d, sections;
        for (const auto& [c, st] : ph.sections) sections[py::str(std::string(channel_name(c)))] = from_stack(st);
        d["sections"] = sections;
        d["cells"] = from_cells(ph.truth.cells);
        d["tracer_mask"] = from_stack(ph.truth.tracer_mask);
        d["table"] = table_dict(ph.truth.table);
        d["tiles"] = ph.tiles.size();
        return d;
      },
      py::arg("spec") = "", "Phantom from key=value spec text; returns sections, cells, tracer mask and table.");
  m.def(
      "write_phantom",
      [](const std::string& spec_text, const std::filesystem::path& dir) {
        write_phantom(generate_phantom(parse_phantom_spec(spec_text)), dir);
      },
      py::arg("spec"), py::arg("dir"));

  m.def(
      "match_detections",
      [](const std::vector<std::tuple<int, int, int, double>>& pred,
         const std::vector<std::tuple<int, int, int, double>>& truth, double radius_px) {
        const MatchResult r = match_detections(to_cells(pred), to_cells(truth), radius_px);
        py::dict d;
        d["tp"] = r.tp;
        d["fp"] = r.fp;
        d["fn"] = r.fn;
        d["precision"] = r.precision();
        d["recall"] = r.recall();
        d["f1"] = r.f1();
        return d;
      },
      py::arg("pred"), py::arg("truth"), py::arg("radius_px") = 4.0);

  m.def(
      "validate_config",
      [](const std::filesystem::path& path) {
        std::vector<std::string> out;
        for (const auto& i : validate_config(path)) out.push_back(i.message());
        return out;
      },
      py::arg("path"), "Problems found in a config file; empty when valid.");
  m.def(
      "run_pipeline",
      [](const std::filesystem::path& path, int threads) {
        PipelineConfig cfg;
        const auto issues = validate_config(path, &cfg);
        if (!issues.empty()) throw InvalidArgument(issues.front().message());
        if (threads > 0) cfg.threads = threads;
        RunReport r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(cfg);
        }
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& s : r.stages) out.emplace_back(s.name, s.status);
        return out;
      },
      py::arg("config"), py::arg("threads") = 0, "Runs every stage; returns (stage, status) pairs.");
  m.def(
      "read_connectivity", [](const std::filesystem::path& p) { return table_dict(read_connectivity(p)); },
      py::arg("path"));
}
