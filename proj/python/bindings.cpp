#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "stcore/cli.hpp"
#include "stcore/error.hpp"
#include "stcore/io/checkpoint.hpp"
#include "stcore/io/events.hpp"
#include "stcore/io/images.hpp"
#include "stcore/lif.hpp"
#include "stcore/model.hpp"

namespace py = pybind11;
using namespace stcore;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor from_numpy(const FloatArray& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(s), std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Dataset make_dataset(const FloatArray& x, const std::vector<std::int64_t>& labels) {
  if (x.ndim() != 5) throw ShapeError("dataset array must be [N, T, C, H, W]");
  if (static_cast<std::size_t>(x.shape(0)) != labels.size()) throw ShapeError("one label per sample");
  Dataset d;
  d.T = x.shape(1);
  d.C = x.shape(2);
  d.H = x.shape(3);
  d.W = x.shape(4);
  d.data.assign(x.data(), x.data() + x.size());
  d.labels = labels;
  return d;
}

}  // namespace

PYBIND11_MODULE(_stcore, m) {
  m.doc() = "Spiking transformer kernel with branch and threshold fusion";

  // translators run newest first, so the base class goes in before its subclasses
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ValueError>(m, "ValueError", PyExc_ValueError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.attr("E_MAC_PJ") = kMacEnergyPj;
  m.attr("E_AC_PJ") = kAcEnergyPj;

  py::class_<LifParams>(m, "LifParams")
      .def(py::init<>())
      .def_readwrite("k_tau", &LifParams::k_tau)
      .def_readwrite("v_th", &LifParams::v_th)
      .def_readwrite("v_reset", &LifParams::v_reset)
      .def_readwrite("surrogate_alpha", &LifParams::surrogate_alpha);

  m.def(
      "lif_sequence",
      [](const FloatArray& x, const LifParams& p) {
        auto [s, u] = lif_sequence_with_membrane(from_numpy(x), p);
        return py::make_tuple(to_numpy(s), to_numpy(u));
      },
      py::arg("x"), py::arg("params") = LifParams{}, "Spikes and pre-reset membrane for x [T, ...] from rest.");

  py::class_<RtformerConfig>(m, "RtformerConfig")
      .def(py::init<>())
      .def_readwrite("T", &RtformerConfig::T)
      .def_readwrite("depth", &RtformerConfig::depth)
      .def_readwrite("dim", &RtformerConfig::dim)
      .def_readwrite("heads", &RtformerConfig::heads)
      .def_readwrite("w", &RtformerConfig::w)
      .def_readwrite("classes", &RtformerConfig::classes)
      .def_readwrite("in_channels", &RtformerConfig::in_channels)
      .def_readwrite("height", &RtformerConfig::height)
      .def_readwrite("width", &RtformerConfig::width)
      .def_readwrite("mlp_ratio", &RtformerConfig::mlp_ratio)
      .def_readwrite("attn_scale", &RtformerConfig::attn_scale)
      .def_readwrite("v_th", &RtformerConfig::v_th)
      .def_readwrite("lif", &RtformerConfig::lif)
      .def_readwrite("seed", &RtformerConfig::seed)
      .def_readwrite("block_order", &RtformerConfig::block_order)
      .def_readwrite("dataset", &RtformerConfig::dataset)
      .def("validate", &RtformerConfig::validate)
      .def("records", &RtformerConfig::to_records);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&make_dataset), py::arg("x"), py::arg("labels"))
      .def("__len__", &Dataset::size)
      .def_readonly("labels", &Dataset::labels)
      .def_property_readonly("sample_shape", [](const Dataset& d) { return Shape{d.T, d.C, d.H, d.W}; })
      .def("batch", [](const Dataset& d, const std::vector<std::int64_t>& idx) { return to_numpy(d.batch(idx)); });

  py::class_<SgdOptimizer>(m, "SgdOptimizer")
      .def(py::init<double, double>(), py::arg("lr"), py::arg("momentum") = 0.9)
      .def_property_readonly("lr", &SgdOptimizer::lr);

  py::class_<EnergyReport>(m, "EnergyReport")
      .def_property_readonly("total_macs", &EnergyReport::total_macs)
      .def_property_readonly("total_acs", &EnergyReport::total_acs)
      .def_property_readonly("total_pj", &EnergyReport::total_pj)
      .def_readonly("variant", &EnergyReport::variant)
      .def("table", [](const EnergyReport& r) { return format_energy_table(r); })
      .def("csv", [](const EnergyReport& r) { return energy_csv(r); })
      .def("svg", [](const EnergyReport& r) { return energy_svg(r); });

  py::class_<VerifyReport>(m, "VerifyReport")
      .def_readonly("max_logit_rel_error", &VerifyReport::max_logit_rel_error)
      .def_readonly("mismatches", &VerifyReport::mismatches)
      .def_readonly("band_mismatches", &VerifyReport::band_mismatches)
      .def_readonly("argmax_agree", &VerifyReport::argmax_agree)
      .def_property_readonly("passed", &VerifyReport::passed)
      .def("summary", &VerifyReport::summary);

  py::class_<RtformerNet>(m, "RtformerNet")
      .def_static("build", &RtformerNet::build, py::arg("config"))
      .def_property_readonly("config", &RtformerNet::config)
      .def_property_readonly("mode", [](const RtformerNet& n) { return mode_name(n.mode()); })
      .def_property_readonly("fused", &RtformerNet::fused)
      .def("set_infer", [](RtformerNet& n) { n.set_mode(NetMode::Infer); })
      .def("forward", [](RtformerNet& n, const FloatArray& x) { return to_numpy(n.forward(from_numpy(x))); },
           py::arg("x"), "x [T, B, C, H, W] -> logits [B, classes]")
      .def("parameter_count", &RtformerNet::parameter_count)
      .def("tensors",
           [](const RtformerNet& n) {
             py::dict d;
             for (const auto& [name, t] : n.named_tensors()) d[py::str(name)] = to_numpy(t);
             return d;
           })
      .def("save", [](const RtformerNet& n, const std::filesystem::path& p) { io::save_checkpoint(p, n); })
      .def("to_bytes", [](const RtformerNet& n) {
        const auto b = io::serialize_checkpoint(n);
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      });

  m.def("load_checkpoint", &io::load_checkpoint, py::arg("path"));
  m.def("fuse_network", &fuse_network, py::arg("net"));
  m.def(
      "train_epoch",
      [](RtformerNet& net, const Dataset& d, SgdOptimizer& opt, std::int64_t batch, std::uint64_t seed) {
        const auto r = train_epoch(net, d, opt, batch, seed);
        return py::make_tuple(r.loss, r.accuracy);
      },
      py::arg("net"), py::arg("data"), py::arg("optimizer"), py::arg("batch_size") = 16, py::arg("seed") = 0,
      "Returns (mean loss, accuracy).");
  m.def(
      "evaluate", [](RtformerNet& net, const Dataset& d) { return evaluate(net, d).accuracy; }, py::arg("net"),
      py::arg("data"));
  m.def(
      "verify_fusion",
      [](RtformerNet& ref, RtformerNet& fused, const Dataset& d, double tol, std::int64_t limit) {
        return verify_fusion(ref, fused, d, tol, limit);
      },
      py::arg("reference"), py::arg("fused"), py::arg("data"), py::arg("tolerance") = 1e-4, py::arg("limit") = 0);
  m.def(
      "estimate_energy", [](RtformerNet& n, const FloatArray& probe) { return estimate_energy(n, from_numpy(probe)); },
      py::arg("net"), py::arg("probe"));

  m.def(
      "toy_event_dataset",
      [](std::int64_t classes, std::int64_t per_class, int size, std::uint64_t seed, std::int64_t T) {
        io::ToyEventOptions o;
        o.classes = classes;
        o.samples_per_class = per_class;
        o.size = static_cast<std::uint16_t>(size);
        o.seed = seed;
        return io::toy_event_dataset(o, T);
      },
      py::arg("classes") = 4, py::arg("samples_per_class") = 100, py::arg("size") = 16, py::arg("seed") = 0,
      py::arg("T") = 4);
  m.def(
      "load_events", [](const std::filesystem::path& p, std::int64_t T) { return to_numpy(io::load_events(p, T)); },
      py::arg("path"), py::arg("T"));
  m.def(
      "encode_spikes",
      [](const FloatArray& images, std::int64_t T, const std::string& scheme, std::uint64_t seed) {
        return to_numpy(io::encode_spikes(from_numpy(images), T, io::parse_encoding(scheme), seed));
      },
      py::arg("images"), py::arg("T"), py::arg("scheme") = "direct", py::arg("seed") = 0);
  m.def(
      "load_idx", [](const std::filesystem::path& p) { return to_numpy(io::load_idx(p)); }, py::arg("path"));

  m.def(
      "cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "stcore");
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in-process; returns (exit code, stdout, stderr).");
}
