#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdio>
#include <string>
#include <vector>

#include "logodiffuser/coreattn.hpp"
#include "logodiffuser/error.hpp"
#include "logodiffuser/flow.hpp"
#include "logodiffuser/glyphkit.hpp"
#include "logodiffuser/metrics.hpp"
#include "logodiffuser/pipeline.hpp"

namespace py = pybind11;
namespace ld = logodiffuser;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vec(const F64& a) { return {a.data(), a.data() + a.size()}; }

py::array_t<double> to_array(const std::vector<double>& v) { return py::array_t<double>(v.size(), v.data()); }

template <class T>
py::array_t<T> image(const std::vector<T>& v, int height, int width) {
    return py::array_t<T>({height, width}, v.data());
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.attr("__version__") = ld::pipeline::version;

    static py::exception<ld::Error> error(m, "Error", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ld::Error& e) {
            py::object inst = py::reinterpret_borrow<py::object>(error.ptr())(e.what());
            inst.attr("code") = ld::to_string(e.code());
            PyErr_SetObject(error.ptr(), inst.ptr());
        }
    });

    py::class_<ld::pipeline::RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static("parse", &ld::pipeline::RunConfig::parse, py::arg("text"))
        .def("set", &ld::pipeline::RunConfig::set, py::arg("key"), py::arg("value"))
        .def("validate", &ld::pipeline::RunConfig::validate)
        .def("serialize", &ld::pipeline::RunConfig::serialize)
        .def("rendered_prompt", &ld::pipeline::RunConfig::rendered_prompt)
        .def("__eq__", [](const ld::pipeline::RunConfig& a, const ld::pipeline::RunConfig& b) { return a == b; })
        .def("__repr__", [](const ld::pipeline::RunConfig& c) { return "RunConfig(\n" + c.serialize() + ")"; });

    m.def("config_keys", &ld::pipeline::config_keys);

    m.def(
        "rasterize",
        [](const std::string& text, const std::string& layout, int width, int height, int scale) {
            const auto g = ld::glyphkit::rasterize_text(text, ld::glyphkit::BitmapFont::builtin(),
                                                        ld::glyphkit::parse_layout(layout), {width, height, 8}, scale);
            py::dict d;
            d["pixels"] = image(g.pixels, g.height, g.width);
            d["mask"] = image(g.mask, g.height, g.width);
            d["warnings"] = g.warnings;
            d["checksum"] = hex64(g.checksum());
            return d;
        },
        py::arg("text"), py::arg("layout") = "horizontal", py::arg("width") = 128, py::arg("height") = 128,
        py::arg("scale") = 2);

    m.def(
        "select_core_tokens",
        [](const F64& scores, double ratio) {
            ld::coreattn::ScoreVector s;
            s.scores = to_vec(scores);
            return ld::coreattn::select_core_tokens(s, ratio).indices;
        },
        py::arg("scores"), py::arg("ratio"));
    m.def("core_token_count", &ld::coreattn::core_token_count, py::arg("ratio"), py::arg("n"));

    m.def(
        "noise_to", [](const F64& x0, double t, const F64& eps) { return to_array(ld::flow::noise_to(to_vec(x0), t, to_vec(eps))); },
        py::arg("x0"), py::arg("t"), py::arg("eps"));
    m.def(
        "cfg_combine",
        [](const F64& c, const F64& u, double s) { return to_array(ld::flow::cfg_combine(to_vec(c), to_vec(u), s)); },
        py::arg("v_cond"), py::arg("v_uncond"), py::arg("s"));
    m.def(
        "euler_step",
        [](const F64& x, const F64& v, double t, double t_next) {
            return to_array(ld::flow::euler_step(to_vec(x), to_vec(v), t, t_next));
        },
        py::arg("x"), py::arg("v"), py::arg("t"), py::arg("t_next"));
    m.def(
        "gaussian_noise", [](std::size_t n, std::uint64_t seed) { return to_array(ld::flow::gaussian_noise(n, seed)); },
        py::arg("n"), py::arg("seed"));

    m.def("exact_match", &ld::metrics::exact_match, py::arg("predicted"), py::arg("target"));
    m.def(
        "char_f1",
        [](std::string_view p, std::string_view t) {
            const auto r = ld::metrics::char_f1(p, t);
            return py::make_tuple(r.precision, r.recall, r.f1);
        },
        py::arg("predicted"), py::arg("target"));

    m.def(
        "generate",
        [](const ld::pipeline::RunConfig& cfg) {
            ld::pipeline::GenerateOutcome out;
            {
                py::gil_scoped_release release;
                out = ld::pipeline::run_generate(cfg);
            }
            const auto side = out.result.height;
            py::dict d;
            d["image"] = image(out.result.quantized(), side, out.result.width);
            d["checksum"] = hex64(out.result.checksum());
            d["injected_layer_steps"] = out.result.injected_layer_steps;
            d["manifest"] = out.manifest.dump();
            return d;
        },
        py::arg("config"));

    m.def(
        "sweep",
        [](const ld::pipeline::RunConfig& cfg) {
            ld::pipeline::SweepOutcome out;
            {
                py::gil_scoped_release release;
                out = ld::pipeline::run_sweep(cfg);
            }
            py::list failures;
            for (const auto& f : out.failures) failures.append(py::make_tuple(f.ratio, f.step, f.error));
            py::dict d;
            d["csv"] = out.table.to_csv();
            d["failures"] = failures;
            d["manifest"] = out.manifest.dump();
            return d;
        },
        py::arg("config"));
}
