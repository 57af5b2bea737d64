#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sketchdiff/cli.hpp"
#include "sketchdiff/conditions.hpp"
#include "sketchdiff/diffusion.hpp"
#include "sketchdiff/metrics.hpp"
#include "sketchdiff/service.hpp"

namespace py = pybind11;
using namespace sketchdiff;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

/// (H, W) arrays are read as one channel; (H, W, C) as C channels.
ImageBuffer to_buffer(const FloatArray& a) {
    if (a.ndim() != 2 && a.ndim() != 3) throw ShapeError("expected an (H, W) or (H, W, C) array");
    const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
    return ImageBuffer(h, w, c, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const ImageBuffer& img) {
    FloatArray out({img.height(), img.width(), img.channels()});
    std::copy(img.values().begin(), img.values().end(), out.mutable_data());
    return out;
}

std::optional<ImageBuffer> maybe_buffer(const std::optional<FloatArray>& a) {
    if (!a) return std::nullopt;
    return to_buffer(*a);
}

class Model {
public:
    Model(const std::filesystem::path& path, bool raw_params)
        : model_(LoadedModel::from_checkpoint(path, raw_params)) {}

    int height() const { return model_->spec.height; }
    int width() const { return model_->spec.width; }
    int steps() const { return model_->spec.T; }

    FloatArray generate(const std::optional<FloatArray>& sketch, const std::optional<FloatArray>& stroke,
                        double s_sketch, double s_stroke, double realism,
                        const std::optional<FloatArray>& reference, std::uint64_t seed, int steps) const {
        GenerationJob job;
        job.cond = {maybe_buffer(sketch), maybe_buffer(stroke)};
        job.settings.s_sketch = s_sketch;
        job.settings.s_stroke = s_stroke;
        apply_realism(job.settings, realism);
        job.settings.reference = maybe_buffer(reference);
        if (realism > 0.0 && !job.settings.reference) job.settings.reference = job.cond.stroke;
        job.seed = seed;
        job.steps = steps;
        ImageBuffer out;
        {
            py::gil_scoped_release release;
            out = sketchdiff::generate(*model_, job);
        }
        return to_array(out);
    }

private:
    std::shared_ptr<const LoadedModel> model_;
};

}  // namespace

PYBIND11_MODULE(sketchdiff, m) {
    m.doc() = "Sketch- and stroke-conditioned pixel-space diffusion";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def_readonly("T", &NoiseSchedule::T)
        .def_readonly("betas", &NoiseSchedule::betas)
        .def_readonly("alpha_bars", &NoiseSchedule::alpha_bars)
        .def("beta", &NoiseSchedule::beta, py::arg("t"))
        .def("alpha_bar", &NoiseSchedule::alpha_bar, py::arg("t"));

    m.def("make_schedule", &make_schedule, py::arg("T"), py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);

    m.def(
        "q_sample",
        [](const FloatArray& x0, int t, const FloatArray& eps, const NoiseSchedule& s) {
            return to_array(q_sample(to_buffer(x0), t, to_buffer(eps), s));
        },
        py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));

    m.def(
        "low_pass", [](const FloatArray& img, int N) { return to_array(low_pass(to_buffer(img), N)); },
        py::arg("image"), py::arg("N"));

    m.def(
        "extract_sketch",
        [](const FloatArray& img, double low, double high) {
            return to_array(extract_sketch(to_buffer(img), CannyThresholds{low, high}));
        },
        py::arg("image"), py::arg("low") = CannyThresholds{}.low, py::arg("high") = CannyThresholds{}.high);

    m.def(
        "extract_strokes",
        [](const FloatArray& img, const FloatArray& sketch) {
            return to_array(extract_strokes(to_buffer(img), to_buffer(sketch)));
        },
        py::arg("image"), py::arg("sketch"));

    m.def(
        "frechet_distance",
        [](const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& mu2,
           const Eigen::MatrixXd& s2) {
            FeatureStats a, b;
            a.mu = mu1;
            a.sigma = s1;
            b.mu = mu2;
            b.sigma = s2;
            return frechet_distance(a, b);
        },
        py::arg("mu1"), py::arg("sigma1"), py::arg("mu2"), py::arg("sigma2"));

    m.def(
        "perceptual_distance",
        [](const FloatArray& x, const FloatArray& y) {
            return perceptual_distance(to_buffer(x), to_buffer(y), *default_embedder());
        },
        py::arg("x"), py::arg("y"));

    m.def(
        "read_png", [](const std::filesystem::path& p, int channels) { return to_array(raster_to_model(read_png(p, channels))); },
        py::arg("path"), py::arg("channels") = 3);
    m.def(
        "write_png", [](const std::filesystem::path& p, const FloatArray& img) { write_png(p, model_to_raster(to_buffer(img))); },
        py::arg("path"), py::arg("image"));

    py::class_<Model>(m, "Model")
        .def(py::init<const std::filesystem::path&, bool>(), py::arg("checkpoint"), py::arg("raw_params") = false)
        .def_property_readonly("height", &Model::height)
        .def_property_readonly("width", &Model::width)
        .def_property_readonly("steps", &Model::steps)
        .def("generate", &Model::generate, py::arg("sketch") = py::none(), py::arg("stroke") = py::none(),
             py::arg("s_sketch") = 1.0, py::arg("s_stroke") = 1.0, py::arg("realism") = 0.0,
             py::arg("reference") = py::none(), py::arg("seed") = 0, py::arg("steps") = 0);

    m.def(
        "cli",
        [](std::vector<std::string> args) {
            args.insert(args.begin(), "sketchdiff");
            std::vector<const char*> argv;
            for (const auto& a : args) argv.push_back(a.c_str());
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a command-line subcommand; returns (exit_code, stdout, stderr).");
}
