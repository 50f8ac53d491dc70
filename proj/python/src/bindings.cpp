#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "roadfuse/complexity.hpp"
#include "roadfuse/error.hpp"
#include "roadfuse/ingest.hpp"
#include "roadfuse/losses.hpp"
#include "roadfuse/metrics.hpp"
#include "roadfuse/models.hpp"
#include "roadfuse/pipeline.hpp"
#include "roadfuse/synth.hpp"
#include "roadfuse/training.hpp"

namespace py = pybind11;
using namespace roadfuse;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

void require_2d(const py::buffer_info& b, const char* what) {
    if (b.ndim != 2) throw ShapeError(std::string(what) + " must be a 2-D array");
}

RasterGrid to_grid(const F32& a, double pixel_size = 1.0) {
    const auto b = a.request();
    require_2d(b, "grid");
    const auto* p = static_cast<const float*>(b.ptr);
    std::vector<float> data(p, p + b.size);
    return RasterGrid(static_cast<int>(b.shape[1]), static_cast<int>(b.shape[0]), 0.0, 0.0, pixel_size,
                      RasterGrid::kDefaultNodata, std::move(data));
}

py::array_t<float> from_grid(const RasterGrid& g) {
    py::array_t<float> out({g.height(), g.width()});
    std::copy(g.data().begin(), g.data().end(), out.mutable_data());
    return out;
}

BinaryMask to_mask(const U8& a) {
    const auto b = a.request();
    require_2d(b, "mask");
    const auto* p = static_cast<const std::uint8_t*>(b.ptr);
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(b.size));
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = p[i] ? 1 : 0;
    return BinaryMask(static_cast<int>(b.shape[1]), static_cast<int>(b.shape[0]), std::move(bits));
}

py::array_t<std::uint8_t> from_mask(const BinaryMask& m) {
    py::array_t<std::uint8_t> out({m.height(), m.width()});
    std::copy(m.bits().begin(), m.bits().end(), out.mutable_data());
    return out;
}

// Any-rank array viewed as an N x 1 x 1 x size tensor; losses only need matching element order.
Tensor<double> to_flat(const F64& a) {
    const auto b = a.request();
    const auto* p = static_cast<const double*>(b.ptr);
    return Tensor<double>(Shape4{1, 1, 1, static_cast<int>(b.size)}, std::vector<double>(p, p + b.size));
}

GridSpec spec_from(const py::dict& d) {
    GridSpec s;
    s.width = d["width"].cast<int>();
    s.height = d["height"].cast<int>();
    s.origin_x = d["origin_x"].cast<double>();
    s.origin_y = d["origin_y"].cast<double>();
    if (d.contains("pixel_size")) s.pixel_size = d["pixel_size"].cast<double>();
    return s;
}

GrayPatch to_gray(const F64& a) {
    const auto b = a.request();
    require_2d(b, "patch");
    const auto* p = static_cast<const double*>(b.ptr);
    return {static_cast<int>(b.shape[1]), static_cast<int>(b.shape[0]), std::vector<double>(p, p + b.size)};
}

py::dict loss_dict(const LossValue<double>& l, const py::buffer_info& shape_of) {
    py::array_t<double> grad(shape_of.shape);
    std::copy(l.grad.data().begin(), l.grad.data().end(), grad.mutable_data());
    py::dict d;
    d["value"] = l.value;
    d["grad"] = grad;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Road segmentation from satellite imagery fused with GPS trajectories";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());

    // ingest
    m.def("buffer_width_for_class", [](const std::string& c) { return buffer_width_for_class(c); }, py::arg("fclass"));
    m.def(
        "rasterize_gps",
        [](const F64& xy, const py::dict& spec) {
            const auto b = xy.request();
            if (b.ndim != 2 || b.shape[1] != 2) throw ShapeError("points must be an N x 2 array of x, y");
            const auto* p = static_cast<const double*>(b.ptr);
            GpsRasterizer r(spec_from(spec));
            for (py::ssize_t i = 0; i < b.shape[0]; ++i) r.add(p[2 * i], p[2 * i + 1]);
            return from_grid(r.grid());
        },
        py::arg("xy"), py::arg("spec"), "Per-cell point counts; points outside the extent are dropped.");
    m.def(
        "rasterize_labels",
        [](const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& roads, const py::dict& spec) {
            std::vector<RoadSegment> segs;
            for (const auto& [fclass, verts] : roads) {
                RoadSegment s;
                s.fclass = fclass;
                for (const auto& [x, y] : verts) s.vertices.push_back({x, y});
                segs.push_back(std::move(s));
            }
            return from_grid(rasterize_labels(segs, spec_from(spec)));
        },
        py::arg("roads"), py::arg("spec"), "roads: list of (fclass, [(x, y), ...]).");
    m.def("normalize_gps", [](const F32& g, double clip_pct) { return from_grid(normalize_gps(to_grid(g), clip_pct)); },
          py::arg("counts"), py::arg("clip_pct") = 99.0);

    // grid
    m.def("upscale_cubic", [](const F32& g, int factor) { return from_grid(upscale_cubic(to_grid(g), factor)); },
          py::arg("grid"), py::arg("factor") = 4);
    m.def(
        "normalize_minmax",
        [](const F32& g, double lo, double hi) { return from_grid(normalize_minmax(to_grid(g), lo, hi).grid); },
        py::arg("grid"), py::arg("lo_pct") = 2.0, py::arg("hi_pct") = 98.0);

    // metrics
    m.def("iou", [](const U8& p, const U8& g) { return iou(to_mask(p), to_mask(g)); }, py::arg("pred"), py::arg("gt"));
    m.def("boundary_band", [](const U8& mask, int d) { return from_mask(boundary_band(to_mask(mask), d)); },
          py::arg("mask"), py::arg("d"));
    m.def("boundary_iou", [](const U8& p, const U8& g, int d) { return boundary_iou(to_mask(p), to_mask(g), d); },
          py::arg("pred"), py::arg("gt"), py::arg("d"));
    m.def("default_boundary_distance", &default_boundary_distance, py::arg("width"), py::arg("height"));

    // losses
    m.def(
        "mse", [](const F64& p, const F64& y) { return loss_dict(mse(to_flat(p), to_flat(y)), p.request()); },
        py::arg("pred"), py::arg("gt"));
    m.def(
        "bce", [](const F64& p, const F64& y) { return loss_dict(bce(to_flat(p), to_flat(y)), p.request()); },
        py::arg("pred"), py::arg("gt"));
    m.def(
        "focal",
        [](const F64& p, const F64& y, double gamma, double alpha, bool alpha_weighting) {
            FocalOptions o;
            o.gamma = gamma;
            o.alpha = alpha;
            o.alpha_weighting = alpha_weighting;
            return loss_dict(focal(to_flat(p), to_flat(y), o), p.request());
        },
        py::arg("pred"), py::arg("gt"), py::arg("gamma") = 2.0, py::arg("alpha") = 0.25, py::arg("alpha_weighting") = true);

    // complexity
    m.def("shannon_entropy", [](const F64& a, int levels) { return shannon_entropy(to_gray(a), levels); },
          py::arg("patch"), py::arg("levels") = 256);
    m.def("glcm_homogeneity", [](const F64& a, int levels) { return homogeneity(glcm(to_gray(a), levels)); },
          py::arg("patch"), py::arg("levels") = 64);

    // models
    m.def(
        "param_count",
        [](const std::string& spec_json) {
            return build_model<float>(model_spec_from_json(nlohmann::json::parse(spec_json)), 0).params().scalar_count();
        },
        py::arg("spec_json"), "Trainable scalars of the model described by a JSON spec.");
    m.def(
        "predict",
        [](const std::string& checkpoint, const F32& satellite, std::optional<F32> gps) {
            const Checkpoint ck = load_checkpoint(checkpoint);
            Model<float> model = ck.make_model();
            auto tensor = [](const F32& a) {
                const auto b = a.request();
                if (b.ndim != 4) throw ShapeError("inputs must be N x C x H x W");
                const auto* p = static_cast<const float*>(b.ptr);
                return Tensor<float>(Shape4{static_cast<int>(b.shape[0]), static_cast<int>(b.shape[1]),
                                            static_cast<int>(b.shape[2]), static_cast<int>(b.shape[3])},
                                     std::vector<float>(p, p + b.size));
            };
            const Tensor<float> sat = tensor(satellite);
            std::optional<Tensor<float>> g;
            if (gps) g = tensor(*gps);
            const Tensor<float> out = model.predict(sat, g ? &*g : nullptr);
            const Shape4 s = out.shape();
            py::array_t<float> arr({s.n, s.c, s.h, s.w});
            std::copy(out.data().begin(), out.data().end(), arr.mutable_data());
            return arr;
        },
        py::arg("checkpoint"), py::arg("satellite"), py::arg("gps") = py::none());

    // training and pipeline
    m.def(
        "train",
        [](const std::filesystem::path& config) {
            const TrainResult r = train(read_train_config(config));
            py::list rows;
            for (const auto& h : r.history) {
                py::dict d;
                d["epoch"] = h.epoch;
                d["train_loss"] = h.train_loss;
                d["val_loss"] = h.val_loss;
                d["val_miou"] = h.val_miou;
                rows.append(d);
            }
            return rows;
        },
        py::arg("config"), "Trains from a JSON config and returns the per-epoch history.");
    m.def(
        "run_pipeline",
        [](const std::filesystem::path& config) {
            std::vector<std::pair<std::string, bool>> out;
            for (const auto& s : run_pipeline(read_experiment_config(config))) out.emplace_back(s.name, s.cached);
            return out;
        },
        py::arg("config"), "Runs every stage; returns (stage, cached) pairs.");
    m.def(
        "synth_dataset",
        [](std::uint64_t seed, int n_base, int size, const std::filesystem::path& dir, double hidden_fraction,
           int distractors) {
            SynthOptions o;
            o.hidden_fraction = hidden_fraction;
            o.distractors = distractors;
            synth_dataset(seed, n_base, size, dir, o);
        },
        py::arg("seed"), py::arg("n_base_patches"), py::arg("size"), py::arg("dir"), py::arg("hidden_fraction") = 0.0,
        py::arg("distractors") = 0);
    m.def("content_hash", [](const std::string& s) { return content_hash(s); }, py::arg("data"));
}
