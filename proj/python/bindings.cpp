#include "uvx/bench.hpp"
#include "uvx/checkpoint.hpp"
#include "uvx/data.hpp"
#include "uvx/gradcheck.hpp"
#include "uvx/losses.hpp"
#include "uvx/metrics.hpp"
#include "uvx/train.hpp"

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

namespace py = pybind11;
using namespace uvx;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Shape shape_of(const py::array& a) { return Shape(a.shape(), a.shape() + a.ndim()); }

template <class T>
py::array_t<T> to_numpy(const Tensor<T>& t) {
    py::array_t<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

Tensor<float> from_numpy(const F32Array& a) {
    return Tensor<float>(shape_of(a), std::vector<float>(a.data(), a.data() + a.size()));
}

LabelMap labels_from_numpy(const U8Array& a) {
    return LabelMap(shape_of(a), std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
}

std::vector<std::uint8_t> mask_from_numpy(const U8Array& a) {
    std::vector<std::uint8_t> m(a.data(), a.data() + a.size());
    for (auto& x : m) x = x != 0;
    return m;
}

py::dict metrics_dict(const MetricReport& r) {
    py::dict d;
    d["mean_dsc"] = r.mean_dsc();
    d["mean_iou"] = r.mean_iou();
    d["mean_hd95"] = r.mean_hd95();
    d["undefined_hd95"] = r.undefined_hd95_count();
    d["csv"] = r.to_csv();
    return d;
}

} // namespace

PYBIND11_MODULE(_uvx, m) {
    m.doc() = "U-VixLSTM segmentation toolkit";

    auto base = py::register_exception<Error>(m, "UvxError", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());

    py::enum_<vil::ForgetGate>(m, "ForgetGate")
        .value("EXP", vil::ForgetGate::Exp)
        .value("SIGMOID", vil::ForgetGate::Sigmoid);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("spatial_rank", &ModelConfig::spatial_rank)
        .def_readwrite("levels", &ModelConfig::levels)
        .def_readwrite("base_channels", &ModelConfig::base_channels)
        .def_readwrite("patch_size", &ModelConfig::patch_size)
        .def_readwrite("embed_dim", &ModelConfig::embed_dim)
        .def_readwrite("vil_blocks", &ModelConfig::vil_blocks)
        .def_readwrite("num_classes", &ModelConfig::num_classes)
        .def_readwrite("heads", &ModelConfig::heads)
        .def_readwrite("residual_vil", &ModelConfig::residual_vil)
        .def_readwrite("gate_silu", &ModelConfig::gate_silu)
        .def_readwrite("forget_gate", &ModelConfig::forget_gate)
        .def_readwrite("input_extents", &ModelConfig::input_extents)
        .def("validate", &ModelConfig::validate);

    m.def("tiny_model_config", &tiny_model_config);

    py::class_<UVixLSTM<float>>(m, "Model")
        .def(py::init<ModelConfig, std::uint64_t>(), py::arg("config") = ModelConfig{}, py::arg("seed") = 0)
        .def_property_readonly("config", &UVixLSTM<float>::config)
        .def_property_readonly("param_count",
                               [](const UVixLSTM<float>& model) { return model.parameters().scalar_count(); })
        .def("param_ids",
             [](const UVixLSTM<float>& model) {
                 std::vector<std::string> ids;
                 for (const auto& p : model.parameters().params()) ids.push_back(p.id);
                 return ids;
             })
        .def(
            "forward",
            [](const UVixLSTM<float>& model, const F32Array& image) {
                NoGradGuard ng;
                return to_numpy(model.forward(Var<float>(from_numpy(image))).value());
            },
            py::arg("image"), "Class probabilities [c x spatial] for an image [1 x spatial].")
        .def(
            "predict",
            [](const UVixLSTM<float>& model, const F32Array& image) {
                NoGradGuard ng;
                return to_numpy(argmax_labels(model.forward(Var<float>(from_numpy(image))).value()));
            },
            py::arg("image"))
        .def("load", [](UVixLSTM<float>& model, const std::string& path) {
            restore(load_checkpoint(path), model.parameters());
        })
        .def("summary_csv", [](const UVixLSTM<float>& model) { return model.summary().to_csv(); });

    m.def(
        "composite_loss",
        [](const F32Array& probs, const U8Array& labels, std::size_t num_classes) {
            const Tensor<double> p = from_numpy(probs).cast<double>();
            return composite_loss(Var<double>(p), one_hot<double>(labels_from_numpy(labels), num_classes))
                .value()
                .item();
        },
        py::arg("probs"), py::arg("labels"), py::arg("num_classes"));

    m.def(
        "dsc_iou",
        [](const U8Array& pred, const U8Array& gt, std::size_t num_classes) {
            std::vector<std::pair<double, double>> out;
            for (const auto& s : dsc_iou(labels_from_numpy(pred), labels_from_numpy(gt), num_classes))
                out.emplace_back(s.dsc, s.iou);
            return out;
        },
        py::arg("pred"), py::arg("gt"), py::arg("num_classes"), "Per-class (dsc, iou) pairs.");

    m.def(
        "hd95",
        [](const U8Array& a, const U8Array& b, std::vector<double> spacing) -> std::optional<double> {
            if (shape_of(a) != shape_of(b)) throw ShapeError("hd95: masks differ in shape");
            if (spacing.empty()) spacing.assign(a.ndim(), 1.0);
            return hd95(mask_from_numpy(a), mask_from_numpy(b), shape_of(a), spacing);
        },
        py::arg("a"), py::arg("b"), py::arg("spacing") = std::vector<double>{},
        "None when exactly one mask is empty.");

    m.def(
        "synth",
        [](const std::string& out_dir, std::size_t cases, std::vector<std::size_t> extents, std::size_t num_classes,
           std::uint64_t seed, double split) {
            data::SynthConfig cfg;
            cfg.cases = cases;
            cfg.extents = Shape(extents.begin(), extents.end());
            cfg.num_classes = num_classes;
            cfg.seed = seed;
            const data::Manifest all = data::synth_dataset(cfg, out_dir);
            if (split > 0.0) {
                auto [train, test] = data::split_train_test(all, split, seed);
                data::write_manifest((std::filesystem::path(out_dir) / "train.csv").string(), train);
                data::write_manifest((std::filesystem::path(out_dir) / "test.csv").string(), test);
            }
            return all.entries.size();
        },
        py::arg("out_dir"), py::arg("cases") = 4, py::arg("extents") = std::vector<std::size_t>{64, 64},
        py::arg("num_classes") = 3, py::arg("seed") = 0, py::arg("split") = 0.0,
        "Writes a synthetic dataset and manifest.csv (plus train.csv/test.csv when split > 0).");

    m.def(
        "load_case",
        [](const std::string& manifest, std::size_t index) {
            const data::Manifest mf = data::read_manifest(manifest);
            const data::Sample s = data::load_sample(mf, mf.entries.at(index));
            return py::make_tuple(to_numpy(s.image), to_numpy(s.mask), s.case_id);
        },
        py::arg("manifest"), py::arg("index"), "(image, mask, case_id) of one manifest row.");

    m.def(
        "train",
        [](const std::string& config_path, const std::string& resume,
           std::function<void(const std::string&)> log) {
            TrainOptions opts;
            opts.resume = resume;
            opts.log = std::move(log);
            TrainResult res;
            {
                py::gil_scoped_release release;
                if (opts.log) {
                    auto cb = opts.log;
                    opts.log = [cb](const std::string& line) {
                        py::gil_scoped_acquire acquire;
                        cb(line);
                    };
                }
                res = train(load_run_config(config_path), opts);
            }
            py::dict d;
            d["losses"] = res.losses;
            d["final_checkpoint"] = res.final_checkpoint;
            return d;
        },
        py::arg("config"), py::arg("resume") = "", py::arg("log") = nullptr);

    m.def(
        "evaluate",
        [](const std::string& checkpoint, const std::string& manifest, const std::string& out_dir, bool oracle) {
            EvalOptions opts;
            opts.checkpoint = checkpoint;
            opts.manifest = manifest;
            opts.out_dir = out_dir;
            opts.oracle = oracle;
            return metrics_dict(run_eval(opts));
        },
        py::arg("checkpoint"), py::arg("manifest"), py::arg("out_dir") = "", py::arg("oracle") = false);

    m.def(
        "gradcheck",
        [](double tolerance, std::uint64_t seed, const std::string& corrupt_op) {
            GradcheckOptions opts;
            opts.tolerance = tolerance;
            opts.seed = seed;
            opts.corrupt_op = corrupt_op;
            GradcheckReport r;
            {
                py::gil_scoped_release release;
                r = run_gradcheck(opts);
            }
            py::list params;
            for (const auto& p : r.params) {
                py::dict e;
                e["id"] = p.id;
                e["checked"] = p.checked;
                e["skipped"] = p.skipped;
                e["max_rel_err"] = p.max_rel_err;
                e["max_abs_grad"] = p.max_abs_grad;
                e["pass"] = p.pass;
                params.append(e);
            }
            py::dict d;
            d["pass"] = r.pass();
            d["offenders"] = r.offenders();
            d["params"] = params;
            d["sweep_csv"] = r.sweep_csv();
            return d;
        },
        py::arg("tolerance") = 1e-4, py::arg("seed") = 0, py::arg("corrupt_op") = "");

    m.def(
        "bench",
        [](std::vector<std::size_t> sizes, std::size_t repeats, std::size_t embed_dim, std::size_t heads) {
            BenchOptions opts;
            if (!sizes.empty()) opts.sizes = sizes;
            opts.repeats = repeats;
            opts.embed_dim = embed_dim;
            opts.heads = heads;
            BenchReport r;
            {
                py::gil_scoped_release release;
                r = run_bench(opts);
            }
            py::dict fits;
            for (const auto& f : r.fits) fits[py::str(f.mixer)] = py::make_tuple(f.time_slope, f.flop_slope);
            py::dict d;
            d["csv"] = r.to_csv();
            d["fits"] = fits;
            return d;
        },
        py::arg("sizes") = std::vector<std::size_t>{}, py::arg("repeats") = 5, py::arg("embed_dim") = 64,
        py::arg("heads") = 4, "Mixer timing; fits maps mixer -> (time_slope, flop_slope).");
}
