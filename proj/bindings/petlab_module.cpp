// Python bindings: float64 tensor ops with taped autodiff, the synthetic
// task generators, corpus IO, and the experiment-level entry points that
// mirror the CLI subcommands.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <memory>

#include "petlab/checkpoint.hpp"
#include "petlab/corpus.hpp"
#include "petlab/grad_check.hpp"
#include "petlab/ops.hpp"
#include "petlab/pretrain.hpp"
#include "petlab/runner.hpp"

namespace py = pybind11;
using namespace petlab;

namespace {

using DTensor = Tensor<double>;

DTensor tensor_from_array(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& array) {
    Shape shape(array.ndim());
    for (py::ssize_t i = 0; i < array.ndim(); ++i) {
        shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(array.shape(i));
    }
    std::vector<double> values(array.data(), array.data() + array.size());
    return DTensor(std::move(shape), std::move(values));
}

py::array_t<double> array_from_span(std::span<const double> data, const Shape& shape) {
    std::vector<py::ssize_t> dims(shape.begin(), shape.end());
    py::array_t<double> out(dims);
    std::copy(data.begin(), data.end(), out.mutable_data());
    return out;
}

// Context manager owning a graph scope; ops recorded inside it can be
// differentiated with backward().
struct PyTape {
    std::unique_ptr<GraphScope<double>> scope;

    void enter() { scope = std::make_unique<GraphScope<double>>(); }
    void backward(const DTensor& loss) {
        if (!scope) throw ContractError("tape is not active");
        scope->backward(loss);
    }
    void exit() { scope.reset(); }
};

py::tuple dataset_to_arrays(const Dataset& ds) {
    const std::size_t n = ds.size();
    py::array_t<float> images({n, ds.channels, ds.height, ds.width});
    py::array_t<std::int64_t> labels(std::vector<py::ssize_t>{py::ssize_t(n)});
    float* px = images.mutable_data();
    std::int64_t* pl = labels.mutable_data();
    const std::size_t stride = ds.pixel_count();
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(ds.items[i].pixels.begin(), ds.items[i].pixels.end(), px + i * stride);
        pl[i] = ds.items[i].label;
    }
    return py::make_tuple(images, labels);
}

Dataset dataset_from_arrays(
    const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
    const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& labels) {
    if (images.ndim() != 4) throw ContractError("images must have shape [N,C,H,W]");
    if (labels.ndim() != 1 || labels.shape(0) != images.shape(0)) {
        throw ContractError("labels must be one i64 per image");
    }
    Dataset ds;
    ds.channels = static_cast<std::size_t>(images.shape(1));
    ds.height = static_cast<std::size_t>(images.shape(2));
    ds.width = static_cast<std::size_t>(images.shape(3));
    const std::size_t stride = ds.pixel_count();
    ds.items.resize(static_cast<std::size_t>(images.shape(0)));
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        ds.items[i].pixels.assign(images.data() + i * stride,
                                  images.data() + (i + 1) * stride);
        ds.items[i].label = static_cast<int>(labels.data()[i]);
    }
    return ds;
}

TaskData make_task_data(const std::string& kind, std::size_t classes, std::size_t n_train,
                        std::size_t n_test, std::uint64_t seed, std::uint64_t variant,
                        double noise, std::size_t image) {
    DatasetSpec spec;
    spec.num_classes = classes;
    spec.n_train = n_train;
    spec.n_test = n_test;
    spec.image_h = spec.image_w = image;
    spec.generator_seed = seed;
    spec.variant = variant;
    spec.instance_noise = noise;
    if (kind == "upstream") {
        spec.family = DatasetFamily::upstream_shapes;
        return generate_synthetic(spec);
    }
    spec.family = DatasetFamily::downstream_variant;
    if (kind == "template" || kind == "shift") return generate_synthetic(spec);
    if (kind == "cue") return instance_cue_task(spec);
    throw ConfigError("unknown task kind: " + kind);
}

std::string do_pretrain(const std::string& config_json) {
    ExperimentConfig cfg = parse_experiment_config(config_json);
    std::string target = cfg.backbone_path;
    if (target.empty()) {
        target = (std::filesystem::path(cfg.output_dir) / "backbone.ckpt").string();
    }
    auto parent = std::filesystem::path(target).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    auto upstream = generate_synthetic(cfg.upstream);
    if (cfg.pretrain.precision == Precision::f64) {
        save_checkpoint(target, pretrain_backbone<double>(cfg.vit, upstream, cfg.pretrain));
    } else {
        save_checkpoint(target, pretrain_backbone<float>(cfg.vit, upstream, cfg.pretrain));
    }
    return target;
}

std::string do_run_matrix(const std::string& config_json, std::size_t threads) {
    ExperimentConfig cfg = parse_experiment_config(config_json);
    auto record = run_matrix(cfg, threads);
    write_record_outputs(record,
                         (std::filesystem::path(cfg.output_dir) / "matrix").string());
    if (record.any_failed) throw Error("matrix finished with failed cells");
    return csv_summary(record.rows);
}

std::string do_ablate_depth(const std::string& config_json,
                            const std::vector<std::size_t>& depths, std::size_t threads) {
    ExperimentConfig cfg = parse_experiment_config(config_json);
    auto record = ablate_metanet_depth(cfg, depths, threads);
    write_record_outputs(record,
                         (std::filesystem::path(cfg.output_dir) / "ablate_depth").string());
    return csv_summary(record.rows);
}

std::string do_ablate_mode(const std::string& config_json, std::size_t threads) {
    ExperimentConfig cfg = parse_experiment_config(config_json);
    auto record = ablate_prompt_mode(cfg, threads);
    write_record_outputs(record,
                         (std::filesystem::path(cfg.output_dir) / "ablate_mode").string());
    return csv_summary(record.rows);
}

std::string do_sweep(const std::string& config_json, const std::vector<double>& fractions,
                     std::size_t threads) {
    ExperimentConfig cfg = parse_experiment_config(config_json);
    auto sweep = sweep_data_scale(cfg, fractions, threads);
    write_sweep_outputs(sweep, (std::filesystem::path(cfg.output_dir) / "sweep").string());
    return sweep_csv(sweep);
}

py::list do_param_counts(const std::string& config_json) {
    ExperimentConfig cfg = parse_experiment_config(config_json);
    if (cfg.tasks.empty()) throw ConfigError("config needs at least one task");
    std::size_t classes =
        cfg.tasks[0].kind == TaskSpec::Kind::corpus ? 0 : cfg.tasks[0].data.num_classes;
    if (classes == 0) {
        auto data = load_task(cfg.tasks[0]);
        classes = task_num_classes(cfg.tasks[0], data);
    }
    auto backbone = init_backbone<float>(cfg.vit, 0);
    py::list out;
    for (const auto& m : cfg.methods) {
        auto model = build_method(m, backbone, cfg.vit, classes, 0);
        auto count = count_trainable(model);
        py::dict row;
        row["method"] = m.label();
        row["trainable"] = count.total;
        for (const auto& [group, n] : count.by_group) row[group.c_str()] = n;
        out.append(std::move(row));
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "parameter-efficient transfer learning lab (C++ core)";
    m.attr("__version__") = "0.1.0";
    tune_allocator();

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<ShapeError>(m, "ShapeError");
    py::register_exception<IoError>(m, "IoError");

    py::class_<DTensor>(m, "Tensor")
        .def(py::init(&tensor_from_array), py::arg("array"))
        .def_property_readonly("shape",
                               [](const DTensor& t) {
                                   py::tuple s(t.rank());
                                   for (std::size_t i = 0; i < t.rank(); ++i)
                                       s[i] = t.shape()[i];
                                   return s;
                               })
        .def_property("requires_grad", &DTensor::requires_grad,
                      [](DTensor& t, bool on) { t.set_requires_grad(on); })
        .def("numpy", [](const DTensor& t) { return array_from_span(t.values(), t.shape()); })
        .def("grad",
             [](const DTensor& t) -> py::object {
                 if (!t.has_grad()) return py::none();
                 return array_from_span(t.grad(), t.shape());
             })
        .def("item", &DTensor::item);

    py::class_<PyTape>(m, "Tape")
        .def(py::init<>())
        .def("__enter__",
             [](PyTape& t) -> PyTape& {
                 t.enter();
                 return t;
             })
        .def("__exit__",
             [](PyTape& t, py::object, py::object, py::object) {
                 t.exit();
                 return false;
             })
        .def("backward", &PyTape::backward);

    m.def("matmul", &matmul<double>);
    m.def("add", &add<double>);
    m.def("mul", &mul<double>);
    m.def("relu", &relu<double>);
    m.def("gelu", &gelu<double>);
    m.def("softmax", &softmax<double>);
    m.def("layer_norm", &layer_norm<double>, py::arg("x"), py::arg("gamma"), py::arg("beta"),
          py::arg("eps") = 1e-6);
    m.def("sum", &sum_all<double>);
    m.def("mean", &mean_all<double>);
    m.def("cross_entropy", &cross_entropy<double>);

    m.def(
        "gradcheck",
        [](double op_tol, double e2e_tol, std::size_t cases, std::size_t coords) {
            GradcheckOptions opt;
            opt.op_tol = op_tol;
            opt.end_to_end_tol = e2e_tol;
            opt.op_cases = cases;
            opt.coords_per_group = coords;
            GradcheckOutcome outcome;
            {
                py::gil_scoped_release release;
                outcome = run_gradcheck_suite(opt);
            }
            py::dict d;
            d["passed"] = outcome.passed;
            d["seconds"] = outcome.seconds;
            d["report"] = outcome.report;
            return d;
        },
        py::arg("op_tol") = 1e-6, py::arg("e2e_tol") = 1e-4, py::arg("cases") = 100,
        py::arg("coords") = 100);

    m.def(
        "make_task",
        [](const std::string& kind, std::size_t classes, std::size_t n_train,
           std::size_t n_test, std::uint64_t seed, std::uint64_t variant, double noise,
           std::size_t image) {
            auto task =
                make_task_data(kind, classes, n_train, n_test, seed, variant, noise, image);
            return py::make_tuple(dataset_to_arrays(task.train),
                                  dataset_to_arrays(task.test));
        },
        py::arg("kind"), py::arg("classes") = 6, py::arg("n_train") = 400,
        py::arg("n_test") = 240, py::arg("seed") = 1, py::arg("variant") = 0,
        py::arg("noise") = 0.0, py::arg("image") = 16);

    m.def("save_corpus",
          [](const std::string& path, const py::array_t<float>& images,
             const py::array_t<std::int64_t>& labels) {
              save_corpus(path, dataset_from_arrays(images, labels));
          });
    m.def("load_corpus",
          [](const std::string& path) { return dataset_to_arrays(load_corpus(path)); });

    m.def("default_config",
          [] { return experiment_config_to_json(default_experiment_config()); });
    m.def("pretrain", &do_pretrain, py::arg("config_json"),
          py::call_guard<py::gil_scoped_release>());
    m.def("run_matrix", &do_run_matrix, py::arg("config_json"), py::arg("threads") = 1,
          py::call_guard<py::gil_scoped_release>());
    m.def("ablate_depth", &do_ablate_depth, py::arg("config_json"),
          py::arg("depths") = std::vector<std::size_t>{2, 4, 6}, py::arg("threads") = 1,
          py::call_guard<py::gil_scoped_release>());
    m.def("ablate_mode", &do_ablate_mode, py::arg("config_json"), py::arg("threads") = 1,
          py::call_guard<py::gil_scoped_release>());
    m.def("sweep_scale", &do_sweep, py::arg("config_json"),
          py::arg("fractions") = std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7},
          py::arg("threads") = 1, py::call_guard<py::gil_scoped_release>());
    m.def("param_counts", &do_param_counts, py::arg("config_json"));
}
