#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fednorm/analysis.hpp"
#include "fednorm/cli.hpp"
#include "fednorm/equivalence.hpp"
#include "fednorm/errors.hpp"
#include "fednorm/federation.hpp"
#include "fednorm/gradient_suite.hpp"
#include "fednorm/normalization.hpp"

namespace py = pybind11;
using namespace fednorm;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    if (shape.empty()) shape = {1};
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

py::object to_python(const Json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

Json from_python(const py::object& o) {
    return Json::parse(py::cast<std::string>(py::module_::import("json").attr("dumps")(o)));
}

Dataset make_dataset(const Array& inputs, std::vector<int> labels, std::size_t num_classes) {
    Dataset d{to_tensor(inputs), std::move(labels), num_classes};
    validate(d);
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Federated learning with feature and layer normalization";
    m.attr("__version__") = version();

    // Later registrations are tried first, so the base class goes first.
    auto base = py::register_exception<Error>(m, "FednormError");
    py::register_exception<ConfigError>(m, "ConfigError", base);
    py::register_exception<ShapeError>(m, "ShapeError", base);
    py::register_exception<FormatError>(m, "FormatError", base);
    py::register_exception<NumericError>(m, "NumericError", base);
    py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base);

    // Normalizations on the rows of a matrix (or a single vector).
    m.def("scale_normalize", [](const Array& x, double eps) { return to_array(scale_normalize(to_tensor(x), eps)); },
          py::arg("x"), py::arg("eps") = kDefaultEpsilon);
    m.def("mv_normalize", [](const Array& x, double eps) { return to_array(mv_normalize(to_tensor(x), eps)); },
          py::arg("x"), py::arg("eps") = kDefaultEpsilon);
    m.def("singular_values", [](const Array& x) { return svd_singular_values(to_tensor(x)); }, py::arg("matrix"));

    py::class_<Dataset>(m, "Dataset")
        .def(py::init(&make_dataset), py::arg("inputs"), py::arg("labels"), py::arg("num_classes"))
        .def_property_readonly("inputs", [](const Dataset& d) { return to_array(d.inputs); })
        .def_readonly("labels", &Dataset::labels)
        .def_readonly("num_classes", &Dataset::num_classes)
        .def("__len__", &Dataset::size)
        .def("class_counts", &Dataset::class_counts);

    m.def("gaussian_mixture", &generate_gaussian_mixture, py::arg("num_classes"), py::arg("samples_per_class"),
          py::arg("dim"), py::arg("separation"), py::arg("seed"));
    m.def("train_test_split", &train_test_split, py::arg("dataset"), py::arg("test_fraction"), py::arg("seed"));
    m.def(
        "partition",
        [](const Dataset& d, const std::string& scheme, std::size_t num_clients, std::size_t n, double beta,
           std::uint64_t seed) {
            PartitionPlan plan{parse_partition_scheme(scheme), num_clients, n, beta, seed};
            py::list out;
            for (const auto& s : partition(d, plan)) {
                py::dict rec = to_python(to_json(s));
                rec["indices"] = s.indices;
                out.append(rec);
            }
            return out;
        },
        py::arg("dataset"), py::arg("scheme") = "n_class", py::arg("num_clients") = 10, py::arg("n") = 1,
        py::arg("beta") = 0.5, py::arg("seed") = 0);

    py::class_<Model>(m, "Model")
        .def_property_readonly("spec", [](const Model& mdl) { return to_python(to_json(mdl.spec())); })
        .def_property_readonly("norm_mode", [](const Model& mdl) { return to_string(mdl.spec().norm_mode); })
        .def(
            "predict",
            [](const Model& mdl, const Array& x) {
                auto [logits, features] = mdl.predict(to_tensor(x));
                return py::make_tuple(to_array(logits), to_array(features));
            },
            py::arg("inputs"), "Eval-mode (logits, features).")
        .def("parameters",
             [](const Model& mdl) {
                 py::dict out;
                 for (const auto& e : mdl.params().entries) out[py::str(e.name)] = to_array(e.value);
                 return out;
             })
        .def("with_norm_mode", [](const Model& mdl, const std::string& mode) {
            return mdl.with_norm_mode(parse_norm_mode(mode));
        })
        .def("save", [](const Model& mdl, const std::string& path) { save_checkpoint(path, mdl); })
        .def("to_checkpoint", &checkpoint_string);

    m.def(
        "mlp",
        [](std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t num_classes,
           const std::string& norm_mode, const std::string& bias_policy, double neg_slope, std::uint64_t seed) {
            auto spec = mlp_spec(input_dim, hidden, num_classes, parse_norm_mode(norm_mode),
                                 parse_bias_policy(bias_policy));
            spec.activation = Activation::leaky_relu(1.0, neg_slope);
            return build(spec, seed);
        },
        py::arg("input_dim"), py::arg("hidden"), py::arg("num_classes"), py::arg("norm_mode") = "none",
        py::arg("bias_policy") = "first_layer_only", py::arg("neg_slope") = 0.0, py::arg("seed") = 0);
    m.def("load_model", &load_checkpoint, py::arg("path"));
    m.def("model_from_checkpoint", &model_from_checkpoint_string, py::arg("text"));

    m.def(
        "spectral_gap",
        [](const Model& mdl, const Array& samples) { return to_python(to_json(spectral_gap(mdl, to_tensor(samples)))); },
        py::arg("model"), py::arg("samples"));

    m.def(
        "verify",
        [](const std::string& suite, std::uint64_t seed, std::size_t trials, bool inject_bias) {
            VerifyOptions o{suite, seed, trials, inject_bias};
            std::ostringstream out, err;
            const int code = cmd_verify(o, out, err);
            py::list reports;
            std::istringstream lines(out.str());
            for (std::string line; std::getline(lines, line);) reports.append(to_python(Json::parse(line)));
            return py::make_tuple(code == kExitOk, reports);
        },
        py::arg("suite") = "all", py::arg("seed") = 1, py::arg("trials") = 100, py::arg("inject_bias") = false,
        "Runs a verification suite; returns (all_passed, reports).");

    m.def("default_config", [] { return to_python(to_json(ExperimentConfig{})); });
    m.def(
        "run_experiment",
        [](const py::object& config, std::size_t threads) {
            const ExperimentConfig c = config_from_json(from_python(config));
            const PreparedExperiment p = prepare(c);
            ExperimentResult result;
            {
                py::gil_scoped_release release;
                result = run_experiment(experiment_inputs(p, c, threads));
            }
            py::list records;
            for (const auto& r : result.records) records.append(to_python(to_json(r)));
            return py::make_tuple(records, result.final_model);
        },
        py::arg("config"), py::arg("threads") = 1,
        "Runs a federated experiment from a config dict; returns (round records, final model).");
}
