#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "lbyl/error.hpp"
#include "lbyl/harness.hpp"

namespace py = pybind11;
using namespace lbyl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor3 to_tensor3(const Array& a) {
  if (a.ndim() != 3) throw Error(ErrorCode::kShapeMismatch, "expected a (c, w, h) array");
  const Shape3 s{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                 static_cast<std::size_t>(a.shape(2))};
  return Tensor3(s, std::vector<double>(a.data(), a.data() + a.size()));
}

Array from_tensor3(const Tensor3& t) {
  const Shape3 s = t.shape();
  Array out({s.c, s.w, s.h});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Dataset to_dataset(const Array& inputs, const std::vector<std::int32_t>& labels) {
  if (inputs.ndim() != 4) throw Error(ErrorCode::kShapeMismatch, "inputs must be (N, c, w, h)");
  Dataset d;
  d.sample_shape = {static_cast<std::size_t>(inputs.shape(1)), static_cast<std::size_t>(inputs.shape(2)),
                    static_cast<std::size_t>(inputs.shape(3))};
  const std::size_t per = d.sample_shape.numel();
  for (py::ssize_t i = 0; i < inputs.shape(0); ++i) {
    const double* p = inputs.data() + i * static_cast<py::ssize_t>(per);
    d.inputs.emplace_back(d.sample_shape, std::vector<double>(p, p + per));
  }
  d.labels = labels;
  if (d.labels.size() != d.inputs.size()) throw Error(ErrorCode::kShapeMismatch, "one label per input required");
  return d;
}

std::optional<BatchNormParams> to_bn(const std::optional<py::dict>& bn) {
  if (!bn) return std::nullopt;
  BatchNormParams out;
  out.gamma = (*bn)["gamma"].cast<std::vector<double>>();
  out.beta = (*bn)["beta"].cast<std::vector<double>>();
  out.mu = (*bn)["mean"].cast<std::vector<double>>();
  out.sigma = (*bn)["std"].cast<std::vector<double>>();
  out.validate();
  return out;
}

const Dataset* maybe(const std::optional<Dataset>& d) { return d ? &*d : nullptr; }

}  // namespace

PYBIND11_MODULE(_lbyl, m) {
  m.doc() = "Native core of the lbyl package";

  // Leaked on purpose: the type must outlive every translated exception.
  static py::handle error_type = (new py::exception<Error>(m, "LbylError"))->ptr();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      static const char* const kCategory[] = {"config", "numerical", "io"};
      py::object exc = error_type(std::string(to_string(e.code())) + ": " + e.what());
      exc.attr("code") = std::string(to_string(e.code()));
      exc.attr("category") = kCategory[static_cast<int>(category_of(e.code()))];
      PyErr_SetObject(error_type.ptr(), exc.ptr());
    }
  });

  py::class_<NetworkModel>(m, "Model")
      .def_static("from_bytes", [](const py::bytes& b) {
        const std::string s = b;
        return deserialize(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
      })
      .def("to_bytes", [](const NetworkModel& model) {
        const auto bytes = serialize(model);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      })
      .def_static("load", [](const std::string& path) { return load_model(path); })
      .def("save", [](const NetworkModel& model, const std::string& path) { save_model(path, model); })
      .def_property_readonly("input_shape",
                             [](const NetworkModel& model) {
                               return py::make_tuple(model.input_shape.c, model.input_shape.w, model.input_shape.h);
                             })
      .def_property_readonly("layer_kinds",
                             [](const NetworkModel& model) {
                               std::vector<std::string> kinds;
                               for (const LayerSpec& l : model.layers) kinds.emplace_back(to_string(l.kind));
                               return kinds;
                             })
      .def_property_readonly("id", [](const NetworkModel& model) { return model_id(model); })
      .def("forward", [](const NetworkModel& model, const Array& x) { return from_tensor3(forward(model, to_tensor3(x))); })
      .def("__eq__", [](const NetworkModel& a, const NetworkModel& b) { return a == b; });

  m.def("generate", &generate_synthetic, py::arg("arch"), py::arg("seed") = 0, py::arg("scale") = 1);

  m.def(
      "probe_data",
      [](std::size_t count, std::uint64_t seed, std::tuple<std::size_t, std::size_t, std::size_t> shape,
         std::size_t classes) {
        const auto [c, w, h] = shape;
        const Dataset d = generate_probe_data(count, seed, {c, w, h}, classes);
        Array inputs({count, c, w, h});
        double* out = inputs.mutable_data();
        for (const Tensor3& x : d.inputs) out = std::copy(x.values().begin(), x.values().end(), out);
        return py::make_tuple(inputs, d.labels);
      },
      py::arg("count") = kDefaultProbeCount, py::arg("seed") = 0, py::arg("shape") = std::make_tuple(3, 8, 8),
      py::arg("classes") = 10);

  m.def(
      "accuracy",
      [](const NetworkModel& model, const Array& inputs, const std::vector<std::int32_t>& labels) {
        return accuracy(model, to_dataset(inputs, labels));
      },
      py::arg("model"), py::arg("inputs"), py::arg("labels"));

  m.def(
      "plan",
      [](const NetworkModel& model, const std::string& criterion, double ratio, const std::string& scheme) {
        const Criterion c = Criterion::parse(criterion);
        if (scheme == "resnet") return plan_to_json(plan_resnet(model, c, ratio));
        if (scheme == "layerwise") return plan_to_json(plan_layerwise(model, c, ratio));
        throw Error(ErrorCode::kConfig, "unknown scheme '" + scheme + "'");
      },
      py::arg("model"), py::arg("criterion") = "l2", py::arg("ratio") = 0.3, py::arg("scheme") = "layerwise");

  m.def(
      "restore",
      [](const NetworkModel& model, const std::string& plan, const std::string& method, double lambda1,
         double lambda2, double nm_lambda, double nm_threshold) {
        return restore(model, plan_from_json(plan), method_from_string(method), {lambda1, lambda2},
                       {nm_lambda, nm_threshold})
            .model;
      },
      py::arg("model"), py::arg("plan"), py::arg("method") = "lbyl", py::arg("lambda1") = Hyperparams{}.lambda1,
      py::arg("lambda2") = Hyperparams{}.lambda2, py::arg("nm_lambda") = NmParams{}.lambda_mix,
      py::arg("nm_threshold") = NmParams{}.threshold);

  m.def(
      "evaluate",
      [](const NetworkModel& model, const std::string& plan, const std::string& method, double lambda1,
         double lambda2, std::optional<Array> inputs, std::optional<std::vector<std::int32_t>> labels) {
        std::optional<Dataset> probes;
        if (inputs) {
          probes = to_dataset(*inputs, labels ? *labels : std::vector<std::int32_t>(inputs->shape(0), 0));
        }
        Evaluation e = evaluate_restoration(model, plan_from_json(plan), method_from_string(method),
                                            {lambda1, lambda2}, NmParams{}, maybe(probes));
        return py::make_tuple(std::move(e.restored.model), emit_report(e.report, ReportFormat::kJson));
      },
      py::arg("model"), py::arg("plan"), py::arg("method") = "lbyl", py::arg("lambda1") = Hyperparams{}.lambda1,
      py::arg("lambda2") = Hyperparams{}.lambda2, py::arg("inputs") = py::none(), py::arg("labels") = py::none());

  m.def(
      "compare",
      [](const NetworkModel& model, const std::string& plan, const std::vector<std::string>& methods,
         const Array& inputs) {
        std::vector<Method> ms;
        for (const auto& name : methods) ms.push_back(method_from_string(name));
        const Dataset probes = to_dataset(inputs, std::vector<std::int32_t>(inputs.shape(0), 0));
        return compare_to_json(run_compare(model, plan_from_json(plan), ms, {}, {}, &probes));
      },
      py::arg("model"), py::arg("plan"), py::arg("methods") = std::vector<std::string>{"lbyl", "nm", "none"},
      py::arg("inputs"));

  m.def(
      "global_prune",
      [](const NetworkModel& model, const std::string& criterion, double threshold, double step, double max_ratio,
         const Array& inputs) {
        const Dataset probes = to_dataset(inputs, std::vector<std::int32_t>(inputs.shape(0), 0));
        GlobalPruneResult r =
            global_adaptive_prune(model, Criterion::parse(criterion), {threshold, step, max_ratio}, {}, probes);
        return py::make_tuple(std::move(r.model), plan_to_json(r.plan), emit_report(r.report, ReportFormat::kJson));
      },
      py::arg("model"), py::arg("criterion") = "l2", py::arg("threshold") = 0.3, py::arg("step") = 0.1,
      py::arg("max_ratio") = 0.9, py::arg("inputs"));

  m.def(
      "sweep",
      [](const NetworkModel& model, const std::string& plan, const std::string& grid, const Array& inputs) {
        const Dataset probes = to_dataset(inputs, std::vector<std::int32_t>(inputs.shape(0), 0));
        return sweep_to_json(sweep_lambdas(model, plan_from_json(plan), parse_grid(grid), probes));
      },
      py::arg("model"), py::arg("plan"), py::arg("grid"), py::arg("inputs"));

  // Single-filter solve on a raw (m, d) filter bank, for direct experiments.
  m.def(
      "solve_coefficients",
      [](const Array& bank, std::size_t pruned, const std::vector<std::size_t>& kept, std::optional<py::dict> bn,
         double lambda1, double lambda2) {
        if (bank.ndim() != 2) throw Error(ErrorCode::kShapeMismatch, "bank must be (m, d)");
        const Matrix mat(static_cast<std::size_t>(bank.shape(0)), static_cast<std::size_t>(bank.shape(1)),
                         std::vector<double>(bank.data(), bank.data() + bank.size()));
        const std::optional<BatchNormParams> norm = to_bn(bn);
        const ScaledBasis basis = build_scaled_basis(mat, norm ? &*norm : nullptr, pruned, kept);
        const Vector s = solve_coefficients(basis, {lambda1, lambda2});
        return std::vector<double>(s.values().begin(), s.values().end());
      },
      py::arg("bank"), py::arg("pruned"), py::arg("kept"), py::arg("bn") = py::none(),
      py::arg("lambda1") = Hyperparams{}.lambda1, py::arg("lambda2") = Hyperparams{}.lambda2);
}
