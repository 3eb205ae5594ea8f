#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "flatmin/cli.hpp"
#include "flatmin/config.hpp"
#include "flatmin/flatness.hpp"
#include "flatmin/optimizers.hpp"
#include "flatmin/shiftbench.hpp"
#include "flatmin/training.hpp"

namespace py = pybind11;
using namespace flatmin;

namespace {

Batch to_batch(const Objective& obj, const std::optional<std::vector<std::size_t>>& indices) {
  if (!indices) return Batch::full();
  return Batch::of(*indices, obj.num_samples());
}

nlohmann::json parse(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(e.what());
  }
}

py::dict trace_dict(const StepTrace& tr) {
  py::dict d;
  d["t"] = tr.t;
  d["g0"] = tr.g0;
  d["g1"] = tr.g1;
  d["g2"] = tr.g2;
  d["g3"] = tr.g3;
  d["h0"] = tr.h0;
  d["h1"] = tr.h1;
  d["delta"] = tr.delta;
  d["eta_t"] = tr.eta_t;
  d["rho_t"] = tr.rho_t;
  d["loss_before"] = tr.loss_before;
  d["fad_applied"] = tr.fad_applied;
  d["grad_evals"] = tr.grad_evals;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Flatness-aware optimisers, flatness estimators and a domain-shift benchmark.";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  py::register_exception<DegenerateDirectionError>(m, "DegenerateDirectionError", base.ptr());
  py::register_exception<BatchSizeError>(m, "BatchSizeError", base.ptr());
  py::register_exception<BudgetError>(m, "BudgetError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<InsufficientDataError>(m, "InsufficientDataError", base.ptr());
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());

  py::class_<Dataset, std::shared_ptr<Dataset>>(m, "Dataset")
      .def(py::init([](RowMatrix inputs, std::vector<int> labels, std::vector<int> domain_ids, int num_classes) {
             auto d = std::make_shared<Dataset>();
             d->inputs = std::move(inputs);
             d->labels = std::move(labels);
             d->domain_ids = domain_ids.empty() ? std::vector<int>(d->labels.size(), 0) : std::move(domain_ids);
             d->num_classes = num_classes;
             d->validate();
             return d;
           }),
           py::arg("inputs"), py::arg("labels"), py::arg("domain_ids") = std::vector<int>{},
           py::arg("num_classes"))
      .def_readonly("inputs", &Dataset::inputs)
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("domain_ids", &Dataset::domain_ids)
      .def_readonly("num_classes", &Dataset::num_classes)
      .def("__len__", &Dataset::size);

  m.def(
      "generate_domains",
      [](const std::string& spec, std::uint64_t seed) {
        const auto doc = parse(spec);
        auto md = generate_domains(parse_domain_spec(ConfigReader(doc, "domain spec")), seed);
        std::vector<std::shared_ptr<Dataset>> out;
        for (auto& d : md.domains) out.push_back(std::make_shared<Dataset>(std::move(d)));
        return out;
      },
      py::arg("spec_json"), py::arg("seed"));

  py::class_<Objective, std::shared_ptr<Objective>>(m, "Objective")
      .def_property_readonly("dim", &Objective::dim)
      .def_property_readonly("kind", &Objective::kind)
      .def_property_readonly("num_samples", &Objective::num_samples)
      .def(
          "loss",
          [](const Objective& o, const ParamVector& theta, std::optional<std::vector<std::size_t>> idx) {
            return o.loss(theta, to_batch(o, idx));
          },
          py::arg("theta"), py::arg("batch") = py::none())
      .def(
          "grad",
          [](const Objective& o, const ParamVector& theta, std::optional<std::vector<std::size_t>> idx) {
            return o.grad(theta, to_batch(o, idx));
          },
          py::arg("theta"), py::arg("batch") = py::none());

  py::class_<QuadraticObjective, Objective, std::shared_ptr<QuadraticObjective>>(m, "QuadraticObjective")
      .def(py::init<Eigen::MatrixXd>(), py::arg("hessian"))
      .def_static(
          "diagonal", [](const Eigen::VectorXd& d) { return std::make_shared<QuadraticObjective>(QuadraticObjective::diagonal(d)); },
          py::arg("diag"))
      .def_property_readonly("hessian", &QuadraticObjective::hessian);

  py::class_<RosenbrockObjective, Objective, std::shared_ptr<RosenbrockObjective>>(m, "RosenbrockObjective")
      .def(py::init<std::size_t>(), py::arg("dim") = 2);

  py::class_<DoubleWellObjective, Objective, std::shared_ptr<DoubleWellObjective>>(m, "DoubleWellObjective")
      .def(py::init([](double sc, double sk, double sd, double fc, double fk, double fd) {
             return std::make_shared<DoubleWellObjective>(DoubleWellParams{sc, sk, sd, fc, fk, fd});
           }),
           py::arg("sharp_center") = -1.0, py::arg("sharp_curvature") = 50.0, py::arg("sharp_depth") = 0.0,
           py::arg("flat_center") = 1.0, py::arg("flat_curvature") = 2.0, py::arg("flat_depth") = 0.0);

  py::class_<MlpObjective, Objective, std::shared_ptr<MlpObjective>>(m, "MlpObjective")
      .def(py::init([](std::vector<int> layers, std::shared_ptr<Dataset> data) {
             return std::make_shared<MlpObjective>(std::move(layers), std::move(data));
           }),
           py::arg("layer_sizes"), py::arg("data"))
      .def("init_params", &MlpObjective::init_params, py::arg("seed"))
      .def("predict", &MlpObjective::predict, py::arg("theta"), py::arg("inputs"))
      .def("accuracy", &MlpObjective::accuracy, py::arg("theta"), py::arg("data"));

  m.def(
      "objective_from_json",
      [](const std::string& text) -> std::shared_ptr<Objective> {
        const auto doc = parse(text);
        return build_objective(parse_objective(ConfigReader(doc, "objective")));
      },
      py::arg("spec_json"));

  py::class_<OptimizerConfig>(m, "OptimizerConfig")
      .def(py::init<>())
      .def_static(
          "from_json", [](const std::string& text) {
            const auto doc = parse(text);
            return parse_optimizer(ConfigReader(doc, "optimizer"));
          },
          py::arg("text"))
      .def("to_json", [](const OptimizerConfig& c) { return to_json(c).dump(); })
      .def_property(
          "method", [](const OptimizerConfig& c) { return std::string(to_string(c.method)); },
          [](OptimizerConfig& c, const std::string& s) { c.method = parse_method(s); })
      .def_property(
          "schedule", [](const OptimizerConfig& c) { return std::string(to_string(c.schedule)); },
          [](OptimizerConfig& c, const std::string& s) { c.schedule = parse_schedule(s); })
      .def_readwrite("eta0", &OptimizerConfig::eta0)
      .def_readwrite("rho0", &OptimizerConfig::rho0)
      .def_readwrite("alpha", &OptimizerConfig::alpha)
      .def_readwrite("beta", &OptimizerConfig::beta)
      .def_readwrite("xi", &OptimizerConfig::xi)
      .def_readwrite("fad_ratio", &OptimizerConfig::fad_ratio)
      .def_readwrite("momentum", &OptimizerConfig::momentum)
      .def_readwrite("adam_beta1", &OptimizerConfig::adam_beta1)
      .def_readwrite("adam_beta2", &OptimizerConfig::adam_beta2)
      .def_readwrite("adam_eps", &OptimizerConfig::adam_eps)
      .def_readwrite("weight_decay", &OptimizerConfig::weight_decay)
      .def("validate", &OptimizerConfig::validate);

  py::class_<OptimizerState>(m, "OptimizerState")
      .def(py::init<std::size_t, std::uint64_t>(), py::arg("dim"), py::arg("seed") = 0)
      .def_readonly("t", &OptimizerState::t);

  m.def(
      "step",
      [](const Objective& obj, const ParamVector& theta, OptimizerState& state, const OptimizerConfig& config,
         std::optional<std::vector<std::size_t>> idx) {
        auto r = optimizer_step(obj, theta, state, config, to_batch(obj, idx));
        return py::make_tuple(r.theta, trace_dict(r.trace));
      },
      py::arg("objective"), py::arg("theta"), py::arg("state"), py::arg("config"), py::arg("batch") = py::none());

  m.def(
      "train",
      [](const Objective& obj, const ParamVector& theta0, const OptimizerConfig& config, std::int64_t iterations,
         std::size_t batch_size, std::uint64_t seed, bool keep_traces) {
        TrainingOptions opts;
        opts.iterations = iterations;
        opts.batch_size = batch_size;
        opts.seed = seed;
        opts.keep_traces = keep_traces;
        std::ostringstream csv;
        CsvLogSink sink(csv);
        TrainingResult r;
        {
          py::gil_scoped_release release;
          r = run_training(obj, theta0, config, opts, &sink);
        }
        py::list traces;
        for (const auto& t : r.record.traces) traces.append(trace_dict(t));
        py::dict out;
        out["theta"] = r.theta;
        out["log_csv"] = csv.str();
        out["grad_evals"] = r.record.grad_evals;
        out["loop_ms"] = r.record.loop_ms;
        out["traces"] = traces;
        return out;
      },
      py::arg("objective"), py::arg("theta0"), py::arg("config"), py::arg("iterations") = 100,
      py::arg("batch_size") = 0, py::arg("seed") = 0, py::arg("keep_traces") = false);

  m.def(
      "hvp_fd",
      [](const Objective& obj, const ParamVector& theta, const ParamVector& v, double h) {
        return hvp_fd(obj, theta, v, Batch::full(), h);
      },
      py::arg("objective"), py::arg("theta"), py::arg("v"), py::arg("h") = kDefaultFdStep);

  m.def(
      "zeroth_order_flatness",
      [](const Objective& obj, const ParamVector& theta, double rho, int n_random, int n_steps, double step,
         std::uint64_t seed) {
        return zeroth_order_flatness(obj, theta, rho, Batch::full(), AscentBudget{n_random, n_steps, step}, seed);
      },
      py::arg("objective"), py::arg("theta"), py::arg("rho"), py::arg("n_random") = 16,
      py::arg("n_ascent_steps") = 50, py::arg("ascent_step") = 1.0, py::arg("seed") = 0);
  m.def(
      "first_order_flatness",
      [](const Objective& obj, const ParamVector& theta, double rho, int n_random, int n_steps, double step,
         std::uint64_t seed) {
        return first_order_flatness(obj, theta, rho, Batch::full(), AscentBudget{n_random, n_steps, step}, seed);
      },
      py::arg("objective"), py::arg("theta"), py::arg("rho"), py::arg("n_random") = 16,
      py::arg("n_ascent_steps") = 50, py::arg("ascent_step") = 1.0, py::arg("seed") = 0);
  m.def("lambda_max_from_fad", &lambda_max_from_fad, py::arg("r_fad"), py::arg("rho"), py::arg("alpha"));

  m.def(
      "power_iteration",
      [](const Objective& obj, const ParamVector& theta, int k, double tol, int max_iter, std::uint64_t seed) {
        PowerIterationOptions o;
        o.k = k;
        o.tol = tol;
        o.max_iter = max_iter;
        auto e = power_iteration(obj, theta, Batch::full(), o, seed);
        return py::make_tuple(e.values, e.converged);
      },
      py::arg("objective"), py::arg("theta"), py::arg("k") = 1, py::arg("tol") = 1e-8, py::arg("max_iter") = 1000,
      py::arg("seed") = 0);
  m.def(
      "hutchinson_trace",
      [](const Objective& obj, const ParamVector& theta, int n_probes, std::uint64_t seed) {
        auto t = hutchinson_trace(obj, theta, Batch::full(), n_probes, kDefaultFdStep, seed);
        return py::make_tuple(t.mean, t.std_error);
      },
      py::arg("objective"), py::arg("theta"), py::arg("n_probes") = 100, py::arg("seed") = 0);
  m.def(
      "flatness_report",
      [](const Objective& obj, const ParamVector& theta, const std::string& options) {
        const auto doc = parse(options);
        const auto opts = parse_flatness(ConfigReader(doc, "flatness"));
        return to_json(flatness_report(obj, theta, Batch::full(), opts)).dump();
      },
      py::arg("objective"), py::arg("theta"), py::arg("options_json") = "{}");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
