#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mora/attack.hpp"
#include "mora/defense.hpp"
#include "mora/ensemble.hpp"
#include "mora/errors.hpp"
#include "mora/harness.hpp"
#include "mora/objectives.hpp"
#include "mora/oracle.hpp"

namespace py = pybind11;
using mora::Tensor;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  mora::Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict dataset_dict(const mora::Dataset& d) {
  Array x({static_cast<py::ssize_t>(d.size()), static_cast<py::ssize_t>(d.input_dim)});
  py::array_t<std::int64_t> y(static_cast<py::ssize_t>(d.size()));
  auto xm = x.mutable_unchecked<2>();
  auto ym = y.mutable_unchecked<1>();
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.input_dim; ++j) xm(i, j) = d.inputs[i][j];
    ym(i) = static_cast<std::int64_t>(d.labels[i]);
  }
  py::dict out;
  out["x"] = x;
  out["y"] = y;
  return out;
}

mora::Dataset dataset_from(const Array& x, const py::array_t<std::int64_t>& y,
                           std::size_t num_classes) {
  if (x.ndim() != 2 || y.ndim() != 1 || x.shape(0) != y.shape(0)) {
    throw mora::ContractViolation("expected x of shape (n, d) and y of shape (n,)");
  }
  mora::Dataset d;
  d.input_dim = static_cast<std::size_t>(x.shape(1));
  d.num_classes = num_classes;
  auto xr = x.unchecked<2>();
  auto yr = y.unchecked<1>();
  for (py::ssize_t i = 0; i < x.shape(0); ++i) {
    std::vector<double> row(d.input_dim);
    for (std::size_t j = 0; j < d.input_dim; ++j) row[j] = xr(i, static_cast<py::ssize_t>(j));
    d.inputs.emplace_back(std::move(row));
    if (yr(i) < 0 || static_cast<std::size_t>(yr(i)) >= num_classes) {
      throw mora::ContractViolation("label out of range");
    }
    d.labels.push_back(static_cast<std::size_t>(yr(i)));
  }
  return d;
}

py::dict result_dict(const mora::AttackResult& r) {
  py::dict out;
  out["adversarial_example"] = to_array(r.adversarial_example);
  out["success"] = r.success;
  out["iterations_used"] = r.iterations_used;
  out["sub_fooled"] = r.sub_fooled;
  py::list trace;
  for (const auto& t : r.trace) {
    py::dict rec;
    rec["iteration"] = t.iteration;
    rec["loss"] = t.loss;
    rec["dl_e"] = t.dl_e;
    rec["sub_fooled"] = t.sub_fooled;
    rec["step_size"] = t.step_size;
    trace.append(rec);
  }
  out["trace"] = trace;
  return out;
}

}  // namespace

PYBIND11_MODULE(_mora, m) {
  m.doc() = "Model-reweighing attacks against toy ensemble defenses";
  m.attr("__version__") = std::string(mora::kToolVersion);

  auto error = py::register_exception<mora::Error>(m, "Error", PyExc_RuntimeError);
  auto contract = py::register_exception<mora::ContractViolation>(m, "ContractViolation", error);
  py::register_exception<mora::ParameterError>(m, "ParameterError", contract);
  py::register_exception<mora::MisclassifiedInput>(m, "MisclassifiedInput", contract);
  py::register_exception<mora::ComplexityError>(m, "ComplexityError", contract);
  py::register_exception<mora::DivergenceError>(m, "DivergenceError", error);
  auto io = py::register_exception<mora::IoError>(m, "IoError", error);
  py::register_exception<mora::FormatError>(m, "FormatError", io);
  py::register_exception<mora::SchemaError>(m, "SchemaError", io);
  py::register_exception<mora::ConfigError>(m, "ConfigError", error);

  py::enum_<mora::FormingMode>(m, "FormingMode")
      .value("softmax", mora::FormingMode::softmax)
      .value("voting", mora::FormingMode::voting)
      .value("logits", mora::FormingMode::logits);

  m.def("softmax", [](const Array& z, double tau) { return to_array(mora::softmax_t(to_tensor(z), tau)); },
        py::arg("z"), py::arg("tau") = 1.0);

  py::class_<mora::Ensemble>(m, "Ensemble")
      .def_property_readonly("size", &mora::Ensemble::size)
      .def_property_readonly("input_dim", &mora::Ensemble::input_dim)
      .def_property_readonly("num_classes", &mora::Ensemble::num_classes)
      .def_property_readonly("mode", &mora::Ensemble::mode)
      .def_property_readonly("vote_tau", &mora::Ensemble::vote_tau)
      .def("with_mode", &mora::Ensemble::with_mode)
      .def("sub_logits",
           [](const mora::Ensemble& e, const Array& x) {
             py::list out;
             for (const auto& z : e.forward_subs(to_tensor(x))) out.append(to_array(z));
             return out;
           })
      .def("forward", [](const mora::Ensemble& e, const Array& x) {
        return to_array(e.forward_ensemble(to_tensor(x)));
      })
      .def("hard_decision",
           [](const mora::Ensemble& e, const Array& x, std::optional<std::size_t> y) {
             return e.hard_decision(to_tensor(x), y);
           },
           py::arg("x"), py::arg("true_label") = std::nullopt)
      .def("to_json", [](const mora::Ensemble& e) { return mora::ensemble_to_json(e); })
      .def_static("from_json", [](const std::string& s) { return mora::ensemble_from_json(s); });

  m.def("load_ensemble", &mora::load_ensemble);
  m.def("save_ensemble", &mora::save_ensemble);

  m.def(
      "generate_dataset",
      [](const std::string& generator, std::size_t input_dim, std::size_t num_classes,
         std::size_t samples, double noise, std::uint64_t seed, double test_fraction) {
        mora::DatasetSpec spec{generator, input_dim, num_classes, samples, noise, seed,
                               test_fraction};
        spec.validate();
        const auto split = mora::generate_dataset(spec);
        py::dict out;
        out["train"] = dataset_dict(split.train);
        out["test"] = dataset_dict(split.test);
        return out;
      },
      py::arg("generator") = "blobs", py::arg("input_dim") = 2, py::arg("num_classes") = 2,
      py::arg("samples") = 400, py::arg("noise") = 0.1, py::arg("seed") = 0,
      py::arg("test_fraction") = 0.3);

  m.def(
      "train_ensemble",
      [](const Array& x, const py::array_t<std::int64_t>& y, std::size_t num_classes,
         std::size_t num_models, std::vector<std::size_t> hidden, std::size_t epochs,
         double learning_rate, std::size_t batch_size, const std::string& regularizer,
         double lam, double adv_epsilon, std::size_t adv_steps, const std::string& mode,
         std::uint64_t seed) {
        mora::TrainConfig cfg;
        cfg.num_models = num_models;
        cfg.hidden = std::move(hidden);
        cfg.epochs = epochs;
        cfg.learning_rate = learning_rate;
        cfg.batch_size = batch_size;
        cfg.regularizer = mora::parse_regularizer(regularizer);
        cfg.lambda = lam;
        cfg.adv_epsilon = adv_epsilon;
        cfg.adv_steps = adv_steps;
        cfg.mode = mora::parse_forming_mode(mode);
        cfg.seed = seed;
        cfg.validate();
        py::gil_scoped_release release;
        return mora::train_ensemble(cfg, dataset_from(x, y, num_classes)).ensemble;
      },
      py::arg("x"), py::arg("y"), py::arg("num_classes"), py::arg("num_models") = 3,
      py::arg("hidden") = std::vector<std::size_t>{32}, py::arg("epochs") = 60,
      py::arg("learning_rate") = 0.5, py::arg("batch_size") = 32,
      py::arg("regularizer") = "none", py::arg("lam") = 0.0, py::arg("adv_epsilon") = 0.0,
      py::arg("adv_steps") = 0, py::arg("mode") = "softmax", py::arg("seed") = 0);

  m.def(
      "grad_cosine_mean",
      [](const mora::Ensemble& e, const Array& x, const py::array_t<std::int64_t>& y)
          -> std::optional<double> {
        const auto stats = mora::grad_cosine_stats(e, dataset_from(x, y, e.num_classes()));
        if (!stats) return std::nullopt;
        return stats->mean;
      });

  py::class_<mora::AttackConfig>(m, "AttackConfig")
      .def(py::init<>())
      .def_readwrite("epsilon", &mora::AttackConfig::epsilon)
      .def_readwrite("iterations", &mora::AttackConfig::iterations)
      .def_readwrite("nu", &mora::AttackConfig::nu)
      .def_readwrite("attack_tau", &mora::AttackConfig::attack_tau)
      .def_readwrite("beta_schedule", &mora::AttackConfig::beta_schedule)
      .def_readwrite("per_beta_iterations", &mora::AttackConfig::per_beta_iterations)
      .def_readwrite("mt_iterations_per_target", &mora::AttackConfig::mt_iterations_per_target)
      .def_readwrite("mt_beta", &mora::AttackConfig::mt_beta)
      .def_readwrite("restarts", &mora::AttackConfig::restarts)
      .def_readwrite("pgd_step", &mora::AttackConfig::pgd_step)
      .def_readwrite("seed", &mora::AttackConfig::seed)
      .def_readwrite("literal_momentum", &mora::AttackConfig::literal_momentum)
      .def("validate", &mora::AttackConfig::validate);

  m.def(
      "attack",
      [](const std::string& name, const mora::Ensemble& e, const Array& x, std::size_t y,
         const mora::AttackConfig& cfg, std::uint64_t stream) {
        if (!mora::is_known_attack(name)) throw mora::ConfigError("unknown attack '" + name + "'");
        const Tensor xt = to_tensor(x);
        mora::AttackResult r;
        {
          py::gil_scoped_release release;
          r = mora::run_named_attack(name, e, xt, y, cfg, stream);
        }
        return result_dict(r);
      },
      py::arg("name"), py::arg("ensemble"), py::arg("x"), py::arg("y"),
      py::arg("config") = mora::AttackConfig{}, py::arg("stream") = 0);

  m.def(
      "mora_attack",
      [](const mora::Ensemble& e, const Array& x, std::size_t y, double beta,
         const mora::AttackConfig& cfg, std::uint64_t stream) {
        return result_dict(mora::mora_attack(e, to_tensor(x), y, beta, cfg, false, stream));
      },
      py::arg("ensemble"), py::arg("x"), py::arg("y"), py::arg("beta"),
      py::arg("config") = mora::AttackConfig{}, py::arg("stream") = 0);

  m.def(
      "verify_success",
      [](const mora::Ensemble& e, const Array& x, std::size_t y, double eps, const Array& adv) {
        return mora::verify_success(e, to_tensor(x), y, eps, to_tensor(adv));
      });

  m.def(
      "importance_weight",
      [](const Array& z, std::size_t y, const std::string& mode, double tau, std::size_t M) {
        return mora::importance_weight(to_tensor(z), y, mora::parse_forming_mode(mode), tau, M);
      },
      py::arg("z"), py::arg("y"), py::arg("mode") = "softmax", py::arg("tau") = 1.0,
      py::arg("num_models") = 1);

  m.def(
      "mora_loss",
      [](const std::vector<Array>& subs, const Array& z_e, std::size_t y, const std::string& mode,
         double tau, double beta) {
        std::vector<Tensor> zs;
        for (const auto& s : subs) zs.push_back(to_tensor(s));
        mora::ObjectiveContext ctx;
        ctx.label = y;
        ctx.mode = mora::parse_forming_mode(mode);
        ctx.attack_tau = tau;
        ctx.beta = beta;
        ctx.num_models = zs.size();
        return mora::mora_loss(zs, to_tensor(z_e), ctx);
      },
      py::arg("sub_logits"), py::arg("z_e"), py::arg("y"), py::arg("mode") = "softmax",
      py::arg("tau") = 5.0, py::arg("beta") = 0.5);

  m.def(
      "brute_force_robust",
      [](const mora::Ensemble& e, const Array& x, std::size_t y, double eps,
         std::size_t resolution, std::size_t threads) {
        const auto v = mora::brute_force_robust(e, to_tensor(x), y, eps, resolution, threads);
        py::dict out;
        out["vulnerable"] = v.vulnerable;
        out["witness"] = v.witness ? py::object(to_array(*v.witness)) : py::object(py::none());
        out["grid_resolution"] = v.grid_resolution;
        return out;
      },
      py::arg("ensemble"), py::arg("x"), py::arg("y"), py::arg("epsilon"),
      py::arg("resolution") = mora::kDefaultOracleResolution, py::arg("threads") = 1);

  m.def(
      "check_weight_formula",
      [](const std::string& mode, double tau, std::size_t num_classes, std::size_t trials,
         std::uint64_t seed) {
        return mora::check_weight_formula(mora::parse_forming_mode(mode), tau, num_classes,
                                          trials, seed);
      },
      py::arg("mode"), py::arg("tau"), py::arg("num_classes"), py::arg("trials") = 1000,
      py::arg("seed") = 0);

  m.def(
      "run_command",
      [](const std::string& verb, const std::filesystem::path& config,
         const std::filesystem::path& out, std::optional<std::uint64_t> seed,
         std::optional<std::size_t> threads) {
        auto cfg = mora::load_run_config(config);
        mora::apply_overrides(cfg, seed, threads);
        py::gil_scoped_release release;
        mora::run_command(verb, cfg, out, config);
      },
      py::arg("verb"), py::arg("config"), py::arg("out"), py::arg("seed") = std::nullopt,
      py::arg("threads") = std::nullopt);
}
