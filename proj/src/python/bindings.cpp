// Python bindings. JSON-shaped values (configs, reports) cross the boundary
// as strings and are decoded by the pure-Python wrapper.

#include "intapt/error.hpp"
#include "intapt/json_io.hpp"
#include "intapt/pipeline.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace intapt;

namespace {

ExperimentConfig parse_config(const std::string &text) {
  ExperimentConfig c;
  try {
    c = nlohmann::json::parse(text).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

std::string dump(const nlohmann::json &j) { return j.dump(); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "INTapt desk-scale experiment library";

  static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
  static py::exception<ConfigError> config_error(m, "ConfigError", error.ptr());
  static py::exception<StageError> stage_error(m, "StageError", error.ptr());
  static py::exception<InvariantViolation> invariant(m, "InvariantViolation", error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError &e) {
      PyErr_SetString(config_error.ptr(), e.what());
    } catch (const StageError &e) {
      PyErr_SetString(stage_error.ptr(), e.what());
    } catch (const InvariantViolation &e) {
      PyErr_SetString(invariant.ptr(), e.what());
    } catch (const Error &e) {
      PyErr_SetString(error.ptr(), e.what());
    }
  });

  // --- CTC ------------------------------------------------------------------
  m.def("ctc_loss", [](const Matrix &log_probs, const std::vector<int> &target) {
    return ctc::loss(log_probs, target);
  }, py::arg("log_probs"), py::arg("target"));
  m.def("ctc_loss_and_grad", [](const Matrix &log_probs, const std::vector<int> &target) {
    ctc::LossAndGrad lg = ctc::loss_and_grad(log_probs, target);
    return py::make_tuple(lg.loss, lg.grad);
  }, py::arg("log_probs"), py::arg("target"));
  m.def("ctc_loss_oracle", [](const Matrix &log_probs, const std::vector<int> &target) {
    return ctc::loss_oracle(log_probs, target);
  }, py::arg("log_probs"), py::arg("target"));
  m.def("greedy_decode", &ctc::greedy_decode, py::arg("log_probs"));
  m.def("wer", [](const std::vector<int> &ref, const std::vector<int> &hyp) {
    return ctc::wer(ref, hyp);
  }, py::arg("reference"), py::arg("hypothesis"));

  // --- configuration ----------------------------------------------------------
  m.def("default_config_json", [] { return dump(nlohmann::json(ExperimentConfig{})); });
  m.def("normalize_config_json", [](const std::string &text) {
    return dump(nlohmann::json(parse_config(text)));
  }, py::arg("config_json"));
  m.def("config_hash", [](const std::string &text) { return config_hash(parse_config(text)); },
        py::arg("config_json"));

  // --- corpus -----------------------------------------------------------------
  py::class_<corpus::Utterance>(m, "Utterance")
      .def_readonly("id", &corpus::Utterance::id)
      .def_readonly("features", &corpus::Utterance::features)
      .def_readonly("transcript", &corpus::Utterance::transcript)
      .def_readonly("accent_id", &corpus::Utterance::accent_id)
      .def_readonly("intensity", &corpus::Utterance::intensity)
      .def_readonly("nuisance", &corpus::Utterance::nuisance)
      .def_readonly("speaker", &corpus::Utterance::speaker);

  py::class_<corpus::Corpus>(m, "Corpus")
      .def_property_readonly("config_hash", &corpus::Corpus::config_hash)
      .def_property_readonly("d_feat", &corpus::Corpus::d_feat)
      .def_property_readonly("vocab_size", &corpus::Corpus::vocab_size)
      .def_property_readonly("l1_accent", &corpus::Corpus::l1_accent)
      .def("__len__", [](const corpus::Corpus &c) { return c.utterances().size(); })
      .def("get", &corpus::Corpus::get, py::return_value_policy::reference_internal, py::arg("id"))
      .def("group", [](const corpus::Corpus &c, int a) { return to_string(c.group(a)); },
           py::arg("accent_id"))
      .def("split", [](const corpus::Corpus &c, const std::string &name) {
        std::vector<std::string> ids;
        for (const auto *u : c.split(corpus::split_from_string(name))) ids.push_back(u->id);
        return ids;
      }, py::arg("name"))
      .def("save", [](const corpus::Corpus &c, const std::filesystem::path &p) {
        corpus::save_corpus(p, c);
      }, py::arg("path"));

  m.def("build_corpus", [](const std::string &text) { return corpus::build_corpus(parse_config(text)); },
        py::arg("config_json"), py::call_guard<py::gil_scoped_release>());
  m.def("load_corpus", &corpus::load_corpus, py::arg("path"));

  // --- pipeline ---------------------------------------------------------------
  m.attr("OUTPUT_ROOT_ENV") = pipeline::kOutputRootEnv;
  m.def("output_root", [](std::optional<std::filesystem::path> flag) {
    return pipeline::output_root(flag);
  }, py::arg("flag") = py::none());
  m.def("run_experiment", [](const std::string &text, const std::filesystem::path &dir) {
    const ExperimentConfig c = parse_config(text);
    const pipeline::Layout l = pipeline::prepare(c, dir);
    return dump(eval::to_json(pipeline::run_experiment(c, l)));
  }, py::arg("config_json"), py::arg("dir"), py::call_guard<py::gil_scoped_release>());
  m.def("build_report", [](const std::filesystem::path &dir) {
    return dump(eval::to_json(pipeline::build_report(pipeline::Layout{dir})));
  }, py::arg("dir"), py::call_guard<py::gil_scoped_release>());
  m.def("validate_report_json", [](const std::string &text) {
    eval::validate_report(nlohmann::json::parse(text));
  }, py::arg("report_json"));
  m.def("format_tables", [](const std::string &text) {
    return eval::format_tables(eval::report_from_json(nlohmann::json::parse(text)));
  }, py::arg("report_json"));
}
