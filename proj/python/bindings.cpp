#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "uigr/error.hpp"
#include "uigr/retrieval.hpp"
#include "uigr/service.hpp"
#include "uigr/training.hpp"
#include "uigr/workbench.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

json to_json(const py::object& obj) {
  const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
  return json::parse(text);
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

uigr::RunConfig config_from(const py::object& obj) {
  if (obj.is_none()) return uigr::load_run_config(std::nullopt);
  uigr::RunConfig c = uigr::run_config_from_json(to_json(obj));
  c.validate();
  return c;
}

uigr::Logger quiet_or_stderr(bool verbose) { return verbose ? uigr::Logger() : uigr::Logger::silent(); }

std::optional<uigr::Split> split_arg(const std::string& s) {
  if (s == "all") return std::nullopt;
  return uigr::parse_split(s);
}

}  // namespace

PYBIND11_MODULE(_uigr, m) {
  m.doc() = "Unified interactive garment retrieval core";

  auto base = py::register_exception<uigr::Error>(m, "UigrError", PyExc_RuntimeError);
  py::register_exception<uigr::ConfigError>(m, "ConfigError", base.ptr());
  auto parse = py::register_exception<uigr::ParseError>(m, "ParseError", base.ptr());
  py::register_exception<uigr::IntegrityError>(m, "IntegrityError", parse.ptr());
  py::register_exception<uigr::UsageError>(m, "UsageError", base.ptr());
  py::register_exception<uigr::ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<uigr::NumericError>(m, "NumericError", base.ptr());
  py::register_exception<uigr::NotFoundError>(m, "NotFoundError", base.ptr());
  py::register_exception<uigr::IoError>(m, "IoError", base.ptr());

  m.def(
      "load_run_config",
      [](std::optional<std::filesystem::path> path, const std::vector<std::string>& overrides) {
        return to_py(uigr::run_config_to_json(uigr::load_run_config(path, overrides)));
      },
      py::arg("path") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      "Resolved run config as a dict.");

  m.def(
      "gen_corpus",
      [](const py::object& cfg, bool verbose) {
        const auto c = uigr::run_gen_corpus(config_from(cfg), quiet_or_stderr(verbose));
        return c.garments().size();
      },
      py::arg("config") = py::none(), py::arg("verbose") = false);
  m.def(
      "build_dataset",
      [](const py::object& cfg, bool verbose) {
        return uigr::run_build_dataset(config_from(cfg), quiet_or_stderr(verbose)).triplets().size();
      },
      py::arg("config") = py::none(), py::arg("verbose") = false);
  m.def(
      "train",
      [](const py::object& cfg, bool verbose) {
        const auto result = uigr::run_train(config_from(cfg), quiet_or_stderr(verbose));
        json log = json::array();
        for (const auto& e : result.log) log.push_back(e.to_json());
        return to_py(log);
      },
      py::arg("config") = py::none(), py::arg("verbose") = false, "Returns the per-epoch log.");
  m.def(
      "evaluate",
      [](const py::object& cfg, bool verbose) {
        return to_py(uigr::run_eval(config_from(cfg), quiet_or_stderr(verbose)).to_json());
      },
      py::arg("config") = py::none(), py::arg("verbose") = false);
  m.def(
      "export_embeddings",
      [](const py::object& cfg, const std::string& split, bool verbose) {
        uigr::run_export_embeddings(config_from(cfg), quiet_or_stderr(verbose), split_arg(split));
      },
      py::arg("config") = py::none(), py::arg("split") = "all", py::arg("verbose") = false);
  m.def(
      "ablate",
      [](const py::object& cfg, bool verbose) {
        return to_py(uigr::ablation_to_json(uigr::run_ablate(config_from(cfg), quiet_or_stderr(verbose))));
      },
      py::arg("config") = py::none(), py::arg("verbose") = false);

  m.def(
      "recall_at_k",
      [](const std::vector<std::string>& ranked, const std::string& target, std::size_t k) {
        return uigr::recall_at_k(ranked, target, k);
      },
      py::arg("ranked"), py::arg("target"), py::arg("k"));
  m.def(
      "average_precision",
      [](const std::vector<std::string>& ranked, const std::set<std::string>& relevant, std::size_t cutoff) {
        return uigr::average_precision(ranked, relevant, cutoff);
      },
      py::arg("ranked"), py::arg("relevant"), py::arg("cutoff") = 50);
  m.def(
      "bbc_loss",
      [](const std::vector<std::vector<double>>& composed, const std::vector<std::vector<double>>& targets,
         double temperature) {
        auto to_tensor = [](const std::vector<std::vector<double>>& rows) {
          if (rows.empty() || rows.front().empty()) throw uigr::ShapeError("bbc_loss: empty matrix");
          std::vector<double> flat;
          for (const auto& r : rows) {
            if (r.size() != rows.front().size()) throw uigr::ShapeError("bbc_loss: ragged matrix");
            flat.insert(flat.end(), r.begin(), r.end());
          }
          return uigr::ad::Tensor::matrix(rows.size(), rows.front().size(), std::move(flat));
        };
        uigr::ad::Tape tape;
        return uigr::bbc_loss(tape.constant(to_tensor(composed)), tape.constant(to_tensor(targets)), temperature)
            .value()
            .item();
      },
      py::arg("composed"), py::arg("targets"), py::arg("temperature") = 0.0625);
  m.def("lr_at", [](const py::object& train_cfg, std::size_t epoch) {
    return uigr::lr_at(to_json(train_cfg).get<uigr::TrainConfig>(), epoch);
  });

  py::class_<uigr::RetrievalService>(m, "Service")
      .def(py::init([](const py::object& cfg) { return uigr::load_service(config_from(cfg)); }),
           py::arg("config") = py::none())
      .def(
          "handle",
          [](const uigr::RetrievalService& s, const std::string& method, const std::string& path,
             const std::map<std::string, std::string>& query, const std::string& body) {
            uigr::ApiResponse r;
            {
              py::gil_scoped_release release;
              r = s.handle(method, path, query, body);
            }
            return py::make_tuple(r.status, to_py(r.body));
          },
          py::arg("method"), py::arg("path"), py::arg("query") = std::map<std::string, std::string>{},
          py::arg("body") = "")
      .def_property_readonly("gallery_size", [](const uigr::RetrievalService& s) { return s.gallery().size(); })
      .def_property_readonly("gallery_ids", [](const uigr::RetrievalService& s) { return s.gallery().ids; });
}
