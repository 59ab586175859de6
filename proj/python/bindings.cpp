#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <vector>

#include "safe/ace.hpp"
#include "safe/dmr.hpp"
#include "safe/fau.hpp"
#include "safe/fed_runtime.hpp"
#include "safe/metrics.hpp"
#include "safe/report.hpp"

namespace py = pybind11;

namespace {

safe::Tensor matrix_from_lists(const std::vector<std::vector<double>>& rows) {
  if (rows.empty() || rows[0].empty()) throw std::invalid_argument("matrix must be non-empty");
  int r = static_cast<int>(rows.size());
  int c = static_cast<int>(rows[0].size());
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(r) * c);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) throw std::invalid_argument("ragged matrix");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return safe::Tensor::from_data({r, c}, std::move(flat));
}

std::string run_json(const std::string& config_json) {
  safe::RunConfig cfg = safe::config_from_json(nlohmann::json::parse(config_json));
  return safe::report_to_json(safe::run_training(cfg)).dump();
}

std::string run_csv(const std::string& config_json) {
  safe::RunConfig cfg = safe::config_from_json(nlohmann::json::parse(config_json));
  return safe::rounds_csv(safe::run_training(cfg));
}

std::string partition_json(const std::string& config_json) {
  safe::RunConfig cfg = safe::config_from_json(nlohmann::json::parse(config_json));
  safe::PartitionPreview pv = safe::partition_preview(cfg);
  return nlohmann::json{{"counts", pv.counts},
                        {"totals_per_class", pv.totals_per_class},
                        {"achieved_ratio", pv.achieved_ratio}}
      .dump();
}

double cka(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  return safe::linear_cka(matrix_from_lists(a), matrix_from_lists(b));
}

double py_anneal_tau(int round, int total_rounds, double tau_start, double tau_end) {
  safe::GumbelConfig g;
  g.tau_start = tau_start;
  g.tau_end = tau_end;
  return safe::anneal_tau(round, total_rounds, g);
}

std::string default_config() { return safe::config_to_json(safe::RunConfig{}).dump(); }

}  // namespace

PYBIND11_MODULE(safe_sim, m) {
  m.doc() = "federated class-rectification simulator bindings";
  m.def("run_training", &run_json, py::arg("config_json"),
        "Run a full experiment from a JSON config string; returns the report as JSON.");
  m.def("run_training_csv", &run_csv, py::arg("config_json"),
        "Run a full experiment; returns the per-round CSV log.");
  m.def("partition_preview", &partition_json, py::arg("config_json"),
        "Per-client per-class sample counts for the configured partition, as JSON.");
  m.def("linear_cka", &cka, py::arg("a"), py::arg("b"),
        "Linear centered kernel alignment between two row-major activation matrices.");
  m.def("eps_plus", &safe::eps_plus, py::arg("round"), py::arg("total_rounds"));
  m.def("eps_minus", &safe::eps_minus, py::arg("round"), py::arg("total_rounds"));
  m.def("anneal_tau", &py_anneal_tau, py::arg("round"), py::arg("total_rounds"),
        py::arg("tau_start") = 1.0, py::arg("tau_end") = 0.1);
  m.def("default_config", &default_config, "The default configuration as a JSON string.");
}
