#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <vector>

#include "realdiff/experiment.hpp"
#include "realdiff/gradcheck.hpp"

namespace py = pybind11;
using namespace realdiff;

namespace {

py::dict metric_dict(const MetricValues& m) {
    py::dict d;
    d["rmse"] = m.rmse;
    d["mae"] = m.mae;
    d["r2"] = m.r2.has_value() ? py::object(py::float_(*m.r2)) : py::object(py::none());
    d["count"] = m.count;
    return d;
}

py::dict report_dict(const RunLog& log) {
    py::dict d;
    d["slug"] = config_slug(log.config);
    d["version"] = log.version;
    d["epochs_run"] = static_cast<int>(log.losses.size());
    d["pretrain_epochs_run"] = static_cast<int>(log.pretrain_losses.size());
    d["wall_seconds"] = log.wall_seconds;
    d["train"] = metric_dict(log.metrics.train);
    d["val"] = metric_dict(log.metrics.val);
    d["test"] = metric_dict(log.metrics.test);
    return d;
}

PreparedCohort prepare_dir(const std::string& data_dir, std::uint64_t seed,
                           SplitCohort& keepalive) {
    Cohort cohort = load_cohort_dir(data_dir);
    keepalive = split_cohort(cohort, seed);
    return preprocess(keepalive);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "forecasting pipeline: control paths, CDE/LSTM trunks, attention fusion";
    m.attr("version_string") = std::string(kVersionString);

    py::register_exception<Error>(m, "RealDiffError");

    py::class_<ControlPath>(m, "ControlPath",
                            "piecewise-cubic control path over a path parameter s")
        .def_property_readonly("scheme",
                               [](const ControlPath& p) { return std::string(to_string(p.scheme())); })
        .def_property_readonly("channels", &ControlPath::channels)
        .def_property_readonly("param_begin", &ControlPath::param_begin)
        .def_property_readonly("param_end", &ControlPath::param_end)
        .def("param_for_time", &ControlPath::param_for_time, py::arg("t"))
        .def("eval", &ControlPath::eval_point, py::arg("s"))
        .def("derivative", &ControlPath::eval_derivative, py::arg("s"))
        .def("knot_params", &ControlPath::knot_params);

    m.def(
        "build_path",
        [](const std::vector<double>& times, const std::vector<std::vector<double>>& values,
           const std::string& scheme,
           const std::vector<std::vector<bool>>& observed) {
            ObservationSequence obs;
            obs.times = times;
            obs.values = values;
            for (const auto& row : observed) {
                obs.observed.emplace_back(row.begin(), row.end());
            }
            return build_path(obs, scheme_from_string(scheme));
        },
        py::arg("times"), py::arg("values"), py::arg("scheme"),
        py::arg("observed") = std::vector<std::vector<bool>>{},
        "interpolate an observation sequence; channel 0 of the result is time");

    m.def(
        "compute_metrics",
        [](const std::vector<double>& preds, const std::vector<double>& targets) {
            return metric_dict(compute_metrics(preds, targets));
        },
        py::arg("preds"), py::arg("targets"),
        "rmse/mae/r2 over one split; r2 is None when the targets are constant");

    m.def(
        "grad_check_suite",
        [](std::uint64_t seed) {
            py::list out;
            for (const auto& r : grad_check_suite(seed)) {
                py::dict d;
                d["name"] = r.name;
                d["max_rel_err"] = r.max_rel_err;
                d["tolerance"] = r.tolerance;
                d["passed"] = r.passed();
                out.append(d);
            }
            return out;
        },
        py::arg("seed") = 1234,
        "finite-difference check of every operation and the composed graphs");

    m.def(
        "generate_cohort",
        [](int n, std::uint64_t seed, const std::string& out_dir) {
            Cohort cohort = generate_synthetic_cohort(n, seed);
            save_cohort(cohort, out_dir);
            return static_cast<int>(cohort.records.size());
        },
        py::arg("n"), py::arg("seed"), py::arg("out_dir"),
        "write a synthetic cohort; returns the patient count");

    m.def(
        "default_config",
        [] { return serialize_config(ExperimentConfig{}); },
        "the canonical key=value form of the default run configuration");

    m.def(
        "train_run",
        [](const std::string& config_text, const std::string& data_dir,
           const std::string& out_dir) {
            ExperimentConfig cfg = parse_config_text(config_text);
            SplitCohort keepalive;
            PreparedCohort data = prepare_dir(data_dir, cfg.seed, keepalive);
            RunArtifacts run = run_experiment(cfg, data);
            save_run(out_dir, run);
            return report_dict(run.log);
        },
        py::arg("config_text"), py::arg("data_dir"), py::arg("out_dir"),
        "train one model, save the run directory, return its metrics");

    m.def(
        "run_metrics",
        [](const std::string& run_dir) { return report_dict(load_run(run_dir).log); },
        py::arg("run_dir"), "metrics of a saved run");

    m.def(
        "emit_plot_data",
        [](const std::string& run_dir, const std::string& data_dir,
           const std::string& patient_id) {
            RunArtifacts run = load_run(run_dir);
            SplitCohort keepalive;
            PreparedCohort data = prepare_dir(data_dir, run.log.config.seed, keepalive);
            emit_plot_data(run, data, run_dir, patient_id);
        },
        py::arg("run_dir"), py::arg("data_dir"), py::arg("patient_id"),
        "write actual_vs_pred.csv and trajectory_<id>.csv into the run directory");

    m.def(
        "run_ablation",
        [](const std::string& config_text, const std::string& data_dir,
           const std::string& out_dir) {
            ExperimentConfig base = parse_config_text(config_text);
            SplitCohort keepalive;
            PreparedCohort data = prepare_dir(data_dir, base.seed, keepalive);
            AblationReport report = run_ablation_grid(base, data, out_dir);
            py::list out;
            for (const auto& cmp : report.comparisons) {
                py::dict d;
                d["slug"] = cmp.slug;
                d["title"] = cmp.title;
                for (const char* side : {"a", "b"}) {
                    const AblationCell& cell = side == std::string("a") ? cmp.a : cmp.b;
                    py::dict c;
                    c["label"] = cell.label;
                    c["train_rmse"] = cell.metrics.train.rmse;
                    c["val_rmse"] = cell.metrics.val.rmse;
                    c["test_rmse"] = cell.metrics.test.rmse;
                    c["paper_test_rmse"] = cell.paper_test_rmse;
                    d[side] = c;
                }
                out.append(d);
            }
            return out;
        },
        py::arg("config_text"), py::arg("data_dir"), py::arg("out_dir"),
        "run the six-comparison grid and return the table rows");
}
