#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "realdiff/experiment.hpp"
#include "realdiff/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace realdiff;

namespace {

struct LoadedData {
    SplitCohort splits;
    PreparedCohort prepared;
};

// Split assignment keys off the config seed, so a run is reproducible from
// its config and the data directory alone.
LoadedData load_prepared(const std::string& data_dir, std::uint64_t seed) {
    LoadedData out;
    Cohort cohort = load_cohort_dir(data_dir, &std::cerr);
    out.splits = split_cohort(cohort, seed);
    out.prepared = preprocess(out.splits);
    return out;
}

void remember_data_dir(const std::string& run_dir, const std::string& data_dir) {
    std::ofstream out(run_dir + "/data_dir", std::ios::binary);
    out << fs::absolute(data_dir).string() << "\n";
}

std::string recall_data_dir(const std::string& run_dir, const std::string& override_dir) {
    if (!override_dir.empty()) return override_dir;
    std::ifstream in(run_dir + "/data_dir", std::ios::binary);
    std::string dir;
    if (!in || !std::getline(in, dir) || dir.empty()) {
        throw ContractError("run directory does not record its data directory; pass --data");
    }
    return dir;
}

void print_metrics(const MetricsReport& m) {
    std::cout << "  train " << format_metric_values(m.train) << "\n";
    std::cout << "  val   " << format_metric_values(m.val) << "\n";
    std::cout << "  test  " << format_metric_values(m.test) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"disease progression forecasting: CDE and LSTM trunks, image and "
                 "static encoders, attention fusion"};
    app.set_version_flag("--version", std::string(kVersionString));
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "write a synthetic cohort to a directory");
    int gen_n = 40;
    std::uint64_t gen_seed = 1;
    std::string gen_out;
    gen->add_option("--n", gen_n, "number of patients")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* train = app.add_subcommand("train", "train one model and save the run");
    std::string train_config, train_data, train_out;
    train->add_option("--config", train_config, "key=value config file")->required();
    train->add_option("--data", train_data, "cohort directory")->required();
    train->add_option("--out", train_out, "run output directory")->required();

    auto* eval = app.add_subcommand("evaluate", "report metrics for a saved run");
    std::string eval_run, eval_data;
    eval->add_option("--run", eval_run, "run directory")->required();
    eval->add_option("--data", eval_data, "re-evaluate on this cohort instead of "
                                          "printing the stored metrics");

    auto* ablate = app.add_subcommand("ablate", "run the six-comparison ablation grid");
    std::string ab_config, ab_data, ab_out;
    ablate->add_option("--config", ab_config, "base config file")->required();
    ablate->add_option("--data", ab_data, "cohort directory")->required();
    ablate->add_option("--out", ab_out, "report output directory")->required();

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every "
                                               "operation and the composed graphs");

    auto* plot = app.add_subcommand("plot-data", "emit csv plot data for a saved run");
    std::string plot_run, plot_patient, plot_data_dir;
    plot->add_option("--run", plot_run, "run directory")->required();
    plot->add_option("--patient", plot_patient, "patient id for the trajectory file")
        ->required();
    plot->add_option("--data", plot_data_dir, "cohort directory override");

    try {
        app.parse(argc, argv);

        if (gen->parsed()) {
            Cohort cohort = generate_synthetic_cohort(gen_n, gen_seed);
            save_cohort(cohort, gen_out);
            std::cout << "wrote " << cohort.records.size() << " patients to " << gen_out
                      << "\n";
        } else if (train->parsed()) {
            ExperimentConfig cfg = parse_config_file(train_config);
            LoadedData data = load_prepared(train_data, cfg.seed);
            RunArtifacts run = run_experiment(cfg, data.prepared, &std::cout);
            save_run(train_out, run);
            remember_data_dir(train_out, train_data);
            std::cout << config_slug(cfg) << " finished in " << run.log.wall_seconds
                      << " s\n";
            print_metrics(run.log.metrics);
            std::cout << "saved run to " << train_out << "\n";
        } else if (eval->parsed()) {
            RunArtifacts run = load_run(eval_run);
            std::cout << run.log.version << " " << config_slug(run.log.config) << "\n";
            if (eval_data.empty()) {
                print_metrics(run.log.metrics);
            } else {
                LoadedData data = load_prepared(eval_data, run.log.config.seed);
                print_metrics(evaluate_model(run.params, run.log.config, data.prepared,
                                             &std::cerr));
            }
        } else if (ablate->parsed()) {
            ExperimentConfig base = parse_config_file(ab_config);
            LoadedData data = load_prepared(ab_data, base.seed);
            AblationReport report = run_ablation_grid(base, data.prepared, ab_out,
                                                      &std::cout);
            for (const auto& e : fs::directory_iterator(fs::path(ab_out) / "cells")) {
                remember_data_dir(e.path().string(), ab_data);
            }
            for (const auto& cmp : report.comparisons) {
                std::cout << "\n" << format_ablation_table(cmp);
            }
            std::cout << "\nablation grid finished in " << report.wall_seconds << " s\n";
        } else if (gc->parsed()) {
            bool all_ok = true;
            for (const auto& r : grad_check_suite()) {
                std::printf("%-24s max_rel_err %.3e  tol %.0e  %s\n", r.name.c_str(),
                            r.max_rel_err, r.tolerance, r.passed() ? "ok" : "FAIL");
                all_ok = all_ok && r.passed();
            }
            if (!all_ok) return 1;
        } else if (plot->parsed()) {
            RunArtifacts run = load_run(plot_run);
            const std::string data_dir = recall_data_dir(plot_run, plot_data_dir);
            LoadedData data = load_prepared(data_dir, run.log.config.seed);
            emit_plot_data(run, data.prepared, plot_run, plot_patient);
            std::cout << "wrote " << plot_run << "/actual_vs_pred.csv and " << plot_run
                      << "/trajectory_" << plot_patient << ".csv\n";
        }
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
