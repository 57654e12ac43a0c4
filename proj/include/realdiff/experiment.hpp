#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "realdiff/cohort.hpp"
#include "realdiff/fusion.hpp"
#include "realdiff/metrics.hpp"

namespace realdiff {

inline constexpr const char* kVersionString = "realdiffnet 0.1.0";

// One training run, fully specified. Flat key=value files parse into this;
// serialize_config renders the canonical form used for run identity.
struct ExperimentConfig {
    std::string trunk = "cde";            // cde | lstm
    std::string modality = "structured";  // structured | multimodal
    std::string fusion = "none";          // none | sum | concat
    Scheme scheme = Scheme::rectilinear;
    bool pretrain = false;
    bool allow_noncausal = false;
    bool time_embedding = false;
    std::string norm_order = "pre";  // pre | post
    std::uint64_t seed = 1;
    int epochs = 300;
    int pretrain_epochs = 200;
    double lr = 1e-3;
    double finetune_lr = 0.0;  // fine-tune stage rate for pretrained runs; 0 means lr
    double clip_norm = 1.0;
    int cde_hidden = 16;
    int cde_width = 64;
    int cde_substeps = 4;
    int lstm_hidden = 16;
    int lstm_layers = 2;
    int heads = 4;
    int d_emb = 16;
    int d_img = 16;
    int d_stat = 8;
};

// Throws ConfigError on out-of-range values or contradictory combinations
// (attention fusion needs multimodal inputs; pretraining only applies to
// fusion runs; non-causal schemes under fusion need the explicit override).
void validate_config(const ExperimentConfig& cfg);

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);

// Short run identifier derived from the architecture axes only.
std::string config_slug(const ExperimentConfig& cfg);

FusionConfig to_fusion_config(const ExperimentConfig& cfg);

// Parameter layout per variant:
//   baselines: trunk.* plus trunk.readout (and img.* when multimodal)
//   fusion:    the full attention model from init_fusion_model
void init_experiment_model(ParamStore& store, const ExperimentConfig& cfg,
                           std::mt19937_64& rng);

struct ModelForward {
    Tensor predictions;              // [steps], normalized FVC
    std::vector<double> pred_times;  // raw weeks being forecast
};

ModelForward experiment_forward(const BoundParams& params, const ExperimentConfig& cfg,
                                const PreparedPatient& patient, const PreprocessStats& stats);

// Evaluation at caller-chosen times; only CDE trunks support off-visit times,
// an LSTM trunk predicts at observed visits alone.
ModelForward experiment_forward_at(const BoundParams& params, const ExperimentConfig& cfg,
                                   const PreparedPatient& patient,
                                   const PreprocessStats& stats,
                                   const std::vector<double>& times);

struct EpochLoss {
    double train = 0.0;
    double val = 0.0;
};

struct RunLog {
    ExperimentConfig config;
    std::vector<EpochLoss> pretrain_losses;  // empty unless the run pretrained
    std::vector<EpochLoss> losses;
    MetricsReport metrics;
    double wall_seconds = 0.0;
    std::string version = kVersionString;
};

struct RunArtifacts {
    RunLog log;
    ParamStore params;
};

// Trains per the config on the prepared cohort and evaluates every split.
// Deterministic for a fixed config: one Adam step per patient in id order,
// epoch-level passes, gradient clipping at cfg.clip_norm. pretrain=true first
// fits the structured trunk alone at cfg.lr, then hands its parameters to the
// fusion model bit-exactly via attach_embedding_head and fine-tunes at
// cfg.finetune_lr when that is set.
RunArtifacts run_experiment(const ExperimentConfig& cfg, const PreparedCohort& data,
                            std::ostream* progress = nullptr);

// Split-level predictions with the matching targets, in patient id order.
struct SplitPredictions {
    std::vector<std::string> patient_ids;  // one entry per example
    std::vector<double> weeks;
    std::vector<double> preds;
    std::vector<double> targets;
};
SplitPredictions collect_predictions(const ParamStore& params, const ExperimentConfig& cfg,
                                     const std::vector<PreparedPatient>& split,
                                     const PreprocessStats& stats);

MetricsReport evaluate_model(const ParamStore& params, const ExperimentConfig& cfg,
                             const PreparedCohort& data, std::ostream* warnings = nullptr);

// runlog.json + params.ckpt under dir; save/load/save is byte-stable.
void save_run(const std::string& dir, const RunArtifacts& run);
RunArtifacts load_run(const std::string& dir);

std::string run_log_to_json(const RunLog& log);
RunLog run_log_from_json(const std::string& text);

// actual_vs_pred.csv over every split plus trajectory_<id>.csv for one
// patient: dense weekly curve for CDE trunks, observed visits for LSTM.
void emit_plot_data(const RunArtifacts& run, const PreparedCohort& data,
                    const std::string& out_dir, const std::string& patient_id);

struct AblationCell {
    std::string label;            // table row name
    ExperimentConfig config;
    MetricsReport metrics;
    double paper_train_rmse = 0;  // published OSIC context, not a target
    double paper_val_rmse = 0;
    double paper_test_rmse = 0;
};

struct AblationComparison {
    std::string slug;   // file stem
    std::string title;  // table caption
    AblationCell a, b;
};

struct AblationReport {
    std::vector<AblationComparison> comparisons;
    double wall_seconds = 0.0;
};

// The six pairwise comparisons, deduplicated by canonical config so shared
// cells train once. Per-cell seeds derive from the base seed and the cell's
// canonical config, so results do not depend on grid order. Each cell's run
// is saved under out_dir/cells/<slug>/ before the next cell starts, which
// preserves partial results if a later cell fails.
AblationReport run_ablation_grid(const ExperimentConfig& base, const PreparedCohort& data,
                                 const std::string& out_dir,
                                 std::ostream* progress = nullptr);

void write_ablation_report(const AblationReport& report, const std::string& out_dir);
std::string format_ablation_table(const AblationComparison& cmp);

}  // namespace realdiff
