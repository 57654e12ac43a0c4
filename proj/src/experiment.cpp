#include "realdiff/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "realdiff/checkpoint.hpp"

namespace realdiff {

namespace {

using ordered_json = nlohmann::ordered_json;

const char* split_names[3] = {"train", "val", "test"};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_short(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void require_choice(const std::string& field, const std::string& value,
                    std::initializer_list<const char*> allowed) {
    for (const char* a : allowed) {
        if (value == a) return;
    }
    std::string opts;
    for (const char* a : allowed) {
        if (!opts.empty()) opts += "|";
        opts += a;
    }
    throw ConfigError(field + " must be one of " + opts + ", got '" + value + "'");
}

void require_positive(const std::string& field, double v) {
    if (!(v > 0)) throw ConfigError(field + " must be positive, got " + fmt_short(v));
}

}  // namespace

void validate_config(const ExperimentConfig& cfg) {
    require_choice("trunk", cfg.trunk, {"cde", "lstm"});
    require_choice("modality", cfg.modality, {"structured", "multimodal"});
    require_choice("fusion", cfg.fusion, {"none", "sum", "concat"});
    require_choice("norm_order", cfg.norm_order, {"pre", "post"});
    if (cfg.fusion != "none" && cfg.modality != "multimodal") {
        throw ConfigError("attention fusion needs multimodal data, got modality '" +
                          cfg.modality + "'");
    }
    if (cfg.pretrain && cfg.fusion == "none") {
        throw ConfigError("pretrain only applies to fusion runs");
    }
    if (cfg.time_embedding && cfg.fusion == "none") {
        throw ConfigError("time_embedding only applies to fusion runs");
    }
    if (cfg.fusion != "none" && cfg.trunk == "cde" && !scheme_is_causal(cfg.scheme) &&
        !cfg.allow_noncausal) {
        throw ConfigError(std::string("scheme '") + to_string(cfg.scheme) +
                          "' leaks future observations into fusion predictions; set "
                          "allow_noncausal to override");
    }
    if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (cfg.pretrain_epochs < 0) throw ConfigError("pretrain_epochs must be >= 0");
    require_positive("lr", cfg.lr);
    if (cfg.finetune_lr < 0.0) throw ConfigError("finetune_lr must be positive when set");
    if (cfg.finetune_lr != 0.0 && !cfg.pretrain)
        throw ConfigError("finetune_lr only applies to pretrained runs");
    require_positive("clip_norm", cfg.clip_norm);
    for (auto [name, v] : {std::pair<const char*, int>{"cde_hidden", cfg.cde_hidden},
                           {"cde_width", cfg.cde_width},
                           {"cde_substeps", cfg.cde_substeps},
                           {"lstm_hidden", cfg.lstm_hidden},
                           {"lstm_layers", cfg.lstm_layers},
                           {"heads", cfg.heads},
                           {"d_emb", cfg.d_emb},
                           {"d_img", cfg.d_img},
                           {"d_stat", cfg.d_stat}}) {
        if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
    }
}

namespace {

int parse_int(const std::string& field, const std::string& v) {
    char* end = nullptr;
    long x = std::strtol(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0') {
        throw ConfigError("bad integer for " + field + ": '" + v + "'");
    }
    return static_cast<int>(x);
}

std::uint64_t parse_u64(const std::string& field, const std::string& v) {
    char* end = nullptr;
    unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0') {
        throw ConfigError("bad integer for " + field + ": '" + v + "'");
    }
    return static_cast<std::uint64_t>(x);
}

double parse_double(const std::string& field, const std::string& v) {
    char* end = nullptr;
    double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0') {
        throw ConfigError("bad number for " + field + ": '" + v + "'");
    }
    return x;
}

bool parse_bool(const std::string& field, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("bad boolean for " + field + ": '" + v + "' (use true|false)");
}

std::string trimmed(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trimmed(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key=value, got '" + line + "'");
        }
        const std::string key = trimmed(line.substr(0, eq));
        const std::string val = trimmed(line.substr(eq + 1));
        try {
            if (key == "trunk") cfg.trunk = val;
            else if (key == "modality") cfg.modality = val;
            else if (key == "fusion") cfg.fusion = val;
            else if (key == "scheme") cfg.scheme = scheme_from_string(val);
            else if (key == "pretrain") cfg.pretrain = parse_bool(key, val);
            else if (key == "allow_noncausal") cfg.allow_noncausal = parse_bool(key, val);
            else if (key == "time_embedding") cfg.time_embedding = parse_bool(key, val);
            else if (key == "norm_order") cfg.norm_order = val;
            else if (key == "seed") cfg.seed = parse_u64(key, val);
            else if (key == "epochs") cfg.epochs = parse_int(key, val);
            else if (key == "pretrain_epochs") cfg.pretrain_epochs = parse_int(key, val);
            else if (key == "lr") cfg.lr = parse_double(key, val);
            else if (key == "finetune_lr") cfg.finetune_lr = parse_double(key, val);
            else if (key == "clip_norm") cfg.clip_norm = parse_double(key, val);
            else if (key == "cde_hidden") cfg.cde_hidden = parse_int(key, val);
            else if (key == "cde_width") cfg.cde_width = parse_int(key, val);
            else if (key == "cde_substeps") cfg.cde_substeps = parse_int(key, val);
            else if (key == "lstm_hidden") cfg.lstm_hidden = parse_int(key, val);
            else if (key == "lstm_layers") cfg.lstm_layers = parse_int(key, val);
            else if (key == "heads") cfg.heads = parse_int(key, val);
            else if (key == "d_emb") cfg.d_emb = parse_int(key, val);
            else if (key == "d_img") cfg.d_img = parse_int(key, val);
            else if (key == "d_stat") cfg.d_stat = parse_int(key, val);
            else throw ConfigError("unknown key '" + key + "'");
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    validate_config(cfg);
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream out;
    out << "trunk=" << cfg.trunk << "\n";
    out << "modality=" << cfg.modality << "\n";
    out << "fusion=" << cfg.fusion << "\n";
    out << "scheme=" << to_string(cfg.scheme) << "\n";
    out << "pretrain=" << (cfg.pretrain ? "true" : "false") << "\n";
    out << "allow_noncausal=" << (cfg.allow_noncausal ? "true" : "false") << "\n";
    out << "time_embedding=" << (cfg.time_embedding ? "true" : "false") << "\n";
    out << "norm_order=" << cfg.norm_order << "\n";
    out << "seed=" << cfg.seed << "\n";
    out << "epochs=" << cfg.epochs << "\n";
    out << "pretrain_epochs=" << cfg.pretrain_epochs << "\n";
    out << "lr=" << fmt_double(cfg.lr) << "\n";
    out << "finetune_lr=" << fmt_double(cfg.finetune_lr) << "\n";
    out << "clip_norm=" << fmt_double(cfg.clip_norm) << "\n";
    out << "cde_hidden=" << cfg.cde_hidden << "\n";
    out << "cde_width=" << cfg.cde_width << "\n";
    out << "cde_substeps=" << cfg.cde_substeps << "\n";
    out << "lstm_hidden=" << cfg.lstm_hidden << "\n";
    out << "lstm_layers=" << cfg.lstm_layers << "\n";
    out << "heads=" << cfg.heads << "\n";
    out << "d_emb=" << cfg.d_emb << "\n";
    out << "d_img=" << cfg.d_img << "\n";
    out << "d_stat=" << cfg.d_stat << "\n";
    return out.str();
}

std::string config_slug(const ExperimentConfig& cfg) {
    std::string slug = cfg.trunk + "_" + cfg.modality;
    if (cfg.trunk == "cde") slug += std::string("_") + to_string(cfg.scheme);
    if (cfg.fusion != "none") slug += "_" + cfg.fusion;
    if (cfg.pretrain) slug += "_pretrained";
    return slug;
}

FusionConfig to_fusion_config(const ExperimentConfig& cfg) {
    FusionConfig f;
    f.trunk = cfg.trunk;
    f.scheme = cfg.scheme;
    f.mode = cfg.fusion;
    f.heads = cfg.heads;
    f.d_emb = cfg.d_emb;
    f.d_img = cfg.d_img;
    f.d_stat = cfg.d_stat;
    f.norm_order = cfg.norm_order;
    f.allow_noncausal = cfg.allow_noncausal;
    f.time_embedding = cfg.time_embedding;
    f.cde = CdeConfig{cfg.cde_hidden, cfg.cde_width, cfg.cde_substeps};
    f.lstm = LstmConfig{0, cfg.lstm_hidden, cfg.lstm_layers};
    return f;
}

void init_experiment_model(ParamStore& store, const ExperimentConfig& cfg,
                           std::mt19937_64& rng) {
    validate_config(cfg);
    if (cfg.fusion != "none") {
        init_fusion_model(store, to_fusion_config(cfg), rng);
        return;
    }
    int hidden = 0;
    if (cfg.trunk == "cde") {
        CdeConfig cc{cfg.cde_hidden, cfg.cde_width, cfg.cde_substeps};
        init_cde_trunk(store, "trunk", kStructuredChannels + 1, cc, rng);
        hidden = cc.hidden;
    } else {
        LstmConfig lc{kLstmFeatures, cfg.lstm_hidden, cfg.lstm_layers};
        init_lstm(store, "trunk", lc, rng);
        hidden = lc.hidden;
    }
    int readout_in = hidden;
    if (cfg.modality == "multimodal") {
        ImageEncoderConfig ic;
        ic.d_img = cfg.d_img;
        init_image_encoder(store, "img", ic, rng);
        readout_in += cfg.d_img;
    }
    init_affine(store, "trunk.readout", readout_in, 1, rng);
}

namespace {

// Baselines read out each trunk state directly; multimodal appends the image
// embedding before the final affine layer.
ModelForward baseline_forward(const BoundParams& params, const ExperimentConfig& cfg,
                              const PreparedPatient& patient, const PreprocessStats& stats,
                              const std::vector<double>& times) {
    if (patient.weeks.size() < 2) {
        throw ContractError("patient " + patient.id + " needs at least two visits to forecast");
    }
    ModelForward out;
    out.pred_times = times;

    std::vector<Tensor> trunk_rows;
    if (cfg.trunk == "cde") {
        CdeConfig cc{cfg.cde_hidden, cfg.cde_width, cfg.cde_substeps};
        ControlPath path = build_path(structured_sequence(patient), cfg.scheme);
        trunk_rows = solve_cde(params, "trunk", path, times, cc).states;
    } else {
        LstmConfig lc{kLstmFeatures, cfg.lstm_hidden, cfg.lstm_layers};
        trunk_rows = lstm_forward(params, "trunk", lc, lstm_step_features(patient, stats));
    }

    Tensor img_emb;
    const bool multimodal = cfg.modality == "multimodal";
    if (multimodal) {
        if (patient.source == nullptr || patient.source->images.empty()) {
            throw ContractError("patient " + patient.id + " has no image slices");
        }
        img_emb = encode_images(params, "img", patient.source->images);
    }

    std::vector<Tensor> preds;
    preds.reserve(trunk_rows.size());
    for (const Tensor& row : trunk_rows) {
        Tensor in = row;
        if (multimodal) {
            std::vector<Tensor> parts{row, img_emb};
            in = concat_lastdim(parts);
        }
        preds.push_back(affine(params, "trunk.readout", in));
    }
    out.predictions = reshape(stack_rows(preds), {static_cast<int>(preds.size())});
    return out;
}

}  // namespace

ModelForward experiment_forward(const BoundParams& params, const ExperimentConfig& cfg,
                                const PreparedPatient& patient,
                                const PreprocessStats& stats) {
    if (cfg.fusion != "none") {
        FusionForward f = realdifffusionnet_forward(params, to_fusion_config(cfg), patient, stats);
        return ModelForward{f.predictions, std::move(f.pred_times)};
    }
    if (patient.weeks.size() < 2) {
        throw ContractError("patient " + patient.id + " needs at least two visits to forecast");
    }
    std::vector<double> times(patient.weeks.begin() + 1, patient.weeks.end());
    return baseline_forward(params, cfg, patient, stats, times);
}

ModelForward experiment_forward_at(const BoundParams& params, const ExperimentConfig& cfg,
                                   const PreparedPatient& patient,
                                   const PreprocessStats& stats,
                                   const std::vector<double>& times) {
    if (cfg.trunk != "cde") {
        throw ContractError("an lstm trunk predicts only at observed visits");
    }
    if (cfg.fusion != "none") {
        FusionForward f =
            realdifffusionnet_forward_at(params, to_fusion_config(cfg), patient, times);
        return ModelForward{f.predictions, std::move(f.pred_times)};
    }
    return baseline_forward(params, cfg, patient, stats, times);
}

namespace {

BoundParams unbound_view(const ParamStore& store) {
    BoundParams flat;
    for (const auto& [name, tensor] : store.entries()) flat[name] = tensor;
    return flat;
}

Tensor targets_of(const PreparedPatient& p) {
    std::vector<double> t(p.fvc_norm.begin() + 1, p.fvc_norm.end());
    int n = static_cast<int>(t.size());
    return Tensor(Shape{n}, std::move(t));
}

double eval_mean_loss(const ParamStore& store, const ExperimentConfig& cfg,
                      const std::vector<PreparedPatient>& split,
                      const PreprocessStats& stats) {
    if (split.empty()) return 0.0;
    BoundParams params = unbound_view(store);
    double sum = 0.0;
    for (const auto& p : split) {
        ModelForward f = experiment_forward(params, cfg, p, stats);
        sum += mse(f.predictions, targets_of(p)).item();
    }
    return sum / static_cast<double>(split.size());
}

std::vector<EpochLoss> train_stage(ParamStore& store, const ExperimentConfig& cfg,
                                   const PreparedCohort& data, int epochs, double lr,
                                   const std::string& stage, std::ostream* progress) {
    if (data.train.empty()) throw ContractError("training split is empty");
    std::vector<EpochLoss> losses;
    losses.reserve(static_cast<std::size_t>(epochs));
    AdamConfig ac;
    ac.lr = lr;
    Adam opt(ac);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double train_sum = 0.0;
        for (const auto& patient : data.train) {
            try {
                Tape tape;
                BoundParams bound = store.bind_all(tape);
                ModelForward f = experiment_forward(bound, cfg, patient, data.stats);
                Tensor loss = mse(f.predictions, targets_of(patient));
                double lv = loss.item();
                if (!std::isfinite(lv)) {
                    throw NumericError("training loss is not finite");
                }
                tape.backward(loss);
                GradMap grads;
                accumulate_grads(tape, bound, grads);
                clip_global_norm(grads, cfg.clip_norm);
                opt.step(store, grads);
                train_sum += lv;
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " [" + config_slug(cfg) + ", " +
                                   stage + " epoch " + std::to_string(epoch) + ", patient " +
                                   patient.id + "]");
            }
        }
        EpochLoss el;
        el.train = train_sum / static_cast<double>(data.train.size());
        el.val = eval_mean_loss(store, cfg, data.val, data.stats);
        losses.push_back(el);
        if (progress != nullptr && (epoch % 25 == 0 || epoch + 1 == epochs)) {
            *progress << config_slug(cfg) << " " << stage << " epoch " << epoch
                      << " train_loss " << fmt_short(el.train) << " val_loss "
                      << fmt_short(el.val) << "\n";
        }
    }
    return losses;
}

}  // namespace

SplitPredictions collect_predictions(const ParamStore& params, const ExperimentConfig& cfg,
                                     const std::vector<PreparedPatient>& split,
                                     const PreprocessStats& stats) {
    SplitPredictions out;
    BoundParams flat = unbound_view(params);
    for (const auto& p : split) {
        ModelForward f = experiment_forward(flat, cfg, p, stats);
        const auto& preds = f.predictions.values();
        for (std::size_t i = 0; i < preds.size(); ++i) {
            out.patient_ids.push_back(p.id);
            out.weeks.push_back(f.pred_times[i]);
            out.preds.push_back(preds[i]);
            out.targets.push_back(p.fvc_norm[i + 1]);
        }
    }
    return out;
}

MetricsReport evaluate_model(const ParamStore& params, const ExperimentConfig& cfg,
                             const PreparedCohort& data, std::ostream* warnings) {
    MetricsReport report;
    const std::vector<PreparedPatient>* splits[3] = {&data.train, &data.val, &data.test};
    MetricValues* out[3] = {&report.train, &report.val, &report.test};
    for (int s = 0; s < 3; ++s) {
        if (splits[s]->empty()) continue;  // zero-count placeholder
        SplitPredictions sp = collect_predictions(params, cfg, *splits[s], data.stats);
        *out[s] = compute_metrics(sp.preds, sp.targets, warnings);
    }
    return report;
}

RunArtifacts run_experiment(const ExperimentConfig& cfg, const PreparedCohort& data,
                            std::ostream* progress) {
    validate_config(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    RunArtifacts out;
    out.log.config = cfg;

    std::mt19937_64 rng(cfg.seed);
    ParamStore store;
    if (cfg.pretrain && cfg.fusion != "none") {
        // Stage 1: the structured trunk with a plain forecasting readout.
        ExperimentConfig pre = cfg;
        pre.fusion = "none";
        pre.modality = "structured";
        pre.pretrain = false;
        pre.time_embedding = false;
        pre.finetune_lr = 0.0;
        ParamStore pre_store;
        init_experiment_model(pre_store, pre, rng);
        out.log.pretrain_losses =
            train_stage(pre_store, pre, data, cfg.pretrain_epochs, cfg.lr, "pretrain", progress);

        // Stage 2: the trunk moves over bit-exactly, the readout is dropped
        // and every fusion-side parameter starts fresh.
        ParamStore handed = attach_embedding_head(pre_store, "trunk", cfg.d_emb, rng);
        init_experiment_model(store, cfg, rng);
        for (const auto& [name, tensor] : handed.entries()) {
            store.get(name) = tensor;
        }
    } else {
        init_experiment_model(store, cfg, rng);
    }

    const double main_lr =
        (cfg.pretrain && cfg.finetune_lr > 0.0) ? cfg.finetune_lr : cfg.lr;
    out.log.losses = train_stage(store, cfg, data, cfg.epochs, main_lr, "train", progress);
    out.log.metrics = evaluate_model(store, cfg, data, progress);
    out.params = std::move(store);
    out.log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

namespace {

ordered_json config_to_json(const ExperimentConfig& cfg) {
    ordered_json j;
    j["trunk"] = cfg.trunk;
    j["modality"] = cfg.modality;
    j["fusion"] = cfg.fusion;
    j["scheme"] = to_string(cfg.scheme);
    j["pretrain"] = cfg.pretrain;
    j["allow_noncausal"] = cfg.allow_noncausal;
    j["time_embedding"] = cfg.time_embedding;
    j["norm_order"] = cfg.norm_order;
    j["seed"] = cfg.seed;
    j["epochs"] = cfg.epochs;
    j["pretrain_epochs"] = cfg.pretrain_epochs;
    j["lr"] = cfg.lr;
    j["finetune_lr"] = cfg.finetune_lr;
    j["clip_norm"] = cfg.clip_norm;
    j["cde_hidden"] = cfg.cde_hidden;
    j["cde_width"] = cfg.cde_width;
    j["cde_substeps"] = cfg.cde_substeps;
    j["lstm_hidden"] = cfg.lstm_hidden;
    j["lstm_layers"] = cfg.lstm_layers;
    j["heads"] = cfg.heads;
    j["d_emb"] = cfg.d_emb;
    j["d_img"] = cfg.d_img;
    j["d_stat"] = cfg.d_stat;
    return j;
}

ExperimentConfig config_from_json(const ordered_json& j) {
    ExperimentConfig cfg;
    cfg.trunk = j.at("trunk").get<std::string>();
    cfg.modality = j.at("modality").get<std::string>();
    cfg.fusion = j.at("fusion").get<std::string>();
    cfg.scheme = scheme_from_string(j.at("scheme").get<std::string>());
    cfg.pretrain = j.at("pretrain").get<bool>();
    cfg.allow_noncausal = j.at("allow_noncausal").get<bool>();
    cfg.time_embedding = j.at("time_embedding").get<bool>();
    cfg.norm_order = j.at("norm_order").get<std::string>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.pretrain_epochs = j.at("pretrain_epochs").get<int>();
    cfg.lr = j.at("lr").get<double>();
    cfg.finetune_lr = j.at("finetune_lr").get<double>();
    cfg.clip_norm = j.at("clip_norm").get<double>();
    cfg.cde_hidden = j.at("cde_hidden").get<int>();
    cfg.cde_width = j.at("cde_width").get<int>();
    cfg.cde_substeps = j.at("cde_substeps").get<int>();
    cfg.lstm_hidden = j.at("lstm_hidden").get<int>();
    cfg.lstm_layers = j.at("lstm_layers").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.d_emb = j.at("d_emb").get<int>();
    cfg.d_img = j.at("d_img").get<int>();
    cfg.d_stat = j.at("d_stat").get<int>();
    return cfg;
}

ordered_json metric_values_to_json(const MetricValues& m) {
    ordered_json j;
    j["rmse"] = m.rmse;
    j["mae"] = m.mae;
    if (m.r2.has_value()) {
        j["r2"] = *m.r2;
    } else {
        j["r2"] = nullptr;
    }
    j["count"] = m.count;
    return j;
}

MetricValues metric_values_from_json(const ordered_json& j) {
    MetricValues m;
    m.rmse = j.at("rmse").get<double>();
    m.mae = j.at("mae").get<double>();
    if (!j.at("r2").is_null()) m.r2 = j.at("r2").get<double>();
    m.count = j.at("count").get<long long>();
    return m;
}

ordered_json losses_to_json(const std::vector<EpochLoss>& losses) {
    ordered_json arr = ordered_json::array();
    for (const auto& l : losses) {
        ordered_json e;
        e["train"] = l.train;
        e["val"] = l.val;
        arr.push_back(e);
    }
    return arr;
}

std::vector<EpochLoss> losses_from_json(const ordered_json& arr) {
    std::vector<EpochLoss> out;
    for (const auto& e : arr) {
        EpochLoss l;
        l.train = e.at("train").get<double>();
        l.val = e.at("val").get<double>();
        out.push_back(l);
    }
    return out;
}

}  // namespace

std::string run_log_to_json(const RunLog& log) {
    ordered_json j;
    j["version"] = log.version;
    j["config"] = config_to_json(log.config);
    j["pretrain_losses"] = losses_to_json(log.pretrain_losses);
    j["losses"] = losses_to_json(log.losses);
    ordered_json m;
    m["train"] = metric_values_to_json(log.metrics.train);
    m["val"] = metric_values_to_json(log.metrics.val);
    m["test"] = metric_values_to_json(log.metrics.test);
    j["metrics"] = m;
    j["wall_seconds"] = log.wall_seconds;
    return j.dump(2) + "\n";
}

RunLog run_log_from_json(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
        RunLog log;
        log.version = j.at("version").get<std::string>();
        log.config = config_from_json(j.at("config"));
        log.pretrain_losses = losses_from_json(j.at("pretrain_losses"));
        log.losses = losses_from_json(j.at("losses"));
        log.metrics.train = metric_values_from_json(j.at("metrics").at("train"));
        log.metrics.val = metric_values_from_json(j.at("metrics").at("val"));
        log.metrics.test = metric_values_from_json(j.at("metrics").at("test"));
        log.wall_seconds = j.at("wall_seconds").get<double>();
        return log;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("run log: ") + e.what());
    }
}

void save_run(const std::string& dir, const RunArtifacts& run) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir + "/runlog.json", std::ios::binary);
    if (!out) throw FormatError("cannot write '" + dir + "/runlog.json'");
    out << run_log_to_json(run.log);
    out.close();
    save_checkpoint(dir + "/params.ckpt", run.params);
}

RunArtifacts load_run(const std::string& dir) {
    std::ifstream in(dir + "/runlog.json", std::ios::binary);
    if (!in) throw FormatError("cannot open '" + dir + "/runlog.json'");
    std::ostringstream buf;
    buf << in.rdbuf();
    RunArtifacts run;
    run.log = run_log_from_json(buf.str());
    run.params = load_checkpoint(dir + "/params.ckpt");
    return run;
}

namespace {

std::string csv_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace

void emit_plot_data(const RunArtifacts& run, const PreparedCohort& data,
                    const std::string& out_dir, const std::string& patient_id) {
    const ExperimentConfig& cfg = run.log.config;
    std::filesystem::create_directories(out_dir);
    const FeatureStats& fvc = data.stats.fvc;

    {
        std::ofstream out(out_dir + "/actual_vs_pred.csv", std::ios::binary);
        if (!out) throw FormatError("cannot write '" + out_dir + "/actual_vs_pred.csv'");
        out << "patient_id,week,actual,predicted,split\n";
        const std::vector<PreparedPatient>* splits[3] = {&data.train, &data.val, &data.test};
        for (int s = 0; s < 3; ++s) {
            SplitPredictions sp = collect_predictions(run.params, cfg, *splits[s], data.stats);
            for (std::size_t i = 0; i < sp.preds.size(); ++i) {
                out << sp.patient_ids[i] << "," << csv_num(sp.weeks[i]) << ","
                    << csv_num(fvc.denormalize(sp.targets[i])) << ","
                    << csv_num(fvc.denormalize(sp.preds[i])) << "," << split_names[s] << "\n";
            }
        }
    }

    const PreparedPatient* patient = nullptr;
    for (const auto* split : {&data.train, &data.val, &data.test}) {
        for (const auto& p : *split) {
            if (p.id == patient_id) patient = &p;
        }
    }
    if (patient == nullptr) {
        throw ContractError("patient '" + patient_id + "' is not in the cohort");
    }

    BoundParams flat;
    for (const auto& [name, tensor] : run.params.entries()) flat[name] = tensor;
    std::vector<double> times;
    if (cfg.trunk == "cde") {
        // weekly curve over the whole span, via the path's continuous evaluation
        for (double t = patient->weeks.front(); t < patient->weeks.back(); t += 1.0) {
            times.push_back(t);
        }
        times.push_back(patient->weeks.back());
    } else {
        times.assign(patient->weeks.begin() + 1, patient->weeks.end());
    }
    ModelForward f = cfg.trunk == "cde"
                         ? experiment_forward_at(flat, cfg, *patient, data.stats, times)
                         : experiment_forward(flat, cfg, *patient, data.stats);

    std::ofstream out(out_dir + "/trajectory_" + patient_id + ".csv", std::ios::binary);
    if (!out) throw FormatError("cannot write trajectory file for '" + patient_id + "'");
    out << "week,predicted,actual\n";
    const auto& preds = f.predictions.values();
    for (std::size_t i = 0; i < times.size(); ++i) {
        out << csv_num(times[i]) << "," << csv_num(fvc.denormalize(preds[i])) << ",";
        bool observed = false;
        for (std::size_t k = 0; k < patient->weeks.size(); ++k) {
            if (std::abs(patient->weeks[k] - times[i]) < 1e-9) {
                out << csv_num(fvc.denormalize(patient->fvc_norm[k]));
                observed = true;
                break;
            }
        }
        (void)observed;
        out << "\n";
    }
}

namespace {

struct CellSpec {
    std::string label;
    ExperimentConfig cfg;
    double paper[3];
};

CellSpec make_cell(const ExperimentConfig& base, const std::string& label,
                   const std::string& trunk, const std::string& modality,
                   const std::string& fusion, Scheme scheme, bool pretrain,
                   const double (&paper)[3]) {
    CellSpec cell;
    cell.label = label;
    cell.cfg = base;
    cell.cfg.trunk = trunk;
    cell.cfg.modality = modality;
    cell.cfg.fusion = fusion;
    cell.cfg.scheme = scheme;
    cell.cfg.pretrain = pretrain;
    // cell identity drives the seed, so grid order cannot matter
    cell.cfg.seed = 0;
    cell.cfg.seed = base.seed ^ fnv1a64(serialize_config(cell.cfg));
    cell.paper[0] = paper[0];
    cell.paper[1] = paper[1];
    cell.paper[2] = paper[2];
    return cell;
}

}  // namespace

std::string format_ablation_table(const AblationComparison& cmp) {
    std::ostringstream out;
    out << "== " << cmp.title << " ==\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%-28s %10s %10s %10s   %s\n", "model", "train_rmse",
                  "val_rmse", "test_rmse", "paper (OSIC) train/val/test");
    out << line;
    for (const AblationCell* cell : {&cmp.a, &cmp.b}) {
        std::snprintf(line, sizeof(line), "%-28s %10.6f %10.6f %10.6f   %s/%s/%s\n",
                      cell->label.c_str(), cell->metrics.train.rmse, cell->metrics.val.rmse,
                      cell->metrics.test.rmse, fmt_short(cell->paper_train_rmse).c_str(),
                      fmt_short(cell->paper_val_rmse).c_str(),
                      fmt_short(cell->paper_test_rmse).c_str());
        out << line;
    }
    return out.str();
}

void write_ablation_report(const AblationReport& report, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ostringstream all;
    for (const auto& cmp : report.comparisons) {
        std::ofstream csv(out_dir + "/" + cmp.slug + ".csv", std::ios::binary);
        if (!csv) throw FormatError("cannot write ablation table '" + cmp.slug + "'");
        csv << "model,train_rmse,val_rmse,test_rmse,"
               "paper_train_rmse (OSIC),paper_val_rmse (OSIC),paper_test_rmse (OSIC)\n";
        for (const AblationCell* cell : {&cmp.a, &cmp.b}) {
            csv << cell->label << "," << csv_num(cell->metrics.train.rmse) << ","
                << csv_num(cell->metrics.val.rmse) << "," << csv_num(cell->metrics.test.rmse)
                << "," << fmt_short(cell->paper_train_rmse) << ","
                << fmt_short(cell->paper_val_rmse) << "," << fmt_short(cell->paper_test_rmse)
                << "\n";
        }
        all << format_ablation_table(cmp) << "\n";
    }
    std::ofstream txt(out_dir + "/report.txt", std::ios::binary);
    if (!txt) throw FormatError("cannot write ablation report");
    txt << all.str();
}

AblationReport run_ablation_grid(const ExperimentConfig& base, const PreparedCohort& data,
                                 const std::string& out_dir, std::ostream* progress) {
    validate_config(base);
    const auto t0 = std::chrono::steady_clock::now();

    const Scheme hermite = Scheme::hermite_backward;
    const Scheme rect = Scheme::rectilinear;
    struct CmpSpec {
        const char* slug;
        const char* title;
        CellSpec a, b;
    };
    const std::vector<CmpSpec> specs = {
        {"struct_vs_multi", "Neural CDE: structured versus multimodal data",
         make_cell(base, "Structured Data", "cde", "structured", "none", rect, false,
                   {1.076, 1.054, 1.215}),
         make_cell(base, "Multimodal Data", "cde", "multimodal", "none", rect, false,
                   {0.4147, 0.6559, 0.5405})},
        {"multi_lstm_vs_cde", "Multimodal LSTM versus multimodal Neural CDE",
         make_cell(base, "LSTM", "lstm", "multimodal", "none", rect, false,
                   {0.5824, 0.8586, 1.396}),
         make_cell(base, "Neural CDE", "cde", "multimodal", "none", rect, false,
                   {0.4147, 0.6559, 0.5405})},
        {"sum_vs_concat", "Fusion embeddings: sum versus concatenation",
         make_cell(base, "Sum", "cde", "multimodal", "sum", hermite, true,
                   {0.8879, 1.118, 0.902}),
         make_cell(base, "Concatenation", "cde", "multimodal", "concat", hermite, true,
                   {0.1360, 0.3465, 0.2912})},
        {"lstm_vs_cde_fusion", "LSTM fusion versus Neural CDE fusion",
         make_cell(base, "LSTM Fusion", "lstm", "multimodal", "concat", hermite, true,
                   {0.3038, 0.8191, 0.9066}),
         make_cell(base, "Neural CDE Fusion", "cde", "multimodal", "concat", hermite, true,
                   {0.1360, 0.3465, 0.2912})},
        {"hermite_vs_rectilinear", "Cubic Hermite splines versus rectilinear interpolation",
         make_cell(base, "Cubic Hermite Splines", "cde", "multimodal", "concat", hermite, true,
                   {0.1360, 0.3465, 0.2912}),
         make_cell(base, "Rectilinear", "cde", "multimodal", "concat", rect, true,
                   {0.1278, 0.3371, 0.2570})},
        {"pretrained_vs_fused", "Pretrained Neural CDE versus the fused model",
         make_cell(base, "Pretrained CDE", "cde", "structured", "none", rect, false,
                   {1.076, 1.054, 1.215}),
         make_cell(base, "RealDiffFusionNet", "cde", "multimodal", "concat", rect, true,
                   {0.1278, 0.3371, 0.2570})},
    };

    AblationReport report;
    std::map<std::string, MetricsReport> done;
    for (const auto& spec : specs) {
        AblationComparison cmp;
        cmp.slug = spec.slug;
        cmp.title = spec.title;
        AblationCell* cells[2] = {&cmp.a, &cmp.b};
        const CellSpec* sides[2] = {&spec.a, &spec.b};
        for (int s = 0; s < 2; ++s) {
            const CellSpec& side = *sides[s];
            AblationCell& cell = *cells[s];
            cell.label = side.label;
            cell.config = side.cfg;
            cell.paper_train_rmse = side.paper[0];
            cell.paper_val_rmse = side.paper[1];
            cell.paper_test_rmse = side.paper[2];
            const std::string key = serialize_config(side.cfg);
            auto it = done.find(key);
            if (it == done.end()) {
                if (progress != nullptr) {
                    *progress << "ablation cell " << config_slug(side.cfg) << "\n";
                }
                try {
                    RunArtifacts run = run_experiment(side.cfg, data, progress);
                    save_run(out_dir + "/cells/" + config_slug(side.cfg), run);
                    it = done.emplace(key, run.log.metrics).first;
                } catch (const Error&) {
                    // completed cells stay on disk alongside the partial report
                    write_ablation_report(report, out_dir);
                    throw;
                }
            }
            cell.metrics = it->second;
        }
        report.comparisons.push_back(std::move(cmp));
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_ablation_report(report, out_dir);
    return report;
}

}  // namespace realdiff
