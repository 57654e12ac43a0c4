#include "realdiff/fusion.hpp"

#include <cmath>

#include "realdiff/errors.hpp"

namespace realdiff {

ObservationSequence structured_sequence(const PreparedPatient& p) {
    ObservationSequence obs;
    obs.times = p.weeks;
    obs.values.reserve(p.weeks.size());
    for (std::size_t i = 0; i < p.weeks.size(); ++i) {
        obs.values.push_back({p.fvc_norm[i], p.age_norm, static_cast<double>(p.sex_code),
                              static_cast<double>(p.smoking_code)});
    }
    return obs;
}

std::vector<Tensor> lstm_step_features(const PreparedPatient& p, const PreprocessStats& stats) {
    if (p.weeks.size() < 2) {
        throw ContractError("patient " + p.id + " needs at least two visits to forecast");
    }
    std::vector<Tensor> out;
    out.reserve(p.weeks.size() - 1);
    for (std::size_t i = 0; i + 1 < p.weeks.size(); ++i) {
        double delta = p.weeks[i + 1] - p.weeks[i];
        out.push_back(Tensor(
            Shape{kLstmFeatures},
            {p.fvc_norm[i], p.age_norm, static_cast<double>(p.sex_code),
             static_cast<double>(p.smoking_code), stats.week.normalize(p.weeks[i]),
             stats.week.normalize(p.weeks[i + 1]), delta / stats.week.stddev}));
    }
    return out;
}

Tensor static_features(const PreparedPatient& p) {
    return Tensor(Shape{3}, {p.age_norm, static_cast<double>(p.sex_code),
                             static_cast<double>(p.smoking_code)});
}

int fusion_d_model(const FusionConfig& cfg) {
    if (cfg.mode == "concat") return cfg.d_emb + cfg.d_img + cfg.d_stat;
    if (cfg.mode == "sum") return cfg.d_emb;
    throw ConfigError("unknown fusion mode '" + cfg.mode + "'");
}

void init_fusion_model(ParamStore& store, const FusionConfig& cfg, std::mt19937_64& rng) {
    int d_model = fusion_d_model(cfg);
    if (cfg.heads < 1 || d_model % cfg.heads != 0) {
        throw ConfigError("token width " + std::to_string(d_model) +
                          " is not divisible by " + std::to_string(cfg.heads) + " heads");
    }
    if (cfg.norm_order != "pre" && cfg.norm_order != "post") {
        throw ConfigError("norm_order must be 'pre' or 'post', got '" + cfg.norm_order + "'");
    }

    if (cfg.trunk == "cde") {
        init_cde_trunk(store, "trunk", kStructuredChannels + 1, cfg.cde, rng);
        init_affine(store, "trunk.embed", cfg.cde.hidden, cfg.d_emb, rng);
    } else if (cfg.trunk == "lstm") {
        LstmConfig lc = cfg.lstm;
        lc.input = kLstmFeatures;
        init_lstm(store, "trunk", lc, rng);
        init_affine(store, "trunk.embed", lc.hidden, cfg.d_emb, rng);
    } else {
        throw ConfigError("unknown trunk '" + cfg.trunk + "'");
    }

    ImageEncoderConfig ic;
    ic.d_img = cfg.d_img;
    init_image_encoder(store, "img", ic, rng);
    init_static_encoder(store, "stat", 3, 32, cfg.d_stat, rng);

    if (cfg.mode == "sum") {
        double bi = 1.0 / std::sqrt(static_cast<double>(cfg.d_img));
        double bs = 1.0 / std::sqrt(static_cast<double>(cfg.d_stat));
        store.create("fuse.img_proj.W",
                     Tensor::uniform({cfg.d_emb, cfg.d_img}, -bi, bi, rng));
        store.create("fuse.stat_proj.W",
                     Tensor::uniform({cfg.d_emb, cfg.d_stat}, -bs, bs, rng));
    }

    double ab = 1.0 / std::sqrt(static_cast<double>(d_model));
    for (const char* name : {"Wq", "Wk", "Wv", "Wo"}) {
        store.create(std::string("attn.") + name,
                     Tensor::uniform({d_model, d_model}, -ab, ab, rng));
    }
    for (const char* ln : {"block.ln1", "block.ln2"}) {
        store.create(std::string(ln) + ".gamma", Tensor::full({d_model}, 1.0));
        store.create(std::string(ln) + ".beta", Tensor::zeros({d_model}));
    }
    init_affine_rows(store, "block.ffn.l1", d_model, 4 * d_model, rng);
    init_affine_rows(store, "block.ffn.l2", 4 * d_model, d_model, rng);
    init_affine_rows(store, "head.h1", d_model, d_model, rng);
    init_affine_rows(store, "head.h2", d_model, 1, rng);
    if (cfg.time_embedding) init_affine_rows(store, "time_embed", 1, d_model, rng);
}

Tensor fuse_embeddings(const BoundParams& params, const std::string& prefix,
                       const Tensor& trunk, const Tensor& img, const Tensor& stat,
                       const std::string& mode) {
    int steps = trunk.dim(0);
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(steps));
    if (mode == "concat") {
        for (int t = 0; t < steps; ++t) {
            Tensor parts[] = {take_row(trunk, t), img, stat};
            rows.push_back(concat_lastdim(parts));
        }
    } else if (mode == "sum") {
        if (params.count(prefix + ".img_proj.W") == 0 ||
            params.count(prefix + ".stat_proj.W") == 0) {
            throw ShapeError("sum fusion requires projections onto the embedding width");
        }
        Tensor pi = matvec(pget(params, prefix + ".img_proj.W"), img);
        Tensor ps = matvec(pget(params, prefix + ".stat_proj.W"), stat);
        Tensor offset = add(pi, ps);
        for (int t = 0; t < steps; ++t) {
            rows.push_back(add(take_row(trunk, t), offset));
        }
    } else {
        throw ConfigError("unknown fusion mode '" + mode + "'");
    }
    return stack_rows(rows);
}

Tensor causal_attention(const BoundParams& params, const std::string& prefix,
                        const Tensor& tokens, int heads) {
    int d_model = tokens.dim(1);
    if (heads < 1 || d_model % heads != 0) {
        throw ConfigError("token width " + std::to_string(d_model) +
                          " is not divisible by " + std::to_string(heads) + " heads");
    }
    int dk = d_model / heads;

    Tensor q = matmul(tokens, pget(params, prefix + ".Wq"));
    Tensor k = matmul(tokens, pget(params, prefix + ".Wk"));
    Tensor v = matmul(tokens, pget(params, prefix + ".Wv"));

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_lastdim(q, h * dk, dk);
        Tensor kh = slice_lastdim(k, h * dk, dk);
        Tensor vh = slice_lastdim(v, h * dk, dk);
        Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dk)));
        head_outs.push_back(matmul(causal_softmax(scores), vh));
    }
    Tensor merged = concat_lastdim(head_outs);
    return matmul(merged, pget(params, prefix + ".Wo"));
}

Tensor fusion_block_forward(const BoundParams& params, const FusionConfig& cfg,
                            const Tensor& tokens) {
    if (cfg.norm_order != "pre" && cfg.norm_order != "post") {
        throw ConfigError("norm_order must be 'pre' or 'post', got '" + cfg.norm_order + "'");
    }
    bool pre = cfg.norm_order == "pre";
    const Tensor& g1 = pget(params, "block.ln1.gamma");
    const Tensor& b1 = pget(params, "block.ln1.beta");
    const Tensor& g2 = pget(params, "block.ln2.gamma");
    const Tensor& b2 = pget(params, "block.ln2.beta");

    Tensor attn_in = pre ? layer_norm(tokens, g1, b1) : tokens;
    Tensor u = add(tokens, causal_attention(params, "attn", attn_in, cfg.heads));
    if (!pre) u = layer_norm(u, g1, b1);

    Tensor ffn_in = pre ? layer_norm(u, g2, b2) : u;
    Tensor f = affine_rows(params, "block.ffn.l2",
                           relu(affine_rows(params, "block.ffn.l1", ffn_in)));
    Tensor v = add(u, f);
    if (!pre) v = layer_norm(v, g2, b2);

    Tensor hidden = relu(affine_rows(params, "head.h1", v));
    Tensor out = affine_rows(params, "head.h2", hidden);  // [T, 1]
    return reshape(out, {tokens.dim(0)});
}

ParamStore attach_embedding_head(const ParamStore& pretrained, const std::string& trunk_prefix,
                                 int d_emb, std::mt19937_64& rng) {
    // the hidden width lives in the initial-state bias (cde) or any gate bias (lstm)
    std::string width_param;
    if (pretrained.has(trunk_prefix + ".init.b")) {
        width_param = trunk_prefix + ".init.b";
    } else if (pretrained.has(trunk_prefix + ".l0.f.b")) {
        width_param = trunk_prefix + ".l0.f.b";
    } else {
        throw ContractError("no trained trunk found under '" + trunk_prefix + "'");
    }
    std::string readout_prefix = trunk_prefix + ".readout.";
    ParamStore out;
    for (const auto& [name, tensor] : pretrained.entries()) {
        if (name.rfind(readout_prefix, 0) == 0) continue;
        out.create(name, tensor);
    }
    int hidden = pretrained.get(width_param).dim(0);
    init_affine(out, trunk_prefix + ".embed", hidden, d_emb, rng);
    return out;
}

namespace {

// Embeddings in hand, the fusion tail is the same for every trunk and any
// choice of evaluation times.
FusionForward fuse_and_predict(const BoundParams& params, const FusionConfig& cfg,
                               const PreparedPatient& patient,
                               std::vector<double> pred_times,
                               const std::vector<Tensor>& emb_rows) {
    if (patient.source == nullptr || patient.source->images.empty()) {
        throw ContractError("patient " + patient.id + " has no image slices");
    }
    FusionForward out;
    out.pred_times = std::move(pred_times);

    Tensor trunk_emb = stack_rows(emb_rows);
    Tensor img_emb = encode_images(params, "img", patient.source->images);
    Tensor stat_emb = encode_static(params, "stat", static_features(patient));
    Tensor tokens = fuse_embeddings(params, "fuse", trunk_emb, img_emb, stat_emb, cfg.mode);

    if (cfg.time_embedding) {
        std::vector<double> scaled;
        scaled.reserve(out.pred_times.size());
        // year-scale keeps the learned time input O(1) over the study window
        for (double t : out.pred_times) scaled.push_back(t / 52.0);
        int steps = static_cast<int>(scaled.size());
        Tensor times(Shape{steps, 1}, std::move(scaled));
        tokens = add(tokens, affine_rows(params, "time_embed", times));
    }

    out.predictions = fusion_block_forward(params, cfg, tokens);
    return out;
}

void require_causal_scheme(const FusionConfig& cfg) {
    if (!scheme_is_causal(cfg.scheme) && !cfg.allow_noncausal) {
        throw ConfigError(std::string("scheme '") + to_string(cfg.scheme) +
                          "' lets later observations reshape the path before the "
                          "prediction time; set allow_noncausal to override");
    }
}

std::vector<Tensor> cde_embeddings(const BoundParams& params, const FusionConfig& cfg,
                                   const PreparedPatient& patient,
                                   const std::vector<double>& times) {
    ControlPath path = build_path(structured_sequence(patient), cfg.scheme);
    CdeSolveResult solved = solve_cde(params, "trunk", path, times, cfg.cde);
    std::vector<Tensor> rows;
    rows.reserve(solved.states.size());
    for (const Tensor& z : solved.states) {
        rows.push_back(affine(params, "trunk.embed", z));
    }
    return rows;
}

}  // namespace

FusionForward realdifffusionnet_forward(const BoundParams& params, const FusionConfig& cfg,
                                        const PreparedPatient& patient,
                                        const PreprocessStats& stats) {
    if (patient.weeks.size() < 2) {
        throw ContractError("patient " + patient.id + " needs at least two visits to forecast");
    }
    std::vector<double> pred_times(patient.weeks.begin() + 1, patient.weeks.end());

    std::vector<Tensor> emb_rows;
    if (cfg.trunk == "cde") {
        require_causal_scheme(cfg);
        emb_rows = cde_embeddings(params, cfg, patient, pred_times);
    } else if (cfg.trunk == "lstm") {
        LstmConfig lc = cfg.lstm;
        lc.input = kLstmFeatures;
        std::vector<Tensor> inputs = lstm_step_features(patient, stats);
        for (const Tensor& h : lstm_forward(params, "trunk", lc, inputs)) {
            emb_rows.push_back(affine(params, "trunk.embed", h));
        }
    } else {
        throw ConfigError("unknown trunk '" + cfg.trunk + "'");
    }
    return fuse_and_predict(params, cfg, patient, std::move(pred_times), emb_rows);
}

FusionForward realdifffusionnet_forward_at(const BoundParams& params, const FusionConfig& cfg,
                                           const PreparedPatient& patient,
                                           const std::vector<double>& eval_times) {
    if (cfg.trunk != "cde") {
        throw ContractError("an lstm trunk predicts only at observed visits");
    }
    if (eval_times.empty()) throw ContractError("no evaluation times given");
    require_causal_scheme(cfg);
    std::vector<Tensor> emb_rows = cde_embeddings(params, cfg, patient, eval_times);
    return fuse_and_predict(params, cfg, patient, eval_times, emb_rows);
}

}  // namespace realdiff
