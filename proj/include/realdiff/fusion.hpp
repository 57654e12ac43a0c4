#pragma once

#include <random>
#include <string>
#include <vector>

#include "realdiff/cde.hpp"
#include "realdiff/cohort.hpp"
#include "realdiff/encoders.hpp"
#include "realdiff/lstm.hpp"
#include "realdiff/nn.hpp"
#include "realdiff/path.hpp"

namespace realdiff {

// Control channels fed to the CDE trunk (plus the prepended time channel).
inline constexpr int kStructuredChannels = 4;  // fvc, age, sex code, smoking code
// Per-step features fed to the LSTM trunk and baseline.
inline constexpr int kLstmFeatures = 7;

// Visit-level channels on the raw week axis; static values repeat per row so
// the path carries them alongside the evolving FVC.
ObservationSequence structured_sequence(const PreparedPatient& p);

// One feature row per forecasting step i -> i+1:
// [fvc, age, sex, smoking, week_i, week_{i+1}, delta], weeks z-scored on
// train stats and the gap scaled by the week deviation.
std::vector<Tensor> lstm_step_features(const PreparedPatient& p, const PreprocessStats& stats);

Tensor static_features(const PreparedPatient& p);  // [3]

struct FusionConfig {
    std::string trunk = "cde";    // cde | lstm
    Scheme scheme = Scheme::rectilinear;
    std::string mode = "concat";  // concat | sum
    int heads = 4;
    int d_emb = 16;
    int d_img = 16;
    int d_stat = 8;
    std::string norm_order = "pre";  // pre | post residual normalization
    bool allow_noncausal = false;
    bool time_embedding = false;  // optional learned map from prediction time
    CdeConfig cde;
    LstmConfig lstm;  // input width is fixed to kLstmFeatures internally
};

int fusion_d_model(const FusionConfig& cfg);

// Creates the full parameter set: trunk.* (cde or lstm) + trunk.embed, img.*,
// stat.*, fuse.* (sum mode), attn.*, block.*, head.*.
void init_fusion_model(ParamStore& store, const FusionConfig& cfg, std::mt19937_64& rng);

// Per-step tokens [T, d_model]. concat: [trunk_t | img | static]. sum: img and
// static pass through bias-free projections onto d_emb and add to trunk_t, so
// a zero embedding contributes nothing.
Tensor fuse_embeddings(const BoundParams& params, const std::string& prefix,
                       const Tensor& trunk, const Tensor& img, const Tensor& stat,
                       const std::string& mode);

// Scaled dot-product attention per head with the causal mask baked into the
// softmax; heads concatenate and project through Wo. No biases.
Tensor causal_attention(const BoundParams& params, const std::string& prefix,
                        const Tensor& tokens, int heads);

// norm_order pre:  u = tokens + MHA(LN1(tokens)); v = u + FFN(LN2(u))
// norm_order post: u = LN1(tokens + MHA(tokens)); v = LN2(u + FFN(u))
// predictions: affine(relu(affine(v))) per step -> [T]
Tensor fusion_block_forward(const BoundParams& params, const FusionConfig& cfg,
                            const Tensor& tokens);

// Copies every trunk parameter bit-exactly, drops the forecasting readout and
// adds a freshly initialized embedding map for fusion fine-tuning.
ParamStore attach_embedding_head(const ParamStore& pretrained, const std::string& trunk_prefix,
                                 int d_emb, std::mt19937_64& rng);

struct FusionForward {
    Tensor predictions;              // [T-1], normalized FVC scale
    std::vector<double> pred_times;  // the visit times being forecast
};

// Whole-model forward for one patient: trunk embeddings at each forecast
// time, fused with the image and static embeddings, through the attention
// block to per-step predictions. Non-causal schemes are refused unless
// explicitly allowed, since they leak future observations into the path.
FusionForward realdifffusionnet_forward(const BoundParams& params, const FusionConfig& cfg,
                                        const PreparedPatient& patient,
                                        const PreprocessStats& stats);

// Same model at caller-chosen times, via the path's continuous evaluation.
// CDE trunks only: an LSTM trunk has no state between visits.
FusionForward realdifffusionnet_forward_at(const BoundParams& params, const FusionConfig& cfg,
                                           const PreparedPatient& patient,
                                           const std::vector<double>& eval_times);

}  // namespace realdiff
