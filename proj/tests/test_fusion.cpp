#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "realdiff/errors.hpp"
#include "realdiff/fusion.hpp"
#include "realdiff/optim.hpp"

using namespace realdiff;

namespace {

Tensor random_rows(int rows, int cols, std::uint64_t seed, double amp = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-amp, amp);
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (auto& x : v) x = u(rng);
    return Tensor(Shape{rows, cols}, std::move(v));
}

void fill_param(ParamStore& store, const std::string& name, double v) {
    Tensor& t = store.get(name);
    double* d = t.mutable_data();
    std::fill(d, d + t.size(), v);
}

GrayImage random_image(int h, int w, std::uint64_t seed) {
    GrayImage img;
    img.height = h;
    img.width = w;
    img.pixels.resize(static_cast<std::size_t>(h) * w);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& p : img.pixels) p = u(rng);
    return img;
}

// Record + prepared view with a stable source pointer.
struct TestPatient {
    PatientRecord record;
    PreparedPatient prepared;

    TestPatient(std::vector<double> weeks, std::vector<double> fvc_norm, std::uint64_t img_seed) {
        record.id = "TP";
        record.weeks = weeks;
        record.images.push_back(random_image(8, 8, img_seed));
        record.image_paths.push_back("images/TP_0.pgm");
        prepared.id = record.id;
        prepared.weeks = std::move(weeks);
        prepared.fvc_norm = std::move(fvc_norm);
        prepared.age_norm = 0.3;
        prepared.sex_code = 1;
        prepared.smoking_code = 2;
        prepared.source = &record;
    }
};

PreprocessStats test_stats() {
    PreprocessStats s;
    s.fvc = {2500.0, 400.0};
    s.age = {65.0, 8.0};
    s.week = {20.0, 12.0};
    s.sex = LabelMap{{"Female", "Male"}};
    s.smoking = LabelMap{{"Currently smokes", "Ex-smoker", "Never smoked"}};
    return s;
}

FusionConfig small_config() {
    FusionConfig cfg;
    cfg.d_emb = 4;
    cfg.d_img = 4;
    cfg.d_stat = 2;
    cfg.heads = 2;  // d_model = 10
    cfg.cde = CdeConfig{4, 8, 2};
    cfg.lstm = LstmConfig{0, 4, 2};
    return cfg;
}

}  // namespace

TEST_CASE("concat fusion lays out trunk, image and static side by side") {
    Tensor trunk = random_rows(3, 4, 1);
    Tensor img(Shape{3}, {10.0, 11.0, 12.0});
    Tensor stat(Shape{2}, {20.0, 21.0});
    BoundParams empty;
    Tensor tokens = fuse_embeddings(empty, "fuse", trunk, img, stat, "concat");
    REQUIRE(tokens.shape() == Shape{3, 9});
    for (int t = 0; t < 3; ++t) {
        for (int j = 0; j < 4; ++j) {
            CHECK(tokens.at({t, j}) == trunk.at({t, j}));
        }
        for (int j = 0; j < 3; ++j) CHECK(tokens.at({t, 4 + j}) == img.at({j}));
        for (int j = 0; j < 2; ++j) CHECK(tokens.at({t, 7 + j}) == stat.at({j}));
    }
}

TEST_CASE("sum fusion with zero side embeddings returns the trunk unchanged") {
    ParamStore store;
    std::mt19937_64 rng(3);
    store.create("fuse.img_proj.W", Tensor::uniform({4, 3}, -1, 1, rng));
    store.create("fuse.stat_proj.W", Tensor::uniform({4, 2}, -1, 1, rng));
    Tape tape;
    BoundParams bound = store.bind_all(tape);

    Tensor trunk = random_rows(3, 4, 5);
    Tensor tokens = fuse_embeddings(bound, "fuse", trunk, Tensor::zeros({3}),
                                    Tensor::zeros({2}), "sum");
    CHECK(tokens.same_values(trunk));

    // nonzero embeddings shift every step by the same projected offset
    Tensor img(Shape{3}, {1.0, -2.0, 0.5});
    Tensor shifted = fuse_embeddings(bound, "fuse", trunk, img, Tensor::zeros({2}), "sum");
    CHECK(!shifted.same_values(trunk));

    BoundParams empty;
    CHECK_THROWS_AS(fuse_embeddings(empty, "fuse", trunk, img, Tensor::zeros({2}), "sum"),
                    ShapeError);
    CHECK_THROWS_AS(fuse_embeddings(empty, "fuse", trunk, img, Tensor::zeros({2}), "mean"),
                    ConfigError);
}

TEST_CASE("concat tokens change only where their inputs change") {
    Tensor trunk = random_rows(4, 3, 7);
    Tensor img(Shape{2}, {0.1, 0.2});
    Tensor stat(Shape{2}, {0.3, 0.4});
    BoundParams empty;
    Tensor base = fuse_embeddings(empty, "fuse", trunk, img, stat, "concat");

    Tensor trunk2 = trunk.detached();
    std::vector<double> edited = trunk2.values();
    edited[static_cast<std::size_t>(2 * 3 + 1)] += 1.0;  // row 2 only
    Tensor moved = fuse_embeddings(empty, "fuse", Tensor(Shape{4, 3}, edited), img, stat,
                                   "concat");
    for (int t = 0; t < 4; ++t) {
        bool same = true;
        for (int j = 0; j < 7; ++j) same = same && moved.at({t, j}) == base.at({t, j});
        CHECK(same == (t != 2));
    }

    Tensor img2(Shape{2}, {0.1, 0.9});
    Tensor all_moved = fuse_embeddings(empty, "fuse", trunk, img2, stat, "concat");
    for (int t = 0; t < 4; ++t) {
        CHECK(all_moved.at({t, 4}) != base.at({t, 4}));
    }
}

TEST_CASE("single-token attention reduces to Wo applied to the value row") {
    const int d = 6, heads = 3;
    ParamStore store;
    std::mt19937_64 rng(11);
    for (const char* name : {"attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"}) {
        store.create(name, Tensor::uniform({d, d}, -1, 1, rng));
    }
    Tape tape;
    BoundParams bound = store.bind_all(tape);

    Tensor tokens = random_rows(1, d, 13);
    Tensor out = causal_attention(bound, "attn", tokens, heads);
    REQUIRE(out.shape() == Shape{1, d});

    const auto& wv = store.get("attn.Wv").values();
    const auto& wo = store.get("attn.Wo").values();
    std::vector<double> vrow(d, 0.0);
    for (int j = 0; j < d; ++j) {
        for (int i = 0; i < d; ++i) {
            vrow[static_cast<std::size_t>(j)] +=
                tokens.values()[static_cast<std::size_t>(i)] * wv[static_cast<std::size_t>(i * d + j)];
        }
    }
    for (int j = 0; j < d; ++j) {
        double want = 0.0;
        for (int i = 0; i < d; ++i) {
            want += vrow[static_cast<std::size_t>(i)] * wo[static_cast<std::size_t>(i * d + j)];
        }
        CHECK(out.at({0, j}) == doctest::Approx(want).epsilon(1e-13));
    }
}

TEST_CASE("zero queries and keys average the causal prefix of values") {
    const int d = 6, T = 5;
    for (int heads : {1, 2, 3}) {
        ParamStore store;
        std::mt19937_64 rng(17);
        for (const char* name : {"attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"}) {
            store.create(name, Tensor::uniform({d, d}, -1, 1, rng));
        }
        fill_param(store, "attn.Wq", 0.0);
        fill_param(store, "attn.Wk", 0.0);
        Tape tape;
        BoundParams bound = store.bind_all(tape);

        Tensor tokens = random_rows(T, d, 23);
        Tensor out = causal_attention(bound, "attn", tokens, heads);

        // oracle: V = tokens Wv, merged_t = mean(V_0..t), out = merged Wo
        const auto& wv = store.get("attn.Wv").values();
        const auto& wo = store.get("attn.Wo").values();
        std::vector<double> v(static_cast<std::size_t>(T) * d, 0.0);
        for (int t = 0; t < T; ++t) {
            for (int j = 0; j < d; ++j) {
                for (int i = 0; i < d; ++i) {
                    v[static_cast<std::size_t>(t * d + j)] +=
                        tokens.at({t, i}) * wv[static_cast<std::size_t>(i * d + j)];
                }
            }
        }
        for (int t = 0; t < T; ++t) {
            std::vector<double> mean(d, 0.0);
            for (int p = 0; p <= t; ++p) {
                for (int j = 0; j < d; ++j) {
                    mean[static_cast<std::size_t>(j)] += v[static_cast<std::size_t>(p * d + j)];
                }
            }
            for (double& m : mean) m /= (t + 1);
            for (int j = 0; j < d; ++j) {
                double want = 0.0;
                for (int i = 0; i < d; ++i) {
                    want += mean[static_cast<std::size_t>(i)] * wo[static_cast<std::size_t>(i * d + j)];
                }
                CHECK(out.at({t, j}) == doctest::Approx(want).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("future tokens cannot reach earlier attention outputs") {
    const int d = 6, T = 5;
    ParamStore store;
    std::mt19937_64 rng(29);
    for (const char* name : {"attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"}) {
        store.create(name, Tensor::uniform({d, d}, -1, 1, rng));
    }
    Tape tape;
    BoundParams bound = store.bind_all(tape);

    Tensor tokens = random_rows(T, d, 31);
    Tensor base = causal_attention(bound, "attn", tokens, 2);

    std::vector<double> edited = tokens.values();
    for (int j = 0; j < d; ++j) edited[static_cast<std::size_t>(3 * d + j)] = -9.0;
    Tensor out = causal_attention(bound, "attn", Tensor(Shape{T, d}, edited), 2);

    for (int t = 0; t < 3; ++t) {
        for (int j = 0; j < d; ++j) CHECK(out.at({t, j}) == base.at({t, j}));
    }
    bool later_changed = false;
    for (int j = 0; j < d; ++j) later_changed = later_changed || out.at({3, j}) != base.at({3, j});
    CHECK(later_changed);
}

TEST_CASE("reversing the token order does not just reverse the outputs") {
    const int d = 6, T = 4;
    ParamStore store;
    std::mt19937_64 rng(37);
    for (const char* name : {"attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"}) {
        store.create(name, Tensor::uniform({d, d}, -1, 1, rng));
    }
    Tape tape;
    BoundParams bound = store.bind_all(tape);

    Tensor tokens = random_rows(T, d, 41);
    Tensor fwd = causal_attention(bound, "attn", tokens, 2);

    std::vector<double> rev(static_cast<std::size_t>(T) * d);
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < d; ++j) {
            rev[static_cast<std::size_t>(t * d + j)] = tokens.at({T - 1 - t, j});
        }
    }
    Tensor back = causal_attention(bound, "attn", Tensor(Shape{T, d}, rev), 2);

    double max_gap = 0.0;
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < d; ++j) {
            max_gap = std::max(max_gap, std::abs(back.at({t, j}) - fwd.at({T - 1 - t, j})));
        }
    }
    CHECK(max_gap > 1e-6);
}

TEST_CASE("an all-zero block passes the final bias through to every step") {
    for (const char* order : {"pre", "post"}) {
        FusionConfig cfg = small_config();
        cfg.norm_order = order;
        ParamStore store;
        std::mt19937_64 rng(43);
        init_fusion_model(store, cfg, rng);
        for (const auto& [name, tensor] : store.entries()) {
            (void)tensor;
            fill_param(store, name, 0.0);
        }
        Tensor& beta = store.get("head.h2.b");
        beta.mutable_data()[0] = 0.7;

        Tape tape;
        BoundParams bound = store.bind_all(tape);
        Tensor tokens = random_rows(3, fusion_d_model(cfg), 47);
        Tensor preds = fusion_block_forward(bound, cfg, tokens);
        REQUIRE(preds.shape() == Shape{3});
        for (double v : preds.values()) CHECK(v == 0.7);
    }
}

TEST_CASE("block gradients match finite differences at d_model 8") {
    const int T = 3, h_trunk = 5, d_model = 8;
    FusionConfig cfg;
    cfg.heads = 2;
    cfg.norm_order = "pre";

    ParamStore store;
    std::mt19937_64 rng(53);
    init_affine_rows(store, "trunk_map", h_trunk, d_model, rng);
    double ab = 1.0 / std::sqrt(static_cast<double>(d_model));
    for (const char* name : {"attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"}) {
        store.create(name, Tensor::uniform({d_model, d_model}, -ab, ab, rng));
    }
    for (const char* ln : {"block.ln1", "block.ln2"}) {
        store.create(std::string(ln) + ".gamma", Tensor::full({d_model}, 1.0));
        store.create(std::string(ln) + ".beta", Tensor::zeros({d_model}));
    }
    init_affine_rows(store, "block.ffn.l1", d_model, 4 * d_model, rng);
    init_affine_rows(store, "block.ffn.l2", 4 * d_model, d_model, rng);
    init_affine_rows(store, "head.h1", d_model, d_model, rng);
    init_affine_rows(store, "head.h2", d_model, 1, rng);

    Tensor trunk_states = random_rows(T, h_trunk, 59);
    Tensor target(Shape{T}, {0.2, -0.1, 0.4});

    auto forward = [&](const BoundParams& bound) {
        Tensor tokens = affine_rows(bound, "trunk_map", trunk_states);
        return mse(fusion_block_forward(bound, cfg, tokens), target);
    };
    auto loss_value = [&]() {
        Tape tape;
        BoundParams bound = store.bind_all(tape);
        return forward(bound).item();
    };

    Tape tape;
    BoundParams bound = store.bind_all(tape);
    Tensor loss = forward(bound);
    tape.backward(loss);
    GradMap grads;
    accumulate_grads(tape, bound, grads);

    const double eps = 1e-5;
    std::mt19937_64 pick(61);
    for (const auto& [name, g] : grads) {
        Tensor& theta = store.get(name);
        std::int64_t count = std::min<std::int64_t>(theta.size(), 4);
        for (std::int64_t k = 0; k < count; ++k) {
            std::int64_t j =
                static_cast<std::int64_t>(pick() % static_cast<std::uint64_t>(theta.size()));
            double orig = theta.values()[static_cast<std::size_t>(j)];
            theta.mutable_data()[j] = orig + eps;
            double lp = loss_value();
            theta.mutable_data()[j] = orig - eps;
            double lm = loss_value();
            theta.mutable_data()[j] = orig;
            double fd = (lp - lm) / (2.0 * eps);
            double an = g.values()[static_cast<std::size_t>(j)];
            INFO(name, " coord ", j);
            CHECK(std::abs(an - fd) / std::max(1.0, std::abs(an)) <= 1e-4);
        }
    }
}

TEST_CASE("the full model is strictly causal under rectilinear interpolation") {
    FusionConfig cfg = small_config();
    ParamStore store;
    std::mt19937_64 rng(67);
    init_fusion_model(store, cfg, rng);
    PreprocessStats stats = test_stats();

    std::vector<double> weeks{0, 3, 7, 12, 16};
    std::vector<double> fvc{0.5, 0.3, 0.1, -0.1, -0.4};
    TestPatient base(weeks, fvc, 71);

    Tape tape;
    BoundParams bound = store.bind_all(tape);
    FusionForward ref = realdifffusionnet_forward(bound, cfg, base.prepared, stats);
    REQUIRE(ref.predictions.shape() == Shape{4});
    REQUIRE(ref.pred_times == std::vector<double>({3, 7, 12, 16}));

    SUBCASE("an interior perturbation reaches only later predictions") {
        std::vector<double> bumped = fvc;
        bumped[3] += 0.8;
        TestPatient moved(weeks, bumped, 71);
        FusionForward out = realdifffusionnet_forward(bound, cfg, moved.prepared, stats);
        for (int t = 0; t < 3; ++t) {
            CHECK(out.predictions.at({t}) == ref.predictions.at({t}));
        }
        CHECK(out.predictions.at({3}) != ref.predictions.at({3}));
    }

    SUBCASE("the measurement at the prediction instant is not yet visible") {
        std::vector<double> bumped = fvc;
        bumped[4] += 0.8;
        TestPatient moved(weeks, bumped, 71);
        FusionForward out = realdifffusionnet_forward(bound, cfg, moved.prepared, stats);
        CHECK(out.predictions.same_values(ref.predictions));
    }
}

TEST_CASE("the lstm trunk variant is causal step by step") {
    FusionConfig cfg = small_config();
    cfg.trunk = "lstm";
    ParamStore store;
    std::mt19937_64 rng(73);
    init_fusion_model(store, cfg, rng);
    PreprocessStats stats = test_stats();

    std::vector<double> weeks{0, 3, 7, 12, 16};
    std::vector<double> fvc{0.5, 0.3, 0.1, -0.1, -0.4};
    TestPatient base(weeks, fvc, 79);
    Tape tape;
    BoundParams bound = store.bind_all(tape);
    FusionForward ref = realdifffusionnet_forward(bound, cfg, base.prepared, stats);
    REQUIRE(ref.predictions.shape() == Shape{4});

    std::vector<double> bumped = fvc;
    bumped[3] += 0.8;
    TestPatient moved(weeks, bumped, 79);
    FusionForward out = realdifffusionnet_forward(bound, cfg, moved.prepared, stats);
    for (int t = 0; t < 3; ++t) CHECK(out.predictions.at({t}) == ref.predictions.at({t}));
    CHECK(out.predictions.at({3}) != ref.predictions.at({3}));
}

TEST_CASE("non-causal schemes are refused unless explicitly allowed") {
    FusionConfig cfg = small_config();
    cfg.scheme = Scheme::natural_cubic;
    ParamStore store;
    std::mt19937_64 rng(83);
    init_fusion_model(store, cfg, rng);
    PreprocessStats stats = test_stats();
    TestPatient patient({0, 4, 9}, {0.2, 0.0, -0.2}, 89);

    Tape tape;
    BoundParams bound = store.bind_all(tape);
    CHECK_THROWS_AS(realdifffusionnet_forward(bound, cfg, patient.prepared, stats), ConfigError);

    cfg.allow_noncausal = true;
    FusionForward out = realdifffusionnet_forward(bound, cfg, patient.prepared, stats);
    CHECK(out.predictions.shape() == Shape{2});
    CHECK(out.predictions.all_finite());
}

TEST_CASE("swapping the trunk changes only trunk-side parameters") {
    FusionConfig cde_cfg = small_config();
    FusionConfig lstm_cfg = small_config();
    lstm_cfg.trunk = "lstm";

    ParamStore a, b;
    std::mt19937_64 r1(91), r2(91);
    init_fusion_model(a, cde_cfg, r1);
    init_fusion_model(b, lstm_cfg, r2);

    std::set<std::string> ka, kb;
    for (const auto& [name, t] : a.entries()) {
        (void)t;
        ka.insert(name);
    }
    for (const auto& [name, t] : b.entries()) {
        (void)t;
        kb.insert(name);
    }
    std::vector<std::string> only;
    std::set_symmetric_difference(ka.begin(), ka.end(), kb.begin(), kb.end(),
                                  std::back_inserter(only));
    CHECK(!only.empty());
    for (const auto& name : only) {
        CHECK(name.rfind("trunk.", 0) == 0);
    }
}

TEST_CASE("sum mode runs end to end and respects head divisibility") {
    FusionConfig cfg = small_config();
    cfg.mode = "sum";  // d_model = d_emb = 4
    ParamStore store;
    std::mt19937_64 rng(97);
    init_fusion_model(store, cfg, rng);
    CHECK(fusion_d_model(cfg) == 4);
    CHECK(store.has("fuse.img_proj.W"));
    CHECK(store.has("fuse.stat_proj.W"));

    PreprocessStats stats = test_stats();
    TestPatient patient({0, 5, 11}, {0.4, 0.1, -0.3}, 101);
    Tape tape;
    BoundParams bound = store.bind_all(tape);
    FusionForward out = realdifffusionnet_forward(bound, cfg, patient.prepared, stats);
    CHECK(out.predictions.shape() == Shape{2});
    CHECK(out.predictions.all_finite());

    FusionConfig bad = small_config();
    bad.d_emb = 5;
    bad.mode = "sum";
    bad.heads = 2;
    ParamStore bad_store;
    std::mt19937_64 rng2(1);
    CHECK_THROWS_AS(init_fusion_model(bad_store, bad, rng2), ConfigError);
}

TEST_CASE("the embedding head hand-off keeps the trunk bit-exact") {
    CdeConfig cde{4, 8, 2};
    ParamStore pretrained;
    std::mt19937_64 rng(103);
    init_cde_trunk(pretrained, "trunk", kStructuredChannels + 1, cde, rng);
    init_affine(pretrained, "trunk.readout", cde.hidden, 1, rng);

    std::mt19937_64 rng2(104);
    ParamStore tuned = attach_embedding_head(pretrained, "trunk", 6, rng2);

    CHECK(!tuned.has("trunk.readout.W"));
    CHECK(!tuned.has("trunk.readout.b"));
    CHECK(tuned.has("trunk.embed.W"));
    CHECK(tuned.get("trunk.embed.W").shape() == Shape{6, 4});
    for (const auto& [name, tensor] : pretrained.entries()) {
        if (name.rfind("trunk.readout.", 0) == 0) continue;
        CHECK(tuned.get(name).same_values(tensor));
    }

    ParamStore empty;
    std::mt19937_64 rng3(105);
    CHECK_THROWS_AS(attach_embedding_head(empty, "trunk", 6, rng3), ContractError);
}

TEST_CASE("the optional learned time embedding plugs in cleanly") {
    FusionConfig cfg = small_config();
    cfg.time_embedding = true;
    ParamStore store;
    std::mt19937_64 rng(107);
    init_fusion_model(store, cfg, rng);
    CHECK(store.has("time_embed.W"));

    PreprocessStats stats = test_stats();
    TestPatient patient({0, 6, 13}, {0.3, 0.0, -0.2}, 109);
    Tape tape;
    BoundParams bound = store.bind_all(tape);
    FusionForward out = realdifffusionnet_forward(bound, cfg, patient.prepared, stats);
    CHECK(out.predictions.shape() == Shape{2});
    CHECK(out.predictions.all_finite());
}
