#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "realdiff/cde.hpp"
#include "realdiff/errors.hpp"
#include "realdiff/nn.hpp"
#include "realdiff/optim.hpp"

using namespace realdiff;

namespace {

ObservationSequence make_obs(std::mt19937_64& rng, int rows, int data_channels,
                             double gap = 1.0, double amplitude = 0.5) {
    std::uniform_real_distribution<double> val(-amplitude, amplitude);
    std::uniform_real_distribution<double> jitter(0.5, 1.5);
    ObservationSequence obs;
    double t = 0.0;
    for (int i = 0; i < rows; ++i) {
        if (i > 0) t += gap * jitter(rng);
        obs.times.push_back(t);
        std::vector<double> row(static_cast<std::size_t>(data_channels));
        for (auto& v : row) v = val(rng);
        obs.values.push_back(std::move(row));
    }
    return obs;
}

void fill_param(ParamStore& store, const std::string& name, double v) {
    Tensor& t = store.get(name);
    double* d = t.mutable_data();
    std::fill(d, d + t.size(), v);
}

void scale_param(ParamStore& store, const std::string& name, double s) {
    Tensor& t = store.get(name);
    double* d = t.mutable_data();
    for (std::int64_t i = 0; i < t.size(); ++i) d[i] *= s;
}

ParamStore make_trunk(int channels, const CdeConfig& cfg, std::uint64_t seed) {
    ParamStore store;
    std::mt19937_64 rng(seed);
    init_cde_trunk(store, "cde", channels, cfg, rng);
    return store;
}

double max_abs_diff(const Tensor& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.values()[static_cast<std::size_t>(i)] -
                                 b[static_cast<std::size_t>(i)]));
    }
    return m;
}

}  // namespace

TEST_CASE("a zero vector field leaves the latent state constant") {
    CdeConfig cfg{4, 8, 4};
    ParamStore store = make_trunk(3, cfg, 11);
    fill_param(store, "cde.field.l3.W", 0.0);
    fill_param(store, "cde.field.l3.b", 0.0);

    std::mt19937_64 rng(5);
    ObservationSequence obs = make_obs(rng, 4, 2);
    for (Scheme scheme : {Scheme::linear, Scheme::natural_cubic, Scheme::rectilinear}) {
        ControlPath path = build_path(obs, scheme);
        Tape tape;
        BoundParams bound = store.bind_all(tape);
        Tensor z0 = cde_initial_state(bound, "cde", path);
        CdeSolveResult res =
            solve_cde(bound, "cde", path, {obs.times.front(), obs.times[2], obs.times.back()}, cfg);
        for (const Tensor& z : res.states) CHECK(z.same_values(z0));
    }
}

TEST_CASE("a state-independent field integrates to z0 + M (X_end - X_0)") {
    // With the last layer forced to a constant matrix M, the solve reduces to
    // a quadrature of M dX; the classic Runge-Kutta weights integrate the
    // quadratic derivative of a cubic exactly, so only roundoff remains.
    CdeConfig cfg{4, 8, 1};
    const int channels = 3;
    ParamStore store = make_trunk(channels, cfg, 21);
    fill_param(store, "cde.field.l3.W", 0.0);

    std::vector<double> M(4 * channels);
    {
        std::mt19937_64 mrng(99);
        std::uniform_real_distribution<double> u(-0.6, 0.6);
        Tensor& b3 = store.get("cde.field.l3.b");
        double* d = b3.mutable_data();
        for (std::size_t i = 0; i < M.size(); ++i) {
            M[i] = u(mrng);
            d[i] = std::atanh(M[i]);
        }
    }

    std::mt19937_64 rng(7);
    ObservationSequence obs = make_obs(rng, 5, 2);
    for (Scheme scheme :
         {Scheme::linear, Scheme::hermite_backward, Scheme::natural_cubic, Scheme::rectilinear}) {
        for (int substeps : {1, 3}) {
            CdeConfig c = cfg;
            c.substeps = substeps;
            ControlPath path = build_path(obs, scheme);
            Tape tape;
            BoundParams bound = store.bind_all(tape);
            Tensor z0 = cde_initial_state(bound, "cde", path);
            CdeSolveResult res = solve_cde(bound, "cde", path, {obs.times.back()}, c);

            // rectilinear stops short of the final value jump at the last visit
            std::vector<double> x0 = path.eval_point(path.param_begin());
            std::vector<double> xe = path.eval_point(path.param_for_time(obs.times.back()));
            std::vector<double> expected(4);
            for (int i = 0; i < 4; ++i) {
                expected[static_cast<std::size_t>(i)] = z0.values()[static_cast<std::size_t>(i)];
                for (int ch = 0; ch < channels; ++ch) {
                    expected[static_cast<std::size_t>(i)] +=
                        M[static_cast<std::size_t>(i * channels + ch)] *
                        (xe[static_cast<std::size_t>(ch)] - x0[static_cast<std::size_t>(ch)]);
                }
            }
            CHECK(max_abs_diff(res.states[0], expected) <= 1e-10);
        }
    }
}

TEST_CASE("the solver converges at fourth order on a smooth field") {
    CdeConfig cfg{4, 8, 4};
    const int channels = 3;
    ParamStore store = make_trunk(channels, cfg, 33);
    // Large positive hidden biases keep every relu active along the
    // trajectory, so the field stays smooth and the classical order applies.
    scale_param(store, "cde.field.l1.W", 0.5);
    scale_param(store, "cde.field.l2.W", 0.5);
    fill_param(store, "cde.field.l1.b", 3.0);
    fill_param(store, "cde.field.l2.b", 3.0);

    std::mt19937_64 rng(13);
    ObservationSequence obs = make_obs(rng, 4, 2, 2.5, 1.0);
    ControlPath path = build_path(obs, Scheme::natural_cubic);

    auto end_state = [&](int substeps) {
        CdeConfig c = cfg;
        c.substeps = substeps;
        Tape tape;
        BoundParams bound = store.bind_all(tape);
        return solve_cde(bound, "cde", path, {obs.times.back()}, c).states[0];
    };

    Tensor ref = end_state(1024);
    std::vector<double> errs;
    for (int n : {8, 16, 32, 64}) {
        errs.push_back(max_abs_diff(end_state(n), ref.values()));
    }
    REQUIRE(errs.back() > 1e-13);  // otherwise the ratios measure only roundoff
    for (std::size_t i = 0; i + 1 < errs.size(); ++i) {
        double order = std::log2(errs[i] / errs[i + 1]);
        CHECK(order >= 3.7);
        CHECK(order <= 4.3);
    }
}

TEST_CASE("solutions are invariant under affine reparameterization of time") {
    // A controlled ODE depends on the path only through its values, not on
    // how fast the parameter sweeps them out. Silencing the time column of
    // the field and the initial map removes the one genuinely time-dependent
    // input, so stretching the clock must not move the solution.
    CdeConfig cfg{4, 8, 8};
    const int channels = 3;
    ParamStore store = make_trunk(channels, cfg, 55);
    {
        Tensor& w3 = store.get("cde.field.l3.W");
        Tensor& b3 = store.get("cde.field.l3.b");
        double* wd = w3.mutable_data();
        double* bd = b3.mutable_data();
        int cols = w3.dim(1);
        for (int row = 0; row < w3.dim(0); ++row) {
            if (row % channels == 0) {  // output entry feeding the time channel
                bd[row] = 0.0;
                for (int j = 0; j < cols; ++j) wd[row * cols + j] = 0.0;
            }
        }
        Tensor& wi = store.get("cde.init.W");
        double* id = wi.mutable_data();
        for (int row = 0; row < wi.dim(0); ++row) id[row * channels] = 0.0;
    }

    std::mt19937_64 rng(17);
    ObservationSequence obs = make_obs(rng, 4, 2);
    ObservationSequence stretched = obs;
    for (double& t : stretched.times) t = 2.5 * t + 7.0;

    for (Scheme scheme :
         {Scheme::linear, Scheme::hermite_backward, Scheme::natural_cubic, Scheme::rectilinear}) {
        ControlPath path_a = build_path(obs, scheme);
        ControlPath path_b = build_path(stretched, scheme);
        Tape tape;
        BoundParams bound = store.bind_all(tape);
        Tensor za = solve_cde(bound, "cde", path_a, {obs.times.back()}, cfg).states[0];
        Tensor zb = solve_cde(bound, "cde", path_b, {stretched.times.back()}, cfg).states[0];
        CHECK(max_abs_diff(za, zb.values()) <= 1e-8);
    }
}

TEST_CASE("initial state is the bias when the initial weights are zero") {
    CdeConfig cfg{4, 8, 2};
    ParamStore store = make_trunk(3, cfg, 3);
    fill_param(store, "cde.init.W", 0.0);

    std::mt19937_64 rng(2);
    ObservationSequence obs = make_obs(rng, 3, 2);
    ControlPath path = build_path(obs, Scheme::linear);
    Tape tape;
    BoundParams bound = store.bind_all(tape);
    Tensor z0 = cde_initial_state(bound, "cde", path);
    CHECK(z0.same_values(store.get("cde.init.b")));

    CdeSolveResult res = solve_cde(bound, "cde", path, {obs.times.front()}, cfg);
    CHECK(res.states[0].same_values(z0));
}

TEST_CASE("evaluation states come back in call order, duplicates shared") {
    CdeConfig cfg{4, 8, 2};
    ParamStore store = make_trunk(3, cfg, 8);
    std::mt19937_64 rng(9);
    ObservationSequence obs = make_obs(rng, 3, 2, 4.0);
    ControlPath path = build_path(obs, Scheme::linear);
    Tape tape;
    BoundParams bound = store.bind_all(tape);

    double t0 = obs.times.front(), t2 = obs.times.back();
    double mid = 0.5 * (obs.times[0] + obs.times[1]);  // interior, not a knot
    CdeSolveResult res = solve_cde(bound, "cde", path, {t2, t0, t2, mid}, cfg);
    REQUIRE(res.states.size() == 4);
    CHECK(res.states[0].same_values(res.states[2]));
    CHECK(res.states[1].same_values(cde_initial_state(bound, "cde", path)));
    // 2 knot intervals, one split by the interior eval point
    CHECK(res.steps_taken == 3 * cfg.substeps);

    bool interior_differs = !res.states[3].same_values(res.states[1]);
    CHECK(interior_differs);
}

TEST_CASE("a single-observation path yields the initial state everywhere") {
    CdeConfig cfg{4, 8, 4};
    ParamStore store = make_trunk(3, cfg, 4);
    ObservationSequence obs;
    obs.times = {2.0};
    obs.values = {{0.3, -0.4}};
    ControlPath path = build_path(obs, Scheme::hermite_backward);
    Tape tape;
    BoundParams bound = store.bind_all(tape);
    CdeSolveResult res = solve_cde(bound, "cde", path, {0.0, 2.0, 10.0}, cfg);
    CHECK(res.steps_taken == 0);
    Tensor z0 = cde_initial_state(bound, "cde", path);
    for (const Tensor& z : res.states) CHECK(z.same_values(z0));
}

TEST_CASE("non-finite states raise a numeric error naming the step") {
    CdeConfig cfg{4, 8, 2};

    SUBCASE("poisoned initial map") {
        ParamStore store = make_trunk(3, cfg, 6);
        fill_param(store, "cde.init.W", std::numeric_limits<double>::infinity());
        std::mt19937_64 rng(1);
        ObservationSequence obs = make_obs(rng, 3, 2);
        ControlPath path = build_path(obs, Scheme::linear);
        Tape tape;
        BoundParams bound = store.bind_all(tape);
        CHECK_THROWS_WITH_AS(solve_cde(bound, "cde", path, {obs.times.back()}, cfg),
                             doctest::Contains("step 0"), NumericError);
    }

    SUBCASE("poisoned observation value") {
        ParamStore store = make_trunk(3, cfg, 6);
        ObservationSequence obs;
        obs.times = {0.0, 1.0, 2.0};
        obs.values = {{0.1, 0.2}, {std::numeric_limits<double>::quiet_NaN(), 0.3}, {0.2, 0.1}};
        ControlPath path = build_path(obs, Scheme::linear);
        Tape tape;
        BoundParams bound = store.bind_all(tape);
        CHECK_THROWS_WITH_AS(solve_cde(bound, "cde", path, {2.0}, cfg),
                             doctest::Contains("step 1"), NumericError);
    }
}

TEST_CASE("gradients through the solve match finite differences") {
    CdeConfig cfg{4, 8, 2};
    const int channels = 3;
    ParamStore store = make_trunk(channels, cfg, 77);
    std::mt19937_64 rng(19);
    init_affine(store, "cde.readout", cfg.hidden, 1, rng);

    ObservationSequence obs = make_obs(rng, 3, 2);
    ControlPath path = build_path(obs, Scheme::natural_cubic);
    double t_end = obs.times.back();
    Tensor target(Shape{1}, {0.25});

    auto loss_value = [&]() {
        Tape tape;
        BoundParams bound = store.bind_all(tape);
        return mse(cde_forecast(bound, "cde", path, t_end, cfg), target).item();
    };

    Tape tape;
    BoundParams bound = store.bind_all(tape);
    Tensor loss = mse(cde_forecast(bound, "cde", path, t_end, cfg), target);
    tape.backward(loss);
    GradMap grads;
    accumulate_grads(tape, bound, grads);

    const double eps = 1e-5;
    std::mt19937_64 pick(4242);
    for (const auto& [name, g] : grads) {
        Tensor& theta = store.get(name);
        std::int64_t count = std::min<std::int64_t>(theta.size(), 5);
        for (std::int64_t k = 0; k < count; ++k) {
            std::int64_t j = static_cast<std::int64_t>(pick() % static_cast<std::uint64_t>(theta.size()));
            double orig = theta.values()[static_cast<std::size_t>(j)];
            theta.mutable_data()[j] = orig + eps;
            double lp = loss_value();
            theta.mutable_data()[j] = orig - eps;
            double lm = loss_value();
            theta.mutable_data()[j] = orig;
            double fd = (lp - lm) / (2.0 * eps);
            double an = g.values()[static_cast<std::size_t>(j)];
            double rel = std::abs(an - fd) / std::max(1.0, std::abs(an));
            INFO(name, " coord ", j);
            CHECK(rel <= 1e-4);
        }
    }
}

TEST_CASE("a short training loop reduces forecast loss deterministically") {
    CdeConfig cfg{4, 8, 2};
    const int channels = 3;

    std::mt19937_64 drng(101);
    ObservationSequence obs = make_obs(drng, 4, 2, 3.0);
    ControlPath path = build_path(obs, Scheme::hermite_backward);
    std::vector<double> eval_times{obs.times[1], obs.times[2], obs.times[3]};
    std::vector<double> targets;
    for (std::size_t i = 1; i < obs.times.size(); ++i) targets.push_back(obs.values[i][0]);

    auto train = [&](int steps) {
        ParamStore store = make_trunk(channels, cfg, 2024);
        std::mt19937_64 rng(2025);
        init_affine(store, "cde.readout", cfg.hidden, 1, rng);
        Adam opt(AdamConfig{0.01, 0.9, 0.999, 1e-8});
        double first = 0.0, last = 0.0;
        for (int it = 0; it < steps; ++it) {
            Tape tape;
            BoundParams bound = store.bind_all(tape);
            CdeSolveResult res = solve_cde(bound, "cde", path, eval_times, cfg);
            Tensor total = Tensor::scalar(0.0);
            for (std::size_t i = 0; i < res.states.size(); ++i) {
                Tensor pred = affine(bound, "cde.readout", res.states[i]);
                total = add(total, mse(pred, Tensor(Shape{1}, {targets[i]})));
            }
            Tensor loss = scale(total, 1.0 / static_cast<double>(res.states.size()));
            tape.backward(loss);
            GradMap grads;
            accumulate_grads(tape, bound, grads);
            clip_global_norm(grads, 1.0);
            opt.step(store, grads);
            if (it == 0) first = loss.item();
            last = loss.item();
        }
        return std::make_pair(store, std::make_pair(first, last));
    };

    auto [store_a, losses] = train(60);
    CHECK(losses.second < 0.5 * losses.first);

    auto [store_b, losses_b] = train(60);
    CHECK(losses_b.second == losses.second);
    CHECK(store_a.get("cde.field.l1.W").same_values(store_b.get("cde.field.l1.W")));
    CHECK(store_a.get("cde.readout.W").same_values(store_b.get("cde.readout.W")));
}
