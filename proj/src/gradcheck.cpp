#include "realdiff/gradcheck.hpp"

#include <cmath>
#include <random>
#include <string>
#include <utility>

#include "realdiff/fusion.hpp"

namespace realdiff {

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) {
        throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
    }
    Tape tape;
    const Tensor leaf = tape.leaf(x);
    const Tensor loss = f(leaf);
    if (loss.size() != 1) throw ContractError("grad_check: f must return a scalar");
    tape.backward(loss);
    const Tensor analytic = tape.grad(leaf);

    const std::vector<double> base = x.values();
    double worst = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        auto eval = [&](double d) {
            GradPause pause;
            std::vector<double> v = base;
            v[i] += d;
            return f(Tensor(x.shape(), std::move(v))).item();
        };
        const double fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
        const double a = analytic.values()[i];
        worst = std::max(worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    }
    return worst;
}

namespace {

Tensor rnd(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(std::move(shape), lo, hi, rng);
}

// Uniform magnitudes in [0.1, 1) with random sign; keeps relu inputs off the kink.
Tensor rnd_off_kink(Shape shape, std::mt19937_64& rng) {
    Tensor t = rnd(std::move(shape), rng, 0.1, 1.0);
    double* p = t.mutable_data();
    for (std::int64_t i = 0; i < t.size(); ++i) {
        if (rng() & 1u) p[i] = -p[i];
    }
    return t;
}

ScalarFn proj(std::function<Tensor(const Tensor&)> op, Tensor weights) {
    return [op = std::move(op), weights = std::move(weights)](const Tensor& x) {
        return reduce_sum(mul(op(x), weights));
    };
}

using CaseGen = std::function<std::pair<ScalarFn, Tensor>(std::mt19937_64&)>;

GradCheckResult run_case(const std::string& name, const CaseGen& gen, std::mt19937_64& rng,
                         int draws, double tol) {
    GradCheckResult r{name, 0.0, tol};
    for (int i = 0; i < draws; ++i) {
        auto [f, x] = gen(rng);
        r.max_rel_err = std::max(r.max_rel_err, grad_check(f, x));
    }
    return r;
}

BoundParams flatten(const ParamStore& store) {
    BoundParams flat;
    for (const auto& [name, tensor] : store.entries()) flat[name] = tensor;
    return flat;
}

void init_block_params(ParamStore& store, int d, std::mt19937_64& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(d));
    for (const char* name : {"attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"}) {
        store.create(name, Tensor::uniform({d, d}, -a, a, rng));
    }
    for (const char* ln : {"block.ln1", "block.ln2"}) {
        store.create(std::string(ln) + ".gamma", Tensor::full({d}, 1.0));
        store.create(std::string(ln) + ".beta", Tensor::zeros({d}));
    }
    init_affine_rows(store, "block.ffn.l1", d, 4 * d, rng);
    init_affine_rows(store, "block.ffn.l2", 4 * d, d, rng);
    init_affine_rows(store, "head.h1", d, d, rng);
    init_affine_rows(store, "head.h2", d, 1, rng);
}

}  // namespace

std::vector<GradCheckResult> grad_check_suite(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<GradCheckResult> out;
    const int draws = 20;
    const double tol = 1e-5;
    int side = 0;  // rotates which operand of a multi-input op is being checked

    auto add_case = [&](const std::string& name, const CaseGen& gen) {
        out.push_back(run_case(name, gen, rng, draws, tol));
    };

    add_case("add", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const Tensor other = rnd({3, 4}, r);
        const Tensor w = rnd({3, 4}, r);
        const bool left = (side++ % 2) == 0;
        return {proj([other, left](const Tensor& x) { return left ? add(x, other) : add(other, x); }, w),
                rnd({3, 4}, r)};
    });
    add_case("sub", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const Tensor other = rnd({3, 4}, r);
        const Tensor w = rnd({3, 4}, r);
        const bool left = (side++ % 2) == 0;
        return {proj([other, left](const Tensor& x) { return left ? sub(x, other) : sub(other, x); }, w),
                rnd({3, 4}, r)};
    });
    add_case("mul", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const Tensor other = rnd({3, 4}, r);
        const Tensor w = rnd({3, 4}, r);
        const bool left = (side++ % 2) == 0;
        return {proj([other, left](const Tensor& x) { return left ? mul(x, other) : mul(other, x); }, w),
                rnd({3, 4}, r)};
    });
    add_case("scalar_broadcast", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const Tensor big = rnd({2, 5}, r);
        const Tensor w = rnd({2, 5}, r);
        const bool as_scalar = (side++ % 2) == 0;
        if (as_scalar) return {proj([big](const Tensor& x) { return mul(big, x); }, w), rnd({}, r)};
        const Tensor s = rnd({}, r);
        return {proj([s](const Tensor& x) { return add(x, s); }, w), rnd({2, 5}, r)};
    });
    add_case("scale", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return scale(x, -1.7); }, rnd({3, 3}, r)), rnd({3, 3}, r)};
    });
    add_case("tanh", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return tanh(x); }, rnd({4, 3}, r)), rnd({4, 3}, r, -2, 2)};
    });
    add_case("sigmoid", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return sigmoid(x); }, rnd({4, 3}, r)), rnd({4, 3}, r, -3, 3)};
    });
    add_case("relu", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return relu(x); }, rnd({4, 3}, r)), rnd_off_kink({4, 3}, r)};
    });
    add_case("concat_lastdim", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const Tensor other = rnd({2, 3}, r);
        const Tensor w = rnd({2, 5}, r);
        const bool first = (side++ % 2) == 0;
        return {proj([other, first](const Tensor& x) {
                    std::vector<Tensor> parts = first ? std::vector<Tensor>{x, other}
                                                      : std::vector<Tensor>{other, x};
                    return concat_lastdim(parts);
                }, w),
                first ? rnd({2, 2}, r) : rnd({2, 2}, r)};
    });
    add_case("stack_rows", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const Tensor other = rnd({4}, r);
        const Tensor w = rnd({2, 4}, r);
        return {proj([other](const Tensor& x) {
                    std::vector<Tensor> rows{other, x};
                    return stack_rows(rows);
                }, w),
                rnd({4}, r)};
    });
    add_case("slice_lastdim", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return slice_lastdim(x, 1, 3); }, rnd({2, 3}, r)),
                rnd({2, 5}, r)};
    });
    add_case("take_row", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return take_row(x, 2); }, rnd({3}, r)), rnd({4, 3}, r)};
    });
    add_case("reshape", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return reshape(x, {2, 6}); }, rnd({2, 6}, r)),
                rnd({3, 4}, r)};
    });
    add_case("reduce_sum", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {[](const Tensor& x) { return reduce_sum(x); }, rnd({3, 4}, r)};
    });
    add_case("reduce_mean", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {[](const Tensor& x) { return reduce_mean(x); }, rnd({3, 4}, r)};
    });
    add_case("mse", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const Tensor other = rnd({6}, r);
        const bool as_pred = (side++ % 2) == 0;
        return {[other, as_pred](const Tensor& x) {
                    return as_pred ? mse(x, other) : mse(other, x);
                },
                rnd({6}, r)};
    });
    add_case("matmul", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const bool left = (side++ % 2) == 0;
        const Tensor w = rnd({2, 4}, r);
        if (left) {
            const Tensor b = rnd({3, 4}, r);
            return {proj([b](const Tensor& x) { return matmul(x, b); }, w), rnd({2, 3}, r)};
        }
        const Tensor a = rnd({2, 3}, r);
        return {proj([a](const Tensor& x) { return matmul(a, x); }, w), rnd({3, 4}, r)};
    });
    add_case("matvec", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const bool left = (side++ % 2) == 0;
        const Tensor w = rnd({3}, r);
        if (left) {
            const Tensor v = rnd({5}, r);
            return {proj([v](const Tensor& x) { return matvec(x, v); }, w), rnd({3, 5}, r)};
        }
        const Tensor a = rnd({3, 5}, r);
        return {proj([a](const Tensor& x) { return matvec(a, x); }, w), rnd({5}, r)};
    });
    add_case("transpose", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return transpose(x); }, rnd({4, 3}, r)), rnd({3, 4}, r)};
    });
    add_case("linear_rows", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const int which = side++ % 3;
        const Tensor xs = rnd({3, 4}, r);
        const Tensor ws = rnd({4, 2}, r);
        const Tensor bs = rnd({2}, r);
        const Tensor w = rnd({3, 2}, r);
        if (which == 0) return {proj([ws, bs](const Tensor& x) { return linear_rows(x, ws, bs); }, w), xs};
        if (which == 1) return {proj([xs, bs](const Tensor& x) { return linear_rows(xs, x, bs); }, w), ws};
        return {proj([xs, ws](const Tensor& x) { return linear_rows(xs, ws, x); }, w), bs};
    });
    add_case("softmax_lastdim", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return softmax_lastdim(x); }, rnd({3, 4}, r)),
                rnd({3, 4}, r, -2, 2)};
    });
    add_case("causal_softmax", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return causal_softmax(x); }, rnd({4, 4}, r)),
                rnd({4, 4}, r, -2, 2)};
    });
    add_case("layer_norm", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const int which = side++ % 3;
        const Tensor xs = rnd({3, 5}, r);
        const Tensor gs = rnd({5}, r, 0.5, 1.5);
        const Tensor bs = rnd({5}, r);
        const Tensor w = rnd({3, 5}, r);
        if (which == 0) return {proj([gs, bs](const Tensor& x) { return layer_norm(x, gs, bs); }, w), xs};
        if (which == 1) return {proj([xs, bs](const Tensor& x) { return layer_norm(xs, x, bs); }, w), gs};
        return {proj([xs, gs](const Tensor& x) { return layer_norm(xs, gs, x); }, w), bs};
    });
    add_case("conv2d", [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        const int which = side++ % 3;
        const Tensor in = rnd({2, 5, 5}, r);
        const Tensor k = rnd({3, 2, 3, 3}, r);
        const Tensor b = rnd({3}, r);
        const Tensor w = rnd({3, 3, 3}, r);
        if (which == 0) return {proj([k, b](const Tensor& x) { return conv2d(x, k, b, 2, 1); }, w), in};
        if (which == 1) return {proj([in, b](const Tensor& x) { return conv2d(in, x, b, 2, 1); }, w), k};
        return {proj([in, k](const Tensor& x) { return conv2d(in, k, x, 2, 1); }, w), b};
    });
    add_case("global_avg_pool", [](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
        return {proj([](const Tensor& x) { return global_avg_pool(x); }, rnd({2}, r)),
                rnd({2, 4, 4}, r)};
    });

    // Composed graphs: whole sub-networks with one tensor differentiated per
    // draw. Longer chains accumulate central-difference error, so the bar is
    // looser than for single ops.
    out.push_back(run_case(
        "lstm_chain",
        [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
            const LstmConfig cfg{3, 4, 2};
            ParamStore store;
            init_lstm(store, "cell", cfg, r);
            const BoundParams fixed = flatten(store);
            const Tensor seq = rnd({4, 3}, r);
            const Tensor w = rnd({4, 4}, r);
            const char* names[] = {"", "cell.l0.f.W", "cell.l1.o.U", "cell.l0.g.b"};
            const std::string target = names[side++ % 4];
            auto f = [fixed, seq, w, cfg, target](const Tensor& x) {
                BoundParams p = fixed;
                Tensor in = seq;
                if (target.empty()) {
                    in = x;
                } else {
                    p[target] = x;
                }
                std::vector<Tensor> steps;
                for (int t = 0; t < 4; ++t) steps.push_back(take_row(in, t));
                return reduce_sum(mul(stack_rows(lstm_forward(p, "cell", cfg, steps)), w));
            };
            return {f, target.empty() ? seq : fixed.at(target)};
        },
        rng, 8, 1e-4));

    out.push_back(run_case(
        "cde_solve",
        [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
            const CdeConfig cfg{4, 8, 2};
            ParamStore store;
            init_cde_trunk(store, "cde", 3, cfg, r);  // 2 value channels + time
            const BoundParams fixed = flatten(store);
            ObservationSequence obs;
            obs.times = {0.0, 3.0, 8.0};
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            for (std::size_t i = 0; i < obs.times.size(); ++i) {
                obs.values.push_back({u(r), u(r)});
            }
            const ControlPath path = build_path(obs, Scheme::natural_cubic);
            const Tensor w1 = rnd({4}, r), w2 = rnd({4}, r);
            const char* names[] = {"cde.field.l1.W", "cde.field.l3.b", "cde.init.W"};
            const std::string target = names[side++ % 3];
            auto f = [fixed, path, cfg, w1, w2, target](const Tensor& x) {
                BoundParams p = fixed;
                p[target] = x;
                CdeSolveResult res = solve_cde(p, "cde", path, {5.0, 8.0}, cfg);
                return add(reduce_sum(mul(res.states[0], w1)),
                           reduce_sum(mul(res.states[1], w2)));
            };
            return {f, fixed.at(target)};
        },
        rng, 6, 1e-4));

    out.push_back(run_case(
        "fusion_block",
        [&side](std::mt19937_64& r) -> std::pair<ScalarFn, Tensor> {
            const int d = 8;
            FusionConfig cfg;
            cfg.heads = 2;
            cfg.norm_order = (side % 2) == 0 ? "pre" : "post";
            ParamStore store;
            init_block_params(store, d, r);
            const BoundParams fixed = flatten(store);
            const Tensor tokens = rnd({3, d}, r);
            const Tensor w = rnd({3}, r);
            const char* names[] = {"", "attn.Wv", "block.ffn.l1.W", "block.ln1.gamma",
                                   "head.h1.W"};
            const std::string target = names[side++ % 5];
            auto f = [fixed, tokens, w, cfg, target](const Tensor& x) {
                BoundParams p = fixed;
                Tensor in = tokens;
                if (target.empty()) {
                    in = x;
                } else {
                    p[target] = x;
                }
                return reduce_sum(mul(fusion_block_forward(p, cfg, in), w));
            };
            return {f, target.empty() ? tokens : fixed.at(target)};
        },
        rng, 10, 1e-4));

    return out;
}

}  // namespace realdiff
