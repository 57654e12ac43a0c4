#include "realdiff/cde.hpp"

#include <algorithm>
#include <map>

#include "realdiff/errors.hpp"

namespace realdiff {

void init_cde_trunk(ParamStore& store, const std::string& prefix, int channels,
                    const CdeConfig& cfg, std::mt19937_64& rng) {
    if (channels < 1) throw ConfigError("path must have at least one channel");
    if (cfg.hidden < 1 || cfg.width < 1) {
        throw ConfigError("latent dimension and field width must be positive");
    }
    init_affine(store, prefix + ".init", channels, cfg.hidden, rng);
    init_affine(store, prefix + ".field.l1", cfg.hidden, cfg.width, rng);
    init_affine(store, prefix + ".field.l2", cfg.width, cfg.width, rng);
    init_affine(store, prefix + ".field.l3", cfg.width, cfg.hidden * channels, rng);
}

Tensor cde_initial_state(const BoundParams& params, const std::string& prefix,
                         const ControlPath& path) {
    Tensor x0(Shape{path.channels()}, path.eval_point(path.param_begin()));
    return affine(params, prefix + ".init", x0);
}

Tensor cde_vector_field(const BoundParams& params, const std::string& prefix,
                        const Tensor& z) {
    int hidden = z.dim(0);
    int rows = pget(params, prefix + ".field.l3.b").dim(0);
    int channels = rows / hidden;
    Tensor u = relu(affine(params, prefix + ".field.l1", z));
    Tensor v = relu(affine(params, prefix + ".field.l2", u));
    Tensor flat = tanh(affine(params, prefix + ".field.l3", v));
    return reshape(flat, {hidden, channels});
}

CdeSolveResult solve_cde(const BoundParams& params, const std::string& prefix,
                         const ControlPath& path, const std::vector<double>& eval_times,
                         const CdeConfig& cfg) {
    if (cfg.substeps < 1) throw ConfigError("substeps must be at least 1");
    const std::vector<double>& knots = path.knot_params();
    int channels = path.channels();

    std::vector<double> eval_params;
    eval_params.reserve(eval_times.size());
    for (double t : eval_times) eval_params.push_back(path.param_for_time(t));
    std::vector<double> marks(eval_params);
    std::sort(marks.begin(), marks.end());
    marks.erase(std::unique(marks.begin(), marks.end()), marks.end());
    auto is_mark = [&](double s) {
        return std::binary_search(marks.begin(), marks.end(), s);
    };

    // The derivative always comes from the coefficients of the enclosing knot
    // interval, so step endpoints see the correct one-sided limit even where
    // the piecewise path has a derivative jump.
    auto deriv_at = [&](std::size_t interval, double s) {
        std::vector<double> d(static_cast<std::size_t>(channels));
        double u = s - knots[interval];
        for (int ch = 0; ch < channels; ++ch) {
            const auto& c = path.coeffs(static_cast<int>(interval), ch);
            d[static_cast<std::size_t>(ch)] = c[1] + u * (2.0 * c[2] + 3.0 * c[3] * u);
        }
        return Tensor(Shape{channels}, std::move(d));
    };

    int step_index = 0;
    auto check_finite = [&](const Tensor& state) {
        if (!state.all_finite()) {
            throw NumericError("latent state is not finite at solver step " +
                               std::to_string(step_index));
        }
    };

    auto rk4_step = [&](const Tensor& z, std::size_t interval, double s, double hstep) {
        Tensor d1 = deriv_at(interval, s);
        Tensor d2 = deriv_at(interval, s + 0.5 * hstep);
        Tensor d4 = deriv_at(interval, s + hstep);
        Tensor k1 = matvec(cde_vector_field(params, prefix, z), d1);
        Tensor k2 = matvec(cde_vector_field(params, prefix, add(z, scale(k1, 0.5 * hstep))), d2);
        Tensor k3 = matvec(cde_vector_field(params, prefix, add(z, scale(k2, 0.5 * hstep))), d2);
        Tensor k4 = matvec(cde_vector_field(params, prefix, add(z, scale(k3, hstep))), d4);
        Tensor incr = add(add(k1, k4), scale(add(k2, k3), 2.0));
        return add(z, scale(incr, hstep / 6.0));
    };

    Tensor z = cde_initial_state(params, prefix, path);
    check_finite(z);

    std::map<double, Tensor> at_mark;
    if (is_mark(knots.front())) at_mark.emplace(knots.front(), z);

    for (std::size_t i = 0; i + 1 < knots.size(); ++i) {
        // eval params split the interval so states land exactly on them
        std::vector<double> bounds{knots[i]};
        for (double m : marks) {
            if (m > knots[i] && m < knots[i + 1]) bounds.push_back(m);
        }
        bounds.push_back(knots[i + 1]);
        for (std::size_t b = 0; b + 1 < bounds.size(); ++b) {
            double hstep = (bounds[b + 1] - bounds[b]) / cfg.substeps;
            for (int k = 0; k < cfg.substeps; ++k) {
                z = rk4_step(z, i, bounds[b] + k * hstep, hstep);
                ++step_index;
                check_finite(z);
            }
            if (is_mark(bounds[b + 1])) at_mark.emplace(bounds[b + 1], z);
        }
    }

    CdeSolveResult out;
    out.steps_taken = step_index;
    out.states.reserve(eval_params.size());
    for (double s : eval_params) out.states.push_back(at_mark.at(s));
    return out;
}

Tensor cde_forecast(const BoundParams& params, const std::string& prefix,
                    const ControlPath& path, double predict_time, const CdeConfig& cfg) {
    CdeSolveResult solved = solve_cde(params, prefix, path, {predict_time}, cfg);
    return affine(params, prefix + ".readout", solved.states[0]);
}

}  // namespace realdiff
