#include "realdiff/path.hpp"

#include <algorithm>
#include <cmath>

namespace realdiff {

Scheme scheme_from_string(const std::string& name) {
    if (name == "linear") return Scheme::linear;
    if (name == "hermite_backward") return Scheme::hermite_backward;
    if (name == "natural_cubic") return Scheme::natural_cubic;
    if (name == "rectilinear") return Scheme::rectilinear;
    throw ConfigError("unknown interpolation scheme: " + name);
}

const char* to_string(Scheme scheme) {
    switch (scheme) {
        case Scheme::linear: return "linear";
        case Scheme::hermite_backward: return "hermite_backward";
        case Scheme::natural_cubic: return "natural_cubic";
        case Scheme::rectilinear: return "rectilinear";
    }
    return "?";
}

namespace {

using Cubic = std::array<double, 4>;  // a + b u + c u^2 + d u^3

double cubic_at(const Cubic& p, double u) {
    return p[0] + u * (p[1] + u * (p[2] + u * p[3]));
}

double cubic_deriv_at(const Cubic& p, double u) {
    return p[1] + u * (2.0 * p[2] + 3.0 * u * p[3]);
}

// Re-expresses the cubic around u0 (Taylor shift); exact for polynomials.
Cubic cubic_shift(const Cubic& p, double u0) {
    return Cubic{cubic_at(p, u0), cubic_deriv_at(p, u0), p[2] + 3.0 * p[3] * u0, p[3]};
}

void validate(const ObservationSequence& obs) {
    const std::size_t t = obs.times.size();
    if (t == 0) throw ContractError("observation sequence is empty");
    if (obs.values.size() != t) {
        throw ContractError("observation sequence has " + std::to_string(t) + " times but " +
                            std::to_string(obs.values.size()) + " value rows");
    }
    if (!obs.observed.empty() && obs.observed.size() != t) {
        throw ContractError("observed mask row count does not match times");
    }
    const std::size_t c = obs.values[0].size();
    if (c == 0) throw ContractError("observation sequence has no channels");
    for (std::size_t i = 0; i < t; ++i) {
        if (obs.values[i].size() != c || (!obs.observed.empty() && obs.observed[i].size() != c)) {
            throw ContractError("ragged observation row " + std::to_string(i));
        }
        if (i > 0 && !(obs.times[i] > obs.times[i - 1])) {
            throw ContractError("observation times must be strictly increasing (row " +
                                std::to_string(i) + ")");
        }
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
        bool any = false;
        for (std::size_t i = 0; i < t && !any; ++i) any = obs.is_observed(i, ch);
        if (!any) throw ContractError("channel " + std::to_string(ch) + " has no observed values");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
        if (!obs.is_observed(0, ch)) {
            throw ContractError("first observation must be fully observed (channel " +
                                std::to_string(ch) + " missing)");
        }
    }
}

// Piecewise cubic of one channel over its own observed knots.
struct ChannelSpline {
    std::vector<double> knots;
    std::vector<double> values;
    std::vector<Cubic> pieces;  // size knots.size()-1 (empty for a single knot)
};

ChannelSpline fit_channel(const std::vector<double>& ts, const std::vector<double>& ys,
                          Scheme scheme) {
    ChannelSpline sp;
    sp.knots = ts;
    sp.values = ys;
    const std::size_t m = ts.size();
    if (m < 2) return sp;
    sp.pieces.resize(m - 1);

    if (scheme == Scheme::linear) {
        for (std::size_t k = 0; k + 1 < m; ++k) {
            const double h = ts[k + 1] - ts[k];
            sp.pieces[k] = Cubic{ys[k], (ys[k + 1] - ys[k]) / h, 0.0, 0.0};
        }
        return sp;
    }

    if (scheme == Scheme::hermite_backward) {
        // knot slopes from backward differences; no earlier point at the start
        std::vector<double> slope(m, 0.0);
        for (std::size_t k = 1; k < m; ++k) slope[k] = (ys[k] - ys[k - 1]) / (ts[k] - ts[k - 1]);
        for (std::size_t k = 0; k + 1 < m; ++k) {
            const double h = ts[k + 1] - ts[k];
            const double dy = ys[k + 1] - ys[k];
            const double c = 3.0 * dy / (h * h) - (2.0 * slope[k] + slope[k + 1]) / h;
            const double d = -2.0 * dy / (h * h * h) + (slope[k] + slope[k + 1]) / (h * h);
            sp.pieces[k] = Cubic{ys[k], slope[k], c, d};
        }
        return sp;
    }

    // natural cubic: zero second derivative at both ends
    std::vector<double> m2(m, 0.0);
    if (m > 2) {
        const std::size_t n = m - 2;  // interior unknowns
        std::vector<double> diag(n), lower(n), upper(n), rhs(n);
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = j + 1;
            const double h0 = ts[k] - ts[k - 1];
            const double h1 = ts[k + 1] - ts[k];
            lower[j] = h0 / 6.0;
            diag[j] = (h0 + h1) / 3.0;
            upper[j] = h1 / 6.0;
            rhs[j] = (ys[k + 1] - ys[k]) / h1 - (ys[k] - ys[k - 1]) / h0;
        }
        // Thomas algorithm
        for (std::size_t j = 1; j < n; ++j) {
            const double w = lower[j] / diag[j - 1];
            diag[j] -= w * upper[j - 1];
            rhs[j] -= w * rhs[j - 1];
        }
        m2[m - 2] = rhs[n - 1] / diag[n - 1];
        for (std::size_t j = n - 1; j-- > 0;) {
            m2[j + 1] = (rhs[j] - upper[j] * m2[j + 2]) / diag[j];
        }
    }
    for (std::size_t k = 0; k + 1 < m; ++k) {
        const double h = ts[k + 1] - ts[k];
        const double b = (ys[k + 1] - ys[k]) / h - h * (2.0 * m2[k] + m2[k + 1]) / 6.0;
        sp.pieces[k] = Cubic{ys[k], b, m2[k] / 2.0, (m2[k + 1] - m2[k]) / (6.0 * h)};
    }
    return sp;
}

// Cubic describing the channel over [t_left, ->), rebased so u is local to t_left.
Cubic rebased_piece(const ChannelSpline& sp, double t_left) {
    if (sp.pieces.empty() || t_left >= sp.knots.back()) {
        return Cubic{sp.values.back(), 0.0, 0.0, 0.0};  // forward-constant past the last knot
    }
    auto it = std::upper_bound(sp.knots.begin(), sp.knots.end(), t_left);
    std::size_t k = static_cast<std::size_t>(it - sp.knots.begin());
    k = k == 0 ? 0 : k - 1;
    if (k >= sp.pieces.size()) k = sp.pieces.size() - 1;
    return cubic_shift(sp.pieces[k], t_left - sp.knots[k]);
}

double channel_value_at(const ChannelSpline& sp, double t) {
    if (t <= sp.knots.front()) return sp.values.front();
    if (t >= sp.knots.back()) return sp.values.back();
    const Cubic p = rebased_piece(sp, t);
    return p[0];
}

}  // namespace

struct PathBuilder {
    static ControlPath make(Scheme scheme, int channels, std::vector<double> knots,
                            std::vector<std::vector<double>> knot_values,
                            std::vector<std::vector<Cubic>> coeffs,
                            std::vector<double> obs_times) {
        ControlPath p;
        p.scheme_ = scheme;
        p.channels_ = channels;
        p.knots_ = std::move(knots);
        p.knot_values_ = std::move(knot_values);
        p.coeffs_ = std::move(coeffs);
        p.obs_times_ = std::move(obs_times);
        return p;
    }
};

namespace {

ControlPath build_rectilinear(const ObservationSequence& obs) {
    const std::size_t t = obs.times.size();
    const std::size_t c = obs.values[0].size();
    std::vector<double> knots;
    std::vector<std::vector<double>> knot_values;
    std::vector<std::vector<Cubic>> coeffs;

    std::vector<double> current = obs.values[0];
    std::vector<double> row(c + 1);
    row[0] = obs.times[0];
    std::copy(current.begin(), current.end(), row.begin() + 1);
    knots.push_back(0.0);
    knot_values.push_back(row);

    for (std::size_t i = 1; i < t; ++i) {
        // time-advance segment: clock moves, values hold
        std::vector<Cubic> seg(c + 1, Cubic{0, 0, 0, 0});
        seg[0] = Cubic{obs.times[i - 1], obs.times[i] - obs.times[i - 1], 0.0, 0.0};
        for (std::size_t ch = 0; ch < c; ++ch) seg[ch + 1] = Cubic{current[ch], 0.0, 0.0, 0.0};
        coeffs.push_back(seg);
        knots.push_back(static_cast<double>(2 * i - 1));
        row[0] = obs.times[i];
        std::copy(current.begin(), current.end(), row.begin() + 1);
        knot_values.push_back(row);

        // value-update segment: clock holds, observed channels move
        std::vector<double> next = current;
        for (std::size_t ch = 0; ch < c; ++ch) {
            if (obs.is_observed(i, ch)) next[ch] = obs.values[i][ch];
        }
        seg[0] = Cubic{obs.times[i], 0.0, 0.0, 0.0};
        for (std::size_t ch = 0; ch < c; ++ch) {
            seg[ch + 1] = Cubic{current[ch], next[ch] - current[ch], 0.0, 0.0};
        }
        coeffs.push_back(seg);
        knots.push_back(static_cast<double>(2 * i));
        row[0] = obs.times[i];
        std::copy(next.begin(), next.end(), row.begin() + 1);
        knot_values.push_back(row);
        current = std::move(next);
    }
    return PathBuilder::make(Scheme::rectilinear, static_cast<int>(c) + 1, std::move(knots),
                             std::move(knot_values), std::move(coeffs), obs.times);
}

}  // namespace

ControlPath build_path(const ObservationSequence& obs, Scheme scheme) {
    validate(obs);
    if (scheme == Scheme::rectilinear) return build_rectilinear(obs);

    const std::size_t t = obs.times.size();
    const std::size_t c = obs.values[0].size();

    std::vector<ChannelSpline> splines(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        std::vector<double> ts, ys;
        for (std::size_t i = 0; i < t; ++i) {
            if (obs.is_observed(i, ch)) {
                ts.push_back(obs.times[i]);
                ys.push_back(obs.values[i][ch]);
            }
        }
        splines[ch] = fit_channel(ts, ys, scheme);
    }

    std::vector<std::vector<double>> knot_values(t, std::vector<double>(c + 1));
    for (std::size_t i = 0; i < t; ++i) {
        knot_values[i][0] = obs.times[i];
        for (std::size_t ch = 0; ch < c; ++ch) {
            knot_values[i][ch + 1] = obs.is_observed(i, ch)
                                         ? obs.values[i][ch]
                                         : channel_value_at(splines[ch], obs.times[i]);
        }
    }
    std::vector<std::vector<Cubic>> coeffs(t >= 1 ? t - 1 : 0);
    for (std::size_t i = 0; i + 1 < t; ++i) {
        coeffs[i].resize(c + 1);
        coeffs[i][0] = Cubic{obs.times[i], 1.0, 0.0, 0.0};  // time channel tracks s
        for (std::size_t ch = 0; ch < c; ++ch) {
            coeffs[i][ch + 1] = rebased_piece(splines[ch], obs.times[i]);
        }
    }
    return PathBuilder::make(scheme, static_cast<int>(c) + 1, obs.times, std::move(knot_values),
                             std::move(coeffs), {});
}

double ControlPath::param_for_time(double t) const {
    if (scheme_ != Scheme::rectilinear) {
        return std::clamp(t, knots_.front(), knots_.back());
    }
    if (t <= obs_times_.front()) return 0.0;
    // strictly past the last visit the path is exhausted, value jump included;
    // at the last visit itself the jump has not happened yet
    if (t > obs_times_.back()) return knots_.back();
    // t in (obs_times_[i-1], obs_times_[i]]: the time-advance segment for visit i
    auto it = std::lower_bound(obs_times_.begin(), obs_times_.end(), t);
    const std::size_t i = static_cast<std::size_t>(it - obs_times_.begin());
    const double frac = (t - obs_times_[i - 1]) / (obs_times_[i] - obs_times_[i - 1]);
    return static_cast<double>(2 * (i - 1)) + frac;
}

std::vector<double> ControlPath::eval_point(double s) const {
    if (knots_.size() == 1 || s <= knots_.front()) return knot_values_.front();
    if (s >= knots_.back()) return knot_values_.back();
    auto it = std::upper_bound(knots_.begin(), knots_.end(), s);
    const std::size_t i = static_cast<std::size_t>(it - knots_.begin()) - 1;
    if (s == knots_[i]) return knot_values_[i];  // exact at interior knots
    const double u = s - knots_[i];
    std::vector<double> out(channels_);
    for (int ch = 0; ch < channels_; ++ch) out[ch] = cubic_at(coeffs_[i][ch], u);
    return out;
}

std::vector<double> ControlPath::eval_derivative(double s) const {
    std::vector<double> out(channels_, 0.0);
    if (knots_.size() == 1 || s < knots_.front() || s > knots_.back()) return out;
    std::size_t i;
    double u;
    if (s == knots_.back()) {  // left-hand derivative at the final knot
        i = knots_.size() - 2;
        u = knots_.back() - knots_[i];
    } else {
        auto it = std::upper_bound(knots_.begin(), knots_.end(), s);
        i = static_cast<std::size_t>(it - knots_.begin()) - 1;
        u = s - knots_[i];
    }
    for (int ch = 0; ch < channels_; ++ch) out[ch] = cubic_deriv_at(coeffs_[i][ch], u);
    return out;
}

const std::array<double, 4>& ControlPath::coeffs(int interval, int channel) const {
    if (interval < 0 || interval >= static_cast<int>(coeffs_.size()) || channel < 0 ||
        channel >= channels_) {
        throw BoundsError("coeffs: interval " + std::to_string(interval) + ", channel " +
                          std::to_string(channel) + " out of range");
    }
    return coeffs_[interval][channel];
}

ForwardFilled forward_fill(const ObservationSequence& obs) {
    validate(obs);
    const std::size_t t = obs.times.size();
    const std::size_t c = obs.values[0].size();
    ForwardFilled out;
    out.values.resize(t, std::vector<double>(c));
    out.time_deltas.resize(t, 0.0);
    std::vector<double> last = obs.values[0];
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            if (obs.is_observed(i, ch)) last[ch] = obs.values[i][ch];
            out.values[i][ch] = last[ch];
        }
        if (i > 0) out.time_deltas[i] = obs.times[i] - obs.times[i - 1];
    }
    return out;
}

}  // namespace realdiff
