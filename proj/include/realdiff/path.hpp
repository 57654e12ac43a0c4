#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "realdiff/errors.hpp"

namespace realdiff {

enum class Scheme { linear, hermite_backward, natural_cubic, rectilinear };

Scheme scheme_from_string(const std::string& name);  // ConfigError on unknown tag
const char* to_string(Scheme scheme);

// True when a later observation can never alter the path before its own time.
inline bool scheme_is_causal(Scheme s) {
    return s == Scheme::hermite_backward || s == Scheme::rectilinear;
}

// Irregularly sampled multichannel series. `observed` marks which entries are
// real measurements; an empty mask means everything is observed. The first
// row must be fully observed (the baseline visit).
struct ObservationSequence {
    std::vector<double> times;
    std::vector<std::vector<double>> values;           // [T][c]
    std::vector<std::vector<std::uint8_t>> observed;   // [T][c] or empty

    bool is_observed(std::size_t row, std::size_t ch) const {
        return observed.empty() || observed[row][ch] != 0;
    }
};

struct PathBuilder;

// Piecewise-cubic control path over a path parameter s. For every scheme but
// rectilinear, s is physical time; rectilinear advances s by 1 per segment and
// carries physical time in channel 0. Channel 0 is always the time channel.
class ControlPath {
public:
    Scheme scheme() const { return scheme_; }
    int channels() const { return channels_; }  // c+1 including time

    const std::vector<double>& knot_params() const { return knots_; }
    const std::vector<std::vector<double>>& knot_values() const { return knot_values_; }
    double param_begin() const { return knots_.front(); }
    double param_end() const { return knots_.back(); }

    // Physical time -> path parameter. For rectilinear this lands on the
    // pre-update knot at observation times: the path has reached time t but
    // not yet absorbed the value measured there.
    double param_for_time(double t) const;

    // Clamps to the end knot values outside the knot range; exact at knots.
    std::vector<double> eval_point(double s) const;

    // Right-hand derivative at knots (left-hand at the final knot);
    // zero outside the knot range.
    std::vector<double> eval_derivative(double s) const;

    // a + b·u + c·u² + d·u³ with u local to the interval's left knot.
    const std::array<double, 4>& coeffs(int interval, int channel) const;

private:
    friend struct PathBuilder;

    Scheme scheme_ = Scheme::linear;
    int channels_ = 0;
    std::vector<double> knots_;
    std::vector<std::vector<double>> knot_values_;              // [K][channels]
    std::vector<std::vector<std::array<double, 4>>> coeffs_;    // [K-1][channels]
    std::vector<double> obs_times_;                             // rectilinear time map
};

ControlPath build_path(const ObservationSequence& obs, Scheme scheme);

struct ForwardFilled {
    std::vector<std::vector<double>> values;  // [T][c], gaps replaced by last seen
    std::vector<double> time_deltas;          // [T], first entry 0
};

ForwardFilled forward_fill(const ObservationSequence& obs);

}  // namespace realdiff
