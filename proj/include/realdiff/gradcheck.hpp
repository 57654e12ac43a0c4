#pragma once

#include <functional>
#include <string>
#include <vector>

#include "realdiff/tensor.hpp"

namespace realdiff {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must return a scalar; eps must lie in [1e-7, 1e-3].
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool passed() const { return max_rel_err < tolerance; }
};

// Checks every differentiable operation over repeated random inputs, plus
// composed graphs for the recurrent cell, the CDE solve, and the fusion block.
std::vector<GradCheckResult> grad_check_suite(std::uint64_t seed = 1234);

}  // namespace realdiff
