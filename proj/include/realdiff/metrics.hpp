#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "realdiff/errors.hpp"

namespace realdiff {

// Error summary over one split. r2 is absent when the targets are constant,
// since the total sum of squares vanishes; callers must not read 0 into that.
struct MetricValues {
    double rmse = 0.0;
    double mae = 0.0;
    std::optional<double> r2;
    long long count = 0;
};

struct MetricsReport {
    MetricValues train, val, test;
};

// Two-pass computation: target mean first, then the residual and total sums.
// warnings (when given) receives one line if r2 had to be dropped.
MetricValues compute_metrics(const std::vector<double>& preds,
                             const std::vector<double>& targets,
                             std::ostream* warnings = nullptr);

std::string format_metric_values(const MetricValues& m);

}  // namespace realdiff
