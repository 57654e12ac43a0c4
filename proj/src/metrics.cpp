#include "realdiff/metrics.hpp"

#include <cmath>
#include <cstdio>

namespace realdiff {

MetricValues compute_metrics(const std::vector<double>& preds,
                             const std::vector<double>& targets, std::ostream* warnings) {
    if (preds.size() != targets.size()) {
        throw ContractError("compute_metrics: " + std::to_string(preds.size()) +
                            " predictions against " + std::to_string(targets.size()) +
                            " targets");
    }
    const std::size_t n = preds.size();
    if (n == 0) throw ContractError("compute_metrics: no examples");

    double mean = 0.0;
    for (double t : targets) mean += t;
    mean /= static_cast<double>(n);

    double ss_res = 0.0, ss_tot = 0.0, abs_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = preds[i] - targets[i];
        ss_res += d * d;
        abs_sum += std::abs(d);
        const double c = targets[i] - mean;
        ss_tot += c * c;
    }

    MetricValues out;
    out.count = static_cast<long long>(n);
    out.rmse = std::sqrt(ss_res / static_cast<double>(n));
    out.mae = abs_sum / static_cast<double>(n);
    if (ss_tot > 0.0) {
        out.r2 = 1.0 - ss_res / ss_tot;
    } else if (warnings != nullptr) {
        *warnings << "r2 undefined: targets are constant over " << n << " examples\n";
    }
    return out;
}

std::string format_metric_values(const MetricValues& m) {
    char buf[128];
    if (m.r2.has_value()) {
        std::snprintf(buf, sizeof(buf), "rmse=%.6f mae=%.6f r2=%.6f n=%lld", m.rmse, m.mae,
                      *m.r2, m.count);
    } else {
        std::snprintf(buf, sizeof(buf), "rmse=%.6f mae=%.6f r2=n/a n=%lld", m.rmse, m.mae,
                      m.count);
    }
    return buf;
}

}  // namespace realdiff
