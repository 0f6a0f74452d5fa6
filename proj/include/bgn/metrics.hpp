#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bgn/error.hpp"

namespace bgn {

inline const std::vector<double> kApproxErrorThresholds = {1, 2, 3, 10, 20, 40};

// pred/target are in normalized units; denorm maps them back to cycles.
inline double rmse(const std::vector<double>& pred, const std::vector<double>& target,
                   double denorm = 1.0) {
    if (pred.size() != target.size() || pred.empty())
        throw DataError("rmse: want equal nonempty vectors");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = (pred[i] - target[i]) * denorm;
        acc += e * e;
    }
    return std::sqrt(acc / static_cast<double>(pred.size()));
}

inline double mae(const std::vector<double>& pred, const std::vector<double>& target,
                  double denorm = 1.0) {
    if (pred.size() != target.size() || pred.empty())
        throw DataError("mae: want equal nonempty vectors");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        acc += std::abs((pred[i] - target[i]) * denorm);
    return acc / static_cast<double>(pred.size());
}

// Percentage of samples whose absolute error (in original units) is strictly
// below each threshold. Thresholds must be sorted ascending.
inline std::map<double, double> approximation_error_table(
    const std::vector<double>& pred, const std::vector<double>& target, double denorm = 1.0,
    const std::vector<double>& thresholds = kApproxErrorThresholds) {
    if (pred.size() != target.size() || pred.empty())
        throw DataError("approximation_error_table: want equal nonempty vectors");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        if (thresholds[i] <= thresholds[i - 1])
            throw DataError("approximation_error_table: thresholds must ascend");
    std::map<double, double> out;
    for (double tau : thresholds) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (std::abs((pred[i] - target[i]) * denorm) < tau) ++hits;
        out[tau] = 100.0 * static_cast<double>(hits) / static_cast<double>(pred.size());
    }
    return out;
}

struct MetricsReport {
    double rmse = 0.0;
    double mae = 0.0;
    std::map<double, double> approx_error;
    std::size_t n_samples = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["rmse"] = rmse;
        j["mae"] = mae;
        nlohmann::ordered_json ae;
        for (const auto& [tau, pct] : approx_error) {
            std::string key = std::to_string(static_cast<long long>(tau));
            ae[key] = pct;
        }
        j["approx_error"] = ae;
        j["n"] = n_samples;
        return j;
    }
};

inline MetricsReport compute_metrics(const std::vector<double>& pred,
                                     const std::vector<double>& target, double denorm) {
    MetricsReport r;
    r.rmse = rmse(pred, target, denorm);
    r.mae = mae(pred, target, denorm);
    r.approx_error = approximation_error_table(pred, target, denorm);
    r.n_samples = pred.size();
    return r;
}

}  // namespace bgn
