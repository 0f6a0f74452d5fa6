#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bgn/error.hpp"
#include "bgn/tensor.hpp"

namespace bgn {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step_count = 0;
    std::unordered_map<std::string, std::vector<double>> m;
    std::unordered_map<std::string, std::vector<double>> v;
};

// Bias-corrected Adam update in place. Rejects non-finite gradients by name.
inline void adam_step(NamedParams& params, AdamState& state) {
    if (state.lr <= 0.0) throw ConfigError("adam_step: lr must be positive");
    ++state.step_count;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (auto& [name, param] : params) {
        const std::vector<double>& g = param.grad();
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != g.size()) m.assign(g.size(), 0.0);
        if (v.size() != g.size()) v.assign(g.size(), 0.0);
        std::vector<double>& theta = param.mutable_data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i]))
                throw NumericError("adam_step: non-finite gradient in parameter '" + name +
                                   "'");
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

inline void zero_grads(NamedParams& params) {
    for (auto& [name, param] : params) param.zero_grad();
}

// Global-norm clipping; returns the pre-clip norm.
inline double clip_grad_norm(NamedParams& params, double max_norm) {
    double total = 0.0;
    for (auto& [name, param] : params)
        for (double g : param.grad()) total += g * g;
    total = std::sqrt(total);
    if (max_norm > 0.0 && total > max_norm) {
        const double scale = max_norm / total;
        for (auto& [name, param] : params) {
            param.grad();  // ensure allocated
            auto& node = *param.node();
            for (double& g : node.grad) g *= scale;
        }
    }
    return total;
}

}  // namespace bgn
