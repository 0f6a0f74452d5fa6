#pragma once

#include <cmath>
#include <functional>

#include "bgn/tensor.hpp"

namespace bgn {

// Central-difference check of reverse-mode gradients at x.
// Returns max over coordinates of |autodiff - numeric| / max(1, |autodiff|).
// f must be deterministic (re-draw any noise from a fixed stream inside f).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5) {
    if (h <= 0.0) throw ConfigError("grad_check: h must be positive");
    Tensor probe(x.shape(), x.data(), true);
    Tensor out = f(probe);
    out.backward();
    const std::vector<double> analytic = probe.grad();

    std::vector<double> base = x.data();
    double worst = 0.0;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> vp = base, vm = base;
        vp[i] += h;
        vm[i] -= h;
        const double fp = f(Tensor(x.shape(), vp)).value();
        const double fm = f(Tensor(x.shape(), vm)).value();
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) /
                           std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace bgn
