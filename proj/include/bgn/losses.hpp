#pragma once

#include "bgn/tensor.hpp"

namespace bgn {

struct LossValue {
    Tensor value;       // scalar
    Tensor per_sample;  // [B]
};

// (1/B) sum (pred - target)^2
inline LossValue mse_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape() || pred.numel() == 0)
        throw ShapeError("mse_loss: want equal nonempty shapes");
    Tensor terms = square(sub(pred, target));
    return {mean_all(terms), terms};
}

// sum over samples of log(var)/2 + (y - mu)^2 / (2 var). The additive
// constant of the Gaussian density is dropped. Optionally normalized by the
// batch size so the magnitude is comparable to the mean-squared objective.
inline LossValue gaussian_nll_loss(const Tensor& mu, const Tensor& var, const Tensor& target,
                                   bool normalize_by_batch = false) {
    if (mu.shape() != target.shape() || var.shape() != target.shape())
        throw ShapeError("gaussian_nll_loss: shape mismatch");
    for (double v : var.data())
        if (v <= 0.0) throw NumericError("gaussian_nll_loss: nonpositive variance");
    Tensor sq = square(sub(target, mu));
    Tensor terms = add(mul_scalar(log_op(var), 0.5), mul_scalar(div(sq, var), 0.5));
    Tensor total = sum_all(terms);
    if (normalize_by_batch) total = mul_scalar(total, 1.0 / static_cast<double>(mu.numel()));
    return {total, terms};
}

}  // namespace bgn
