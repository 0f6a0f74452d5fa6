#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bgn/tensor.hpp"

namespace bgn {

// Trainable affine plus running statistics. Normalization uses the biased
// (population) variance; momentum 0.1, eps 1e-5.
struct BatchNormState {
    Tensor gamma;  // [F]
    Tensor beta;   // [F]
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNormState create(std::size_t features) {
        BatchNormState st;
        st.gamma = Tensor::full({features}, 1.0, true);
        st.beta = Tensor::zeros({features}, true);
        st.running_mean.assign(features, 0.0);
        st.running_var.assign(features, 1.0);
        return st;
    }
};

// x: [B,F]. Training mode normalizes by the batch statistics (differentiable
// through mean and variance) and updates the running buffers; eval mode uses
// the running buffers as constants.
inline Tensor batchnorm(const Tensor& x, BatchNormState& state, bool training) {
    if (x.rank() != 2) throw ShapeError("batchnorm: want [B,F]");
    const std::size_t B = x.dim(0), F = x.dim(1);
    if (F != state.gamma.dim(0)) throw ShapeError("batchnorm: feature dim mismatch");

    if (training) {
        if (B < 2) throw NumericError("batchnorm: training needs batch >= 2, got " +
                                      std::to_string(B));
        Tensor mean = mean_axis0(x);                       // [F]
        Tensor centered = sub(x, tile_rows(reshape(mean, {1, F}), B));
        Tensor var = mean_axis0(square(centered));         // population variance
        Tensor inv_std = rsqrt(add_scalar(var, state.eps));
        Tensor normed = mul(centered, tile_rows(reshape(inv_std, {1, F}), B));
        Tensor out = add_rowvec(mul(normed, tile_rows(reshape(state.gamma, {1, F}), B)),
                                state.beta);
        for (std::size_t f = 0; f < F; ++f) {
            state.running_mean[f] = (1.0 - state.momentum) * state.running_mean[f] +
                                    state.momentum * mean.data()[f];
            state.running_var[f] = (1.0 - state.momentum) * state.running_var[f] +
                                   state.momentum * var.data()[f];
        }
        return out;
    }

    std::vector<double> scale(F), shift(F);
    for (std::size_t f = 0; f < F; ++f)
        scale[f] = 1.0 / std::sqrt(state.running_var[f] + state.eps);
    Tensor mu({1, F}, std::vector<double>(state.running_mean));
    Tensor sc({1, F}, std::move(scale));
    Tensor centered = sub(x, tile_rows(mu, B));
    Tensor normed = mul(centered, tile_rows(sc, B));
    return add_rowvec(mul(normed, tile_rows(reshape(state.gamma, {1, F}), B)), state.beta);
}

// Inverted dropout: survivors scaled by 1/(1-p) at train time, identity in
// eval mode. Mask comes from the caller's seeded stream.
inline Tensor dropout(const Tensor& x, double p, bool training, RngStream& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (double& m : mask) m = rng.uniform01() < p ? 0.0 : keep_scale;
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
    return detail::make_op(x.shape(), std::move(out), "dropout", {x},
                           [mask = std::move(mask)](TensorNode& n) {
                               auto& parent = *n.parents[0];
                               if (!parent.requires_grad) return;
                               parent.ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   parent.grad[i] += n.grad[i] * mask[i];
                           });
}

// Gate weights stored [hidden,in] / [hidden,hidden]; biases [hidden].
struct GruCellParams {
    Tensor w_z, u_z, b_z;
    Tensor w_r, u_r, b_r;
    Tensor w_h, u_h, b_h;
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;

    static GruCellParams create(std::size_t input_dim, std::size_t hidden_dim) {
        GruCellParams p;
        p.input_dim = input_dim;
        p.hidden_dim = hidden_dim;
        p.w_z = Tensor::zeros({hidden_dim, input_dim}, true);
        p.u_z = Tensor::zeros({hidden_dim, hidden_dim}, true);
        p.b_z = Tensor::zeros({hidden_dim}, true);
        p.w_r = Tensor::zeros({hidden_dim, input_dim}, true);
        p.u_r = Tensor::zeros({hidden_dim, hidden_dim}, true);
        p.b_r = Tensor::zeros({hidden_dim}, true);
        p.w_h = Tensor::zeros({hidden_dim, input_dim}, true);
        p.u_h = Tensor::zeros({hidden_dim, hidden_dim}, true);
        p.b_h = Tensor::zeros({hidden_dim}, true);
        return p;
    }
};

// z = sig(Wz x + Uz h + bz); r = sig(Wr x + Ur h + br);
// htilde = tanh(Wh x + Uh (r.h) + bh); h' = (1-z).h + z.htilde
inline Tensor gru_cell(const Tensor& x, const Tensor& h, const GruCellParams& p) {
    if (x.rank() != 2 || h.rank() != 2 || x.dim(0) != h.dim(0))
        throw ShapeError("gru_cell: want x[B,I], h[B,H] with matching batch");
    if (x.dim(1) != p.input_dim || h.dim(1) != p.hidden_dim)
        throw ShapeError("gru_cell: input " + shape_str(x.shape()) + " hidden " +
                         shape_str(h.shape()) + " do not match weights");
    Tensor z = sigmoid(add(linear(x, p.w_z, p.b_z), matmul_nt(h, p.u_z)));
    Tensor r = sigmoid(add(linear(x, p.w_r, p.b_r), matmul_nt(h, p.u_r)));
    Tensor htilde = tanh_op(add(linear(x, p.w_h, p.b_h), matmul_nt(mul(r, h), p.u_h)));
    Tensor one_minus_z = add_scalar(neg(z), 1.0);
    return add(mul(one_minus_z, h), mul(z, htilde));
}

}  // namespace bgn
