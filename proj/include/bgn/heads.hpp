#pragma once

#include <utility>

#include "bgn/tensor.hpp"

namespace bgn {

constexpr double kVarianceFloor = 1e-6;

// Gated global average pooling: h_g = (1/n) sum_i (h_i . gate_i).
// h: [B*n, d]; gate: [n, d] (node embeddings or their projection).
inline Tensor graph_readout(const Tensor& h, const Tensor& gate, std::size_t batch,
                            std::size_t n) {
    if (h.rank() != 2 || h.dim(0) != batch * n)
        throw ShapeError("graph_readout: want h[B*n, d]");
    if (gate.rank() != 2 || gate.dim(0) != n || gate.dim(1) != h.dim(1))
        throw ShapeError("graph_readout: gate dim mismatch, h " + shape_str(h.shape()) +
                         " gate " + shape_str(gate.shape()));
    Tensor gated = mul(h, tile_rows(gate, batch));
    return mean_axis1(reshape(gated, {batch, n, h.dim(1)}));
}

// Linear + sigmoid point estimate, one scalar in (0,1) per sample.
inline Tensor point_head(const Tensor& h_g, const Tensor& w, const Tensor& b) {
    Tensor out = sigmoid(linear(h_g, w, b));  // [B,1]
    return reshape(out, {h_g.dim(0)});
}

struct GaussianHeadParams {
    Tensor fc1_w;  // [d, d]
    Tensor fc1_b;  // [d]
    Tensor fc2_w;  // [2, d]
    Tensor fc2_b;  // [2]

    static GaussianHeadParams create(std::size_t d) {
        GaussianHeadParams p;
        p.fc1_w = Tensor::zeros({d, d}, true);
        p.fc1_b = Tensor::zeros({d}, true);
        p.fc2_w = Tensor::zeros({2, d}, true);
        p.fc2_b = Tensor::zeros({2}, true);
        return p;
    }
};

// MLP d -> d -> 2. Mean passes through sigmoid (same normalized range as the
// targets); variance through softplus with a positivity floor.
inline std::pair<Tensor, Tensor> gaussian_head(const Tensor& h_g,
                                               const GaussianHeadParams& p) {
    const std::size_t B = h_g.dim(0);
    Tensor hidden = relu(linear(h_g, p.fc1_w, p.fc1_b));
    Tensor out = linear(hidden, p.fc2_w, p.fc2_b);  // [B,2]
    Tensor mu = reshape(sigmoid(slice_lastdim(out, 0, 1)), {B});
    Tensor var = add_scalar(softplus(reshape(slice_lastdim(out, 1, 1), {B})), kVarianceFloor);
    return {mu, var};
}

}  // namespace bgn
