#pragma once

#include <cstdint>
#include <vector>

#include "bgn/tensor.hpp"

namespace bgn {

enum class DgiVariant {
    full,            // theta from (b_i + W_s x_i) || (b_j + W_s x_j)
    no_embeddings,   // theta from W_s x_i || W_s x_j
    no_features,     // theta from b_i || b_j (static graph)
};

// Two-layer MLP 2d -> d -> 2 scoring each ordered node pair.
struct EdgeScorerParams {
    Tensor fc1_w;  // [d, 2d]
    Tensor fc1_b;  // [d]
    Tensor fc2_w;  // [2, d]
    Tensor fc2_b;  // [2]

    static EdgeScorerParams create(std::size_t d) {
        EdgeScorerParams p;
        p.fc1_w = Tensor::zeros({d, 2 * d}, true);
        p.fc1_b = Tensor::zeros({d}, true);
        p.fc2_w = Tensor::zeros({2, d}, true);
        p.fc2_b = Tensor::zeros({2}, true);
        return p;
    }
};

// Per-edge pre-sampling probabilities, sigmoid outputs in (0,1).
// Row (b,i,j) of theta carries channels {edge present, edge absent}.
struct EdgeLogits {
    Tensor theta;  // [B*n*n, 2]
    std::size_t batch = 0;
    std::size_t n = 0;
};

// x: [rows, W] window features; w_s: [d, W]. Row i of the result is W_s x_i.
inline Tensor project_features(const Tensor& x, const Tensor& w_s) {
    if (x.rank() != 2 || w_s.rank() != 2 || x.dim(1) != w_s.dim(1))
        throw ShapeError("project_features: want x[rows,W], w_s[d,W]");
    return matmul_nt(x, w_s);
}

// embeddings: [n,d] trainable node identities (tiled across the batch);
// xproj: [B*n,d] projected window features (ignored for no_features).
inline EdgeLogits pairwise_logits(const Tensor& embeddings, const Tensor& xproj,
                                  std::size_t batch, std::size_t n, DgiVariant variant,
                                  const EdgeScorerParams& scorer) {
    if (embeddings.rank() != 2 || embeddings.dim(0) != n)
        throw ShapeError("pairwise_logits: embeddings must be [n,d]");
    Tensor node_repr;
    switch (variant) {
        case DgiVariant::full:
            if (!xproj.defined() || xproj.dim(0) != batch * n)
                throw ShapeError("pairwise_logits: xproj must be [B*n,d]");
            node_repr = add(tile_rows(embeddings, batch), xproj);
            break;
        case DgiVariant::no_embeddings:
            if (!xproj.defined() || xproj.dim(0) != batch * n)
                throw ShapeError("pairwise_logits: xproj must be [B*n,d]");
            node_repr = xproj;
            break;
        case DgiVariant::no_features:
            node_repr = tile_rows(embeddings, batch);
            break;
    }
    Tensor pairs = pairwise_concat(node_repr, batch, n);  // [B*n*n, 2d]
    Tensor hidden = relu(linear(pairs, scorer.fc1_w, scorer.fc1_b));
    Tensor theta = sigmoid(linear(hidden, scorer.fc2_w, scorer.fc2_b));
    return EdgeLogits{theta, batch, n};
}

namespace detail {
// 1 off the diagonal, 0 on it, tiled across the batch.
inline Tensor offdiag_mask(std::size_t batch, std::size_t n) {
    std::vector<double> m(batch * n * n, 1.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < n; ++i) m[(b * n + i) * n + i] = 0.0;
    return Tensor({batch, n, n}, std::move(m));
}
}  // namespace detail

// Temperature-scaled softmax over the two channels after adding Gumbel noise;
// the adjacency keeps the "edge present" channel. The diagonal is zeroed:
// self-connection enters only through the GCN self-loop.
// noise must be [B*n*n, 2]; pass zeros for the noise-free (evaluation) graph.
inline Tensor gumbel_softmax_adjacency(const EdgeLogits& logits, double gamma,
                                       const Tensor& noise) {
    if (gamma <= 0.0) throw ConfigError("gumbel_softmax_adjacency: gamma must be > 0");
    if (noise.shape() != logits.theta.shape())
        throw ShapeError("gumbel_softmax_adjacency: noise shape mismatch");
    const std::size_t B = logits.batch, n = logits.n;
    Tensor scaled = mul_scalar(add(logits.theta, noise), 1.0 / gamma);
    Tensor soft = softmax_lastdim(scaled);                     // [B*n*n, 2]
    Tensor present = slice_lastdim(soft, 0, 1);                // channel 0
    Tensor adj = reshape(present, {B, n, n});
    return mul(adj, detail::offdiag_mask(B, n));
}

// Draws fresh Gumbel(0,1) noise for every edge channel.
inline Tensor gumbel_softmax_adjacency(const EdgeLogits& logits, double gamma,
                                       RngStream& rng) {
    return gumbel_softmax_adjacency(logits, gamma, rand_gumbel(logits.theta.shape(), rng));
}

// Noise-free channel-0 softmax; the deterministic evaluation-time graph.
inline Tensor eval_adjacency(const EdgeLogits& logits, double gamma) {
    return gumbel_softmax_adjacency(logits, gamma, Tensor::zeros(logits.theta.shape()));
}

// All-ones off the diagonal; used by the fcg ablation instead of the DGI.
inline Tensor fully_connected_adjacency(std::size_t batch, std::size_t n) {
    if (n < 2) throw ShapeError("fully_connected_adjacency: need n >= 2");
    return detail::offdiag_mask(batch, n);
}

// Reporting only: 1 where the soft weight exceeds the threshold.
inline Tensor harden(const Tensor& adjacency, double threshold) {
    if (threshold <= 0.0 || threshold >= 1.0)
        throw ConfigError("harden: threshold must be in (0,1)");
    std::vector<double> out(adjacency.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = adjacency.data()[i] > threshold ? 1.0 : 0.0;
    return Tensor(adjacency.shape(), std::move(out));
}

}  // namespace bgn
