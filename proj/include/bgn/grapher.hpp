#pragma once

#include <vector>

#include "bgn/nn.hpp"
#include "bgn/tensor.hpp"

namespace bgn {

struct GcnBlockParams {
    Tensor w_g;  // [out,in]
    BatchNormState bn;
    double dropout_p = 0.2;

    static GcnBlockParams create(std::size_t in_dim, std::size_t out_dim, double dropout_p) {
        GcnBlockParams p;
        p.w_g = Tensor::zeros({out_dim, in_dim}, true);
        p.bn = BatchNormState::create(out_dim);
        p.dropout_p = dropout_p;
        return p;
    }
};

// Symmetric-normalized propagation with unit self-loops:
//   out_i = ReLU(W_g . sum_j (A~_ij / sqrt(deg_i deg_j)) h_j),  A~ = A + I.
// h: [B*n, in], adjacency: [B,n,n] with nonnegative entries, zero diagonal.
inline Tensor gcn_layer(const Tensor& h, const Tensor& adjacency, const Tensor& w_g) {
    if (adjacency.rank() != 3 || adjacency.dim(1) != adjacency.dim(2))
        throw ShapeError("gcn_layer: adjacency must be [B,n,n]");
    const std::size_t B = adjacency.dim(0), n = adjacency.dim(1);
    if (h.rank() != 2 || h.dim(0) != B * n)
        throw ShapeError("gcn_layer: node states must be [B*n, d]");
    detail::check_finite(adjacency.data(), "gcn_layer(adjacency)");
    for (double a : adjacency.data())
        if (a < 0.0) throw NumericError("gcn_layer: negative adjacency weight");

    std::vector<double> eye(B * n * n, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < n; ++i) eye[(b * n + i) * n + i] = 1.0;
    Tensor with_loops = add(adjacency, Tensor({B, n, n}, std::move(eye)));

    Tensor degrees = sum_lastdim(with_loops);       // [B,n], >= 1 by the self loop
    Tensor inv_sqrt = rsqrt(degrees);
    Tensor normalized = mul_colwise(mul_rowwise(with_loops, inv_sqrt), inv_sqrt);

    const std::size_t in_dim = h.dim(1);
    Tensor aggregated = bmm(normalized, reshape(h, {B, n, in_dim}));
    return relu(matmul_nt(reshape(aggregated, {B * n, in_dim}), w_g));
}

// Single-layer GCN -> batchnorm over the (B*n) node rows -> dropout.
inline Tensor gnn_block(const Tensor& h, const Tensor& adjacency, GcnBlockParams& params,
                        bool training, RngStream& rng) {
    Tensor out = gcn_layer(h, adjacency, params.w_g);
    out = batchnorm(out, params.bn, training);
    return dropout(out, params.dropout_p, training, rng);
}

// Two stacked blocks; the outputs are concatenated on the feature axis.
inline Tensor stacked_gnn(const Tensor& h0, const Tensor& adjacency, GcnBlockParams& block1,
                          GcnBlockParams& block2, bool training, RngStream& rng) {
    RngStream rng1 = rng.fork(1);
    RngStream rng2 = rng.fork(2);
    Tensor h1 = gnn_block(h0, adjacency, block1, training, rng1);
    Tensor h2 = gnn_block(h1, adjacency, block2, training, rng2);
    return concat_lastdim(h1, h2);
}

// Double-stacked GRU over a window sequence. Each element of seq is the
// [rows, in] encoding of one window; layer 1 feeds its per-step outputs to
// layer 2. Returns layer 2's hidden state after the last step; per_step, when
// given, collects layer 2's output at every step (used by the generative
// decoders).
inline Tensor temporal_gru(const std::vector<Tensor>& seq, const GruCellParams& gru1,
                           const GruCellParams& gru2,
                           std::vector<Tensor>* per_step = nullptr) {
    if (seq.empty()) throw ShapeError("temporal_gru: empty sequence");
    const std::size_t rows = seq.front().dim(0);
    Tensor h1 = Tensor::zeros({rows, gru1.hidden_dim});
    Tensor h2 = Tensor::zeros({rows, gru2.hidden_dim});
    for (const Tensor& x : seq) {
        h1 = gru_cell(x, h1, gru1);
        h2 = gru_cell(h1, h2, gru2);
        if (per_step) per_step->push_back(h2);
    }
    return h2;
}

}  // namespace bgn
