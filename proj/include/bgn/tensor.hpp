#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "bgn/error.hpp"
#include "bgn/rng.hpp"

namespace bgn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline std::uint64_t next_node_id() {
    thread_local std::uint64_t id = 0;
    return ++id;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII switch that disables tape recording (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::uint64_t id = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Ordered record of the primitive applications reachable from one output,
// inputs always preceding consumers. Built on demand for the backward pass.
struct Tape {
    std::vector<TensorNode*> nodes;  // topological order
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        node_ = std::make_shared<TensorNode>();
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
        node_->id = detail::next_node_id();
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), std::vector<double>(shape_numel_of(shape), 0.0),
                      requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        return Tensor(std::move(shape), std::vector<double>(shape_numel_of(shape), v),
                      requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    std::uint64_t node_id() const { return node_->id; }
    const char* op_name() const { return node_->op; }

    double value() const {
        if (numel() != 1) throw ShapeError("value(): tensor is not scalar");
        return node_->data[0];
    }

    double at(std::size_t i) const { return node_->data.at(i); }
    double at(std::size_t i, std::size_t j) const {
        return node_->data.at(i * node_->shape.at(1) + j);
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        const auto& s = node_->shape;
        return node_->data.at((i * s.at(1) + j) * s.at(2) + k);
    }

    void zero_grad() {
        node_->grad.assign(node_->data.size(), 0.0);
    }

    // Collect the subgraph reachable from this output in topological order.
    Tape trace() const {
        Tape tape;
        std::unordered_set<const TensorNode*> seen;
        std::vector<TensorNode*> stack{node_.get()};
        while (!stack.empty()) {
            TensorNode* n = stack.back();
            stack.pop_back();
            if (!seen.insert(n).second) continue;
            tape.nodes.push_back(n);
            for (auto& p : n->parents) stack.push_back(p.get());
        }
        std::sort(tape.nodes.begin(), tape.nodes.end(),
                  [](const TensorNode* a, const TensorNode* b) { return a->id < b->id; });
        return tape;
    }

    // Reverse-mode pass from a scalar output. Each recorded node is visited
    // exactly once, in reverse topological order.
    void backward() {
        if (numel() != 1) throw ShapeError("backward(): output must be scalar");
        Tape tape = trace();
        node_->ensure_grad();
        node_->grad[0] = 1.0;
        for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
            TensorNode* n = *it;
            if (n->backward_fn) {
                n->ensure_grad();
                n->backward_fn(*n);
            }
        }
    }

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    static std::size_t shape_numel_of(const Shape& s) { return shape_numel(s); }
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x))
            throw NumericError(std::string(op) + ": non-finite value in result");
}

inline Tensor make_op(Shape shape, std::vector<double> data, const char* op,
                      std::initializer_list<Tensor> parents,
                      std::function<void(TensorNode&)> backward) {
    check_finite(data, op);
    Tensor out(std::move(shape), std::move(data));
    TensorNode& n = *out.node();
    n.op = op;
    bool needs = false;
    if (grad_mode_flag())
        for (const Tensor& p : parents)
            if (p.requires_grad()) needs = true;
    if (needs) {
        n.requires_grad = true;
        for (const Tensor& p : parents) n.parents.push_back(p.node());
        n.backward_fn = std::move(backward);
    }
    return out;
}

inline void accumulate(TensorNode& parent, const std::vector<double>& contrib) {
    if (!parent.requires_grad) return;
    parent.ensure_grad();
    for (std::size_t i = 0; i < contrib.size(); ++i) parent.grad[i] += contrib[i];
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op(a.shape(), std::move(out), "add", {a, b}, [](TensorNode& n) {
        detail::accumulate(*n.parents[0], n.grad);
        detail::accumulate(*n.parents[1], n.grad);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op(a.shape(), std::move(out), "sub", {a, b}, [](TensorNode& n) {
        detail::accumulate(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            auto& p = *n.parents[1];
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op(a.shape(), std::move(out), "mul", {a, b}, [](TensorNode& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[i] += n.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pb.grad[i] += n.grad[i] * pa.data[i];
        }
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    return detail::make_op(a.shape(), std::move(out), "div", {a, b}, [](TensorNode& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[i] += n.grad[i] / pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pb.grad[i] -= n.grad[i] * n.data[i] / pb.data[i];
        }
    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    return detail::make_op(a.shape(), std::move(out), "add_scalar", {a}, [](TensorNode& n) {
        detail::accumulate(*n.parents[0], n.grad);
    });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_op(a.shape(), std::move(out), "mul_scalar", {a}, [c](TensorNode& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += c * n.grad[i];
    });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Adds a row vector b[C] to every row of x[R,C].
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw ShapeError("add_rowvec: want [R,C] + [C], got " + shape_str(x.shape()) +
                         " + " + shape_str(b.shape()));
    const std::size_t R = x.dim(0), C = x.dim(1);
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) out[r * C + c] = x.data()[r * C + c] + b.data()[c];
    return detail::make_op(x.shape(), std::move(out), "add_rowvec", {x, b},
                           [R, C](TensorNode& n) {
                               detail::accumulate(*n.parents[0], n.grad);
                               auto& pb = *n.parents[1];
                               if (!pb.requires_grad) return;
                               pb.ensure_grad();
                               for (std::size_t r = 0; r < R; ++r)
                                   for (std::size_t c = 0; c < C; ++c)
                                       pb.grad[c] += n.grad[r * C + c];
                           });
}

// out[b,i,j] = x[b,i,j] * s[b,i]  (scale each row of each batch matrix)
inline Tensor mul_rowwise(const Tensor& x, const Tensor& s) {
    if (x.rank() != 3 || s.rank() != 2 || x.dim(0) != s.dim(0) || x.dim(1) != s.dim(1))
        throw ShapeError("mul_rowwise: want [B,n,m] * [B,n]");
    const std::size_t B = x.dim(0), N = x.dim(1), M = x.dim(2);
    std::vector<double> out(x.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < N; ++i) {
            const double f = s.data()[b * N + i];
            for (std::size_t j = 0; j < M; ++j)
                out[(b * N + i) * M + j] = x.data()[(b * N + i) * M + j] * f;
        }
    return detail::make_op(x.shape(), std::move(out), "mul_rowwise", {x, s},
                           [B, N, M](TensorNode& n) {
                               auto& px = *n.parents[0];
                               auto& ps = *n.parents[1];
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t i = 0; i < N; ++i) {
                                       const double f = ps.data[b * N + i];
                                       double acc = 0.0;
                                       for (std::size_t j = 0; j < M; ++j) {
                                           const std::size_t k = (b * N + i) * M + j;
                                           if (px.requires_grad) {
                                               px.ensure_grad();
                                               px.grad[k] += n.grad[k] * f;
                                           }
                                           acc += n.grad[k] * px.data[k];
                                       }
                                       if (ps.requires_grad) {
                                           ps.ensure_grad();
                                           ps.grad[b * N + i] += acc;
                                       }
                                   }
                           });
}

// out[b,i,j] = x[b,i,j] * s[b,j]  (scale each column of each batch matrix)
inline Tensor mul_colwise(const Tensor& x, const Tensor& s) {
    if (x.rank() != 3 || s.rank() != 2 || x.dim(0) != s.dim(0) || x.dim(2) != s.dim(1))
        throw ShapeError("mul_colwise: want [B,n,m] * [B,m]");
    const std::size_t B = x.dim(0), N = x.dim(1), M = x.dim(2);
    std::vector<double> out(x.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < M; ++j)
                out[(b * N + i) * M + j] = x.data()[(b * N + i) * M + j] * s.data()[b * M + j];
    return detail::make_op(x.shape(), std::move(out), "mul_colwise", {x, s},
                           [B, N, M](TensorNode& n) {
                               auto& px = *n.parents[0];
                               auto& ps = *n.parents[1];
                               if (px.requires_grad) px.ensure_grad();
                               if (ps.requires_grad) ps.ensure_grad();
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t i = 0; i < N; ++i)
                                       for (std::size_t j = 0; j < M; ++j) {
                                           const std::size_t k = (b * N + i) * M + j;
                                           if (px.requires_grad)
                                               px.grad[k] += n.grad[k] * ps.data[b * M + j];
                                           if (ps.requires_grad)
                                               ps.grad[b * M + j] += n.grad[k] * px.data[k];
                                       }
                           });
}

// ---------------------------------------------------------------------------
// unary maps
// ---------------------------------------------------------------------------

namespace detail {
inline Tensor unary_op(const Tensor& a, const char* name,
                       const std::function<double(double)>& f,
                       std::function<void(TensorNode&)> backward) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
    return make_op(a.shape(), std::move(out), name, {a}, std::move(backward));
}
}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, "sigmoid",
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                p.grad[i] += n.grad[i] * n.data[i] * (1.0 - n.data[i]);
        });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        a, "relu", [](double x) { return x > 0 ? x : 0.0; },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            // subgradient at 0 is taken as 0
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                if (p.data[i] > 0) p.grad[i] += n.grad[i];
        });
}

inline Tensor tanh_op(const Tensor& a) {
    return detail::unary_op(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                p.grad[i] += n.grad[i] * (1.0 - n.data[i] * n.data[i]);
        });
}

inline Tensor exp_op(const Tensor& a) {
    return detail::unary_op(
        a, "exp", [](double x) { return std::exp(x); },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                p.grad[i] += n.grad[i] * n.data[i];
        });
}

inline Tensor log_op(const Tensor& a) {
    return detail::unary_op(
        a, "log", [](double x) { return std::log(x); },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                p.grad[i] += n.grad[i] / p.data[i];
        });
}

inline Tensor sqrt_op(const Tensor& a) {
    return detail::unary_op(
        a, "sqrt", [](double x) { return std::sqrt(x); },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                p.grad[i] += n.grad[i] * 0.5 / n.data[i];
        });
}

inline Tensor rsqrt(const Tensor& a) {
    return detail::unary_op(
        a, "rsqrt", [](double x) { return 1.0 / std::sqrt(x); },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                p.grad[i] += n.grad[i] * (-0.5) * n.data[i] * n.data[i] * n.data[i];
        });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(
        a, "square", [](double x) { return x * x; },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                p.grad[i] += n.grad[i] * 2.0 * p.data[i];
        });
}

inline Tensor softplus(const Tensor& a) {
    return detail::unary_op(
        a, "softplus",
        [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                const double x = p.data[i];
                const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                p.grad[i] += n.grad[i] * s;
            }
        });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<double> out(M * N);
    {
        detail::CMap ma(a.data().data(), M, K), mb(b.data().data(), K, N);
        detail::MMap mo(out.data(), M, N);
        mo.noalias() = ma * mb;
    }
    return detail::make_op({M, N}, std::move(out), "matmul", {a, b},
                           [M, K, N](TensorNode& n) {
                               detail::CMap g(n.grad.data(), M, N);
                               auto& pa = *n.parents[0];
                               auto& pb = *n.parents[1];
                               if (pa.requires_grad) {
                                   pa.ensure_grad();
                                   detail::CMap mb(pb.data.data(), K, N);
                                   detail::MMap ga(pa.grad.data(), M, K);
                                   ga.noalias() += g * mb.transpose();
                               }
                               if (pb.requires_grad) {
                                   pb.ensure_grad();
                                   detail::CMap ma(pa.data.data(), M, K);
                                   detail::MMap gb(pb.grad.data(), K, N);
                                   gb.noalias() += ma.transpose() * g;
                               }
                           });
}

// a[M,K] * b[N,K]^T -> [M,N]; the layout used by linear layers storing W as
// [out,in].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: inner dims differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()) + "^T");
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
    std::vector<double> out(M * N);
    {
        detail::CMap ma(a.data().data(), M, K), mb(b.data().data(), N, K);
        detail::MMap mo(out.data(), M, N);
        mo.noalias() = ma * mb.transpose();
    }
    return detail::make_op({M, N}, std::move(out), "matmul_nt", {a, b},
                           [M, K, N](TensorNode& n) {
                               detail::CMap g(n.grad.data(), M, N);
                               auto& pa = *n.parents[0];
                               auto& pb = *n.parents[1];
                               if (pa.requires_grad) {
                                   pa.ensure_grad();
                                   detail::CMap mb(pb.data.data(), N, K);
                                   detail::MMap ga(pa.grad.data(), M, K);
                                   ga.noalias() += g * mb;
                               }
                               if (pb.requires_grad) {
                                   pb.ensure_grad();
                                   detail::CMap ma(pa.data.data(), M, K);
                                   detail::MMap gb(pb.grad.data(), N, K);
                                   gb.noalias() += g.transpose() * ma;
                               }
                           });
}

// Batched product: a[B,m,k] * b[B,k,n] -> [B,m,n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("bmm: want [B,m,k] * [B,k,n], got " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
    const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    std::vector<double> out(B * M * N);
    for (std::size_t i = 0; i < B; ++i) {
        detail::CMap ma(a.data().data() + i * M * K, M, K);
        detail::CMap mb(b.data().data() + i * K * N, K, N);
        detail::MMap mo(out.data() + i * M * N, M, N);
        mo.noalias() = ma * mb;
    }
    return detail::make_op({B, M, N}, std::move(out), "bmm", {a, b},
                           [B, M, K, N](TensorNode& n) {
                               auto& pa = *n.parents[0];
                               auto& pb = *n.parents[1];
                               if (pa.requires_grad) pa.ensure_grad();
                               if (pb.requires_grad) pb.ensure_grad();
                               for (std::size_t i = 0; i < B; ++i) {
                                   detail::CMap g(n.grad.data() + i * M * N, M, N);
                                   if (pa.requires_grad) {
                                       detail::CMap mb(pb.data.data() + i * K * N, K, N);
                                       detail::MMap ga(pa.grad.data() + i * M * K, M, K);
                                       ga.noalias() += g * mb.transpose();
                                   }
                                   if (pb.requires_grad) {
                                       detail::CMap ma(pa.data.data() + i * M * K, M, K);
                                       detail::MMap gb(pb.grad.data() + i * K * N, K, N);
                                       gb.noalias() += ma.transpose() * g;
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    return detail::make_op({1}, {s}, "sum_all", {a}, [](TensorNode& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (double& g : p.grad) g += n.grad[0];
    });
}

inline Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0) * inv;
    return detail::make_op({1}, {s}, "mean_all", {a}, [inv](TensorNode& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (double& g : p.grad) g += n.grad[0] * inv;
    });
}

// [..., K] -> [...]: sum over the last axis.
inline Tensor sum_lastdim(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("sum_lastdim: rank 0");
    const std::size_t K = a.shape().back();
    const std::size_t R = a.numel() / K;
    Shape oshape(a.shape().begin(), a.shape().end() - 1);
    if (oshape.empty()) oshape = {1};
    std::vector<double> out(R, 0.0);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < K; ++k) out[r] += a.data()[r * K + k];
    return detail::make_op(std::move(oshape), std::move(out), "sum_lastdim", {a},
                           [R, K](TensorNode& n) {
                               auto& p = *n.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (std::size_t r = 0; r < R; ++r)
                                   for (std::size_t k = 0; k < K; ++k)
                                       p.grad[r * K + k] += n.grad[r];
                           });
}

// [B,F] -> [F]: mean over rows (axis 0).
inline Tensor mean_axis0(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("mean_axis0: want rank 2");
    const std::size_t B = a.dim(0), F = a.dim(1);
    const double inv = 1.0 / static_cast<double>(B);
    std::vector<double> out(F, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t f = 0; f < F; ++f) out[f] += a.data()[b * F + f];
    for (double& v : out) v *= inv;
    return detail::make_op({F}, std::move(out), "mean_axis0", {a}, [B, F, inv](TensorNode& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f) p.grad[b * F + f] += n.grad[f] * inv;
    });
}

// [B,n,d] -> [B,d]: mean over the middle axis.
inline Tensor mean_axis1(const Tensor& a) {
    if (a.rank() != 3) throw ShapeError("mean_axis1: want rank 3");
    const std::size_t B = a.dim(0), N = a.dim(1), D = a.dim(2);
    const double inv = 1.0 / static_cast<double>(N);
    std::vector<double> out(B * D, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t d = 0; d < D; ++d) out[b * D + d] += a.data()[(b * N + i) * D + d];
    for (double& v : out) v *= inv;
    return detail::make_op({B, D}, std::move(out), "mean_axis1", {a},
                           [B, N, D, inv](TensorNode& n) {
                               auto& p = *n.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t i = 0; i < N; ++i)
                                       for (std::size_t d = 0; d < D; ++d)
                                           p.grad[(b * N + i) * D + d] += n.grad[b * D + d] * inv;
                           });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

// Row-stable softmax over the last axis (max subtraction).
inline Tensor softmax_lastdim(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("softmax_lastdim: rank 0");
    const std::size_t K = a.shape().back();
    const std::size_t R = a.numel() / K;
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < R; ++r) {
        double mx = a.data()[r * K];
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, a.data()[r * K + k]);
        double sum = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            out[r * K + k] = std::exp(a.data()[r * K + k] - mx);
            sum += out[r * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) out[r * K + k] /= sum;
    }
    return detail::make_op(a.shape(), std::move(out), "softmax_lastdim", {a},
                           [R, K](TensorNode& n) {
                               auto& p = *n.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (std::size_t r = 0; r < R; ++r) {
                                   double dot = 0.0;
                                   for (std::size_t k = 0; k < K; ++k)
                                       dot += n.grad[r * K + k] * n.data[r * K + k];
                                   for (std::size_t k = 0; k < K; ++k)
                                       p.grad[r * K + k] +=
                                           n.data[r * K + k] * (n.grad[r * K + k] - dot);
                               }
                           });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    std::vector<double> out = a.data();
    return detail::make_op(std::move(shape), std::move(out), "reshape", {a}, [](TensorNode& n) {
        detail::accumulate(*n.parents[0], n.grad);
    });
}

// Concatenate along the last axis; all leading dims must agree.
inline Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank())
        throw ShapeError("concat_lastdim: rank mismatch");
    for (std::size_t i = 0; i + 1 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeError("concat_lastdim: leading dims differ, " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    const std::size_t Ka = a.shape().back(), Kb = b.shape().back();
    const std::size_t R = a.numel() / Ka;
    Shape oshape = a.shape();
    oshape.back() = Ka + Kb;
    std::vector<double> out(R * (Ka + Kb));
    for (std::size_t r = 0; r < R; ++r) {
        std::copy_n(a.data().begin() + r * Ka, Ka, out.begin() + r * (Ka + Kb));
        std::copy_n(b.data().begin() + r * Kb, Kb, out.begin() + r * (Ka + Kb) + Ka);
    }
    return detail::make_op(std::move(oshape), std::move(out), "concat_lastdim", {a, b},
                           [R, Ka, Kb](TensorNode& n) {
                               auto& pa = *n.parents[0];
                               auto& pb = *n.parents[1];
                               if (pa.requires_grad) pa.ensure_grad();
                               if (pb.requires_grad) pb.ensure_grad();
                               for (std::size_t r = 0; r < R; ++r) {
                                   if (pa.requires_grad)
                                       for (std::size_t k = 0; k < Ka; ++k)
                                           pa.grad[r * Ka + k] += n.grad[r * (Ka + Kb) + k];
                                   if (pb.requires_grad)
                                       for (std::size_t k = 0; k < Kb; ++k)
                                           pb.grad[r * Kb + k] += n.grad[r * (Ka + Kb) + Ka + k];
                               }
                           });
}

// [..., C] -> [..., len]: contiguous slice of the last axis.
inline Tensor slice_lastdim(const Tensor& a, std::size_t start, std::size_t len) {
    const std::size_t C = a.shape().back();
    if (start + len > C) throw ShapeError("slice_lastdim: out of range");
    const std::size_t R = a.numel() / C;
    Shape oshape = a.shape();
    oshape.back() = len;
    std::vector<double> out(R * len);
    for (std::size_t r = 0; r < R; ++r)
        std::copy_n(a.data().begin() + r * C + start, len, out.begin() + r * len);
    return detail::make_op(std::move(oshape), std::move(out), "slice_lastdim", {a},
                           [R, C, start, len](TensorNode& n) {
                               auto& p = *n.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (std::size_t r = 0; r < R; ++r)
                                   for (std::size_t k = 0; k < len; ++k)
                                       p.grad[r * C + start + k] += n.grad[r * len + k];
                           });
}

// Repeat a whole [n,d] matrix B times -> [B*n, d]. Gradient sums the tiles.
inline Tensor tile_rows(const Tensor& a, std::size_t reps) {
    if (a.rank() != 2) throw ShapeError("tile_rows: want rank 2");
    const std::size_t N = a.dim(0), D = a.dim(1);
    std::vector<double> out(reps * N * D);
    for (std::size_t r = 0; r < reps; ++r)
        std::copy_n(a.data().begin(), N * D, out.begin() + r * N * D);
    return detail::make_op({reps * N, D}, std::move(out), "tile_rows", {a},
                           [reps, N, D](TensorNode& n) {
                               auto& p = *n.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (std::size_t r = 0; r < reps; ++r)
                                   for (std::size_t k = 0; k < N * D; ++k)
                                       p.grad[k] += n.grad[r * N * D + k];
                           });
}

// For each of B node sets of n rows, emit all ordered pairs (i,j):
// [B*n, d] -> [B*n*n, 2d] with row (b,i,j) = [e_{b,i} || e_{b,j}].
inline Tensor pairwise_concat(const Tensor& e, std::size_t batch, std::size_t n) {
    if (e.rank() != 2 || e.dim(0) != batch * n)
        throw ShapeError("pairwise_concat: want [B*n, d]");
    const std::size_t D = e.dim(1);
    std::vector<double> out(batch * n * n * 2 * D);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const std::size_t row = (b * n + i) * n + j;
                std::copy_n(e.data().begin() + (b * n + i) * D, D, out.begin() + row * 2 * D);
                std::copy_n(e.data().begin() + (b * n + j) * D, D,
                            out.begin() + row * 2 * D + D);
            }
    return detail::make_op({batch * n * n, 2 * D}, std::move(out), "pairwise_concat", {e},
                           [batch, n, D](TensorNode& node) {
                               auto& p = *node.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (std::size_t b = 0; b < batch; ++b)
                                   for (std::size_t i = 0; i < n; ++i)
                                       for (std::size_t j = 0; j < n; ++j) {
                                           const std::size_t row = (b * n + i) * n + j;
                                           for (std::size_t k = 0; k < D; ++k) {
                                               p.grad[(b * n + i) * D + k] +=
                                                   node.grad[row * 2 * D + k];
                                               p.grad[(b * n + j) * D + k] +=
                                                   node.grad[row * 2 * D + D + k];
                                           }
                                       }
                           });
}

// ---------------------------------------------------------------------------
// leaf factories
// ---------------------------------------------------------------------------

inline Tensor rand_uniform(Shape shape, double lo, double hi, RngStream& rng,
                           bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline Tensor rand_normal(Shape shape, double mean, double stddev, RngStream& rng,
                          bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.normal(mean, stddev);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline Tensor rand_gumbel(Shape shape, RngStream& rng) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.gumbel();
    return Tensor(std::move(shape), std::move(v));
}

// Linear layer convention: w is [out,in], bias [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul_nt(x, w), b);
}

}  // namespace bgn
