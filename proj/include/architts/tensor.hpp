#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "architts/errors.hpp"
#include "architts/rng.hpp"

// Minimal reverse-mode autodiff over dense row-major tensors. The primitive
// set is exactly what the model needs: matmul, attention (composed),
// layer norm, GELU, depthwise 1-D convolution, embedding lookup, softmax,
// elementwise arithmetic, reductions, rotary rotation, slicing/concat.
//
// Gradients are hand-written per primitive and validated against central
// finite differences in the test suite.

namespace architts {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

namespace detail {

// Autodiff graph recording is disabled inside a NoGradGuard scope.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline uint64_t& node_counter() {
    thread_local uint64_t counter = 0;
    return counter;
}

}  // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename S>
struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool retain_grad = false;  // keep grad visible after backward (leaves always do)
    bool is_leaf = true;
    uint64_t id = 0;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(const Node<S>&)> backward;

    int64_t numel() const { return shape_numel(shape); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

template <typename S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return filled(std::move(shape), S(0)); }

    static Tensor filled(Shape shape, S value) {
        Tensor t = make(std::move(shape));
        std::fill(t.n_->data.begin(), t.n_->data.end(), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<S> data) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("from_data: " + std::to_string(data.size()) +
                             " values for shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<Node<S>>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        t.n_->id = ++detail::node_counter();
        return t;
    }

    static Tensor randn(Shape shape, RngStream& rng, S stddev = S(1)) {
        Tensor t = make(std::move(shape));
        for (auto& v : t.n_->data) v = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return n_ != nullptr; }

    const Shape& shape() const { return n_->shape; }
    int64_t dim(size_t i) const { return n_->shape.at(i); }
    int64_t rank() const { return static_cast<int64_t>(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }

    // Row/column view: trailing dimension is the column count, everything
    // before collapses into rows. Rank-1 tensors are a single row.
    int64_t cols() const { return n_->shape.empty() ? 1 : n_->shape.back(); }
    int64_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    std::vector<S>& data() { return n_->data; }
    const std::vector<S>& data() const { return n_->data; }
    S item() const {
        if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
        return n_->data[0];
    }

    const std::vector<S>& grad() const { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }

    Tensor& set_requires_grad(bool v = true) {
        n_->requires_grad = v;
        return *this;
    }
    bool requires_grad() const { return n_->requires_grad; }

    Tensor& retain_grad() {
        n_->retain_grad = true;
        return *this;
    }

    void zero_grad() { n_->grad.assign(n_->data.size(), S(0)); }

    std::shared_ptr<Node<S>> node() const { return n_; }

    static Tensor from_node(std::shared_ptr<Node<S>> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    static Tensor make(Shape shape) {
        Tensor t;
        t.n_ = std::make_shared<Node<S>>();
        t.n_->data.assign(shape_numel(shape), S(0));
        t.n_->shape = std::move(shape);
        t.n_->id = ++detail::node_counter();
        return t;
    }

    std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <typename S>
Tensor<S> op_output(Shape shape, std::vector<Tensor<S>> inputs) {
    Tensor<S> out = Tensor<S>::zeros(std::move(shape));
    auto n = out.node();
    bool track = grad_mode();
    bool any_grad = false;
    for (const auto& in : inputs)
        if (in.requires_grad()) any_grad = true;
    if (track && any_grad) {
        n->requires_grad = true;
        n->is_leaf = false;
        n->parents.reserve(inputs.size());
        for (auto& in : inputs) n->parents.push_back(in.node());
    }
    return out;
}

template <typename S>
bool tracked(const Tensor<S>& out) {
    return out.node()->requires_grad && !out.node()->is_leaf;
}

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
ConstMatMap<S> mat(const Node<S>& n, int64_t r, int64_t c) {
    return ConstMatMap<S>(n.data.data(), r, c);
}

template <typename S>
MatMap<S> grad_mat(Node<S>& n, int64_t r, int64_t c) {
    n.ensure_grad();
    return MatMap<S>(n.grad.data(), r, c);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false, bool trans_b = false) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t m = trans_a ? a.dim(1) : a.dim(0);
    const int64_t k = trans_a ? a.dim(0) : a.dim(1);
    const int64_t kb = trans_b ? b.dim(1) : b.dim(0);
    const int64_t n = trans_b ? b.dim(0) : b.dim(1);
    if (k != kb)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                         (trans_a ? "^T" : "") + " * " + shape_str(b.shape()) + (trans_b ? "^T" : ""));

    Tensor<S> out = detail::op_output<S>({m, n}, {a, b});
    {
        detail::ConstMatMap<S> am(a.data().data(), a.dim(0), a.dim(1));
        detail::ConstMatMap<S> bm(b.data().data(), b.dim(0), b.dim(1));
        detail::MatMap<S> cm(out.data().data(), m, n);
        if (!trans_a && !trans_b)
            cm.noalias() = am * bm;
        else if (trans_a && !trans_b)
            cm.noalias() = am.transpose() * bm;
        else if (!trans_a && trans_b)
            cm.noalias() = am * bm.transpose();
        else
            cm.noalias() = am.transpose() * bm.transpose();
    }

    if (detail::tracked(out)) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->backward = [an, bn, trans_a, trans_b, m, n](const Node<S>& o) {
            detail::ConstMatMap<S> dC(o.grad.data(), m, n);
            detail::ConstMatMap<S> A(an->data.data(), an->shape[0], an->shape[1]);
            detail::ConstMatMap<S> B(bn->data.data(), bn->shape[0], bn->shape[1]);
            if (an->requires_grad) {
                an->ensure_grad();
                detail::MatMap<S> dA(an->grad.data(), an->shape[0], an->shape[1]);
                if (!trans_a)
                    dA.noalias() += trans_b ? (dC * B).eval() : (dC * B.transpose()).eval();
                else
                    dA.noalias() += trans_b ? (B.transpose() * dC.transpose()).eval()
                                            : (B * dC.transpose()).eval();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::MatMap<S> dB(bn->grad.data(), bn->shape[0], bn->shape[1]);
                if (!trans_b)
                    dB.noalias() += trans_a ? (A * dC).eval() : (A.transpose() * dC).eval();
                else
                    dB.noalias() += trans_a ? (dC.transpose() * A.transpose()).eval()
                                            : (dC.transpose() * A).eval();
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

namespace detail {

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<S> out = detail::op_output<S>(a.shape(), {a, b});
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::tracked(out)) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->backward = [an, bn](const Node<S>& o) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<S> out = detail::op_output<S>(a.shape(), {a, b});
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::tracked(out)) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->backward = [an, bn](const Node<S>& o) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<S> out = detail::op_output<S>(a.shape(), {a, b});
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::tracked(out)) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->backward = [an, bn](const Node<S>& o) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->data[i];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
    Tensor<S> out = detail::op_output<S>(a.shape(), {a});
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + c;
    if (detail::tracked(out)) {
        auto an = a.node();
        out.node()->backward = [an](const Node<S>& o) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
    Tensor<S> out = detail::op_output<S>(a.shape(), {a});
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * c;
    if (detail::tracked(out)) {
        auto an = a.node();
        out.node()->backward = [an, c](const Node<S>& o) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
        };
    }
    return out;
}

// x[rows x n] + v[n], broadcast over rows.
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
    const int64_t n = x.cols();
    if (v.numel() != n)
        throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) + " vs columns " + std::to_string(n));
    Tensor<S> out = detail::op_output<S>(x.shape(), {x, v});
    const int64_t r = x.rows();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] + v.data()[j];
    if (detail::tracked(out)) {
        auto xn = x.node();
        auto vn = v.node();
        out.node()->backward = [xn, vn, r, n](const Node<S>& o) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < n; ++j) vn->grad[j] += o.grad[i * n + j];
            }
        };
    }
    return out;
}

// x[rows x n] * v[n], broadcast over rows.
template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
    const int64_t n = x.cols();
    if (v.numel() != n)
        throw ShapeError("mul_rowvec: vector " + shape_str(v.shape()) + " vs columns " + std::to_string(n));
    Tensor<S> out = detail::op_output<S>(x.shape(), {x, v});
    const int64_t r = x.rows();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] * v.data()[j];
    if (detail::tracked(out)) {
        auto xn = x.node();
        auto vn = v.node();
        out.node()->backward = [xn, vn, r, n](const Node<S>& o) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < n; ++j) xn->grad[i * n + j] += o.grad[i * n + j] * vn->data[j];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < n; ++j) vn->grad[j] += o.grad[i * n + j] * xn->data[i * n + j];
            }
        };
    }
    return out;
}

// x[m x n] with row i scaled by c[i].
template <typename S>
Tensor<S> mul_colvec(const Tensor<S>& x, const Tensor<S>& c) {
    const int64_t m = x.rows(), n = x.cols();
    if (c.numel() != m)
        throw ShapeError("mul_colvec: vector " + shape_str(c.shape()) + " vs rows " + std::to_string(m));
    Tensor<S> out = detail::op_output<S>(x.shape(), {x, c});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] * c.data()[i];
    if (detail::tracked(out)) {
        auto xn = x.node();
        auto cn = c.node();
        out.node()->backward = [xn, cn, m, n](const Node<S>& o) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) xn->grad[i * n + j] += o.grad[i * n + j] * cn->data[i];
            }
            if (cn->requires_grad) {
                cn->ensure_grad();
                for (int64_t i = 0; i < m; ++i) {
                    S acc = 0;
                    for (int64_t j = 0; j < n; ++j) acc += o.grad[i * n + j] * xn->data[i * n + j];
                    cn->grad[i] += acc;
                }
            }
        };
    }
    return out;
}

// Replicate a length-n vector into m rows.
template <typename S>
Tensor<S> broadcast_rows(const Tensor<S>& v, int64_t m) {
    if (m < 1) throw ValidationError("broadcast_rows: row count must be >= 1");
    const int64_t n = v.numel();
    Tensor<S> out = detail::op_output<S>({m, n}, {v});
    for (int64_t i = 0; i < m; ++i)
        std::copy(v.data().begin(), v.data().end(), out.data().begin() + i * n);
    if (detail::tracked(out)) {
        auto vn = v.node();
        out.node()->backward = [vn, m, n](const Node<S>& o) {
            vn->ensure_grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) vn->grad[j] += o.grad[i * n + j];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// nonlinearities

// Exact GELU: x * Phi(x).
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    Tensor<S> out = detail::op_output<S>(x.shape(), {x});
    const S inv_sqrt2 = S(0.70710678118654752440084436210485);
    for (int64_t i = 0; i < x.numel(); ++i) {
        S v = x.data()[i];
        out.data()[i] = v * S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
    }
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, inv_sqrt2](const Node<S>& o) {
            xn->ensure_grad();
            const S inv_sqrt2pi = S(0.39894228040143267793994605993438);
            for (size_t i = 0; i < o.grad.size(); ++i) {
                S v = xn->data[i];
                S phi = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
                S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
                xn->grad[i] += o.grad[i] * (phi + v * pdf);
            }
        };
    }
    return out;
}

namespace detail {

template <typename S>
void softmax_row(const S* in, S* out, int64_t n) {
    S mx = in[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    S sum = 0;
    for (int64_t j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - mx);
        sum += out[j];
    }
    S inv = S(1) / sum;
    for (int64_t j = 0; j < n; ++j) out[j] *= inv;
}

}  // namespace detail

template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
    const int64_t m = x.rows(), n = x.cols();
    if (n < 1) throw ShapeError("softmax_rows: empty rows");
    Tensor<S> out = detail::op_output<S>(x.shape(), {x});
    for (int64_t i = 0; i < m; ++i) detail::softmax_row(x.data().data() + i * n, out.data().data() + i * n, n);
    if (detail::tracked(out)) {
        auto xn = x.node();
        // o is the output node itself; capturing its shared_ptr here would
        // create a reference cycle and leak the whole graph.
        out.node()->backward = [xn, m, n](const Node<S>& o) {
            xn->ensure_grad();
            for (int64_t i = 0; i < m; ++i) {
                const S* y = o.data.data() + i * n;
                const S* dy = o.grad.data() + i * n;
                S dot = 0;
                for (int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                S* dx = xn->grad.data() + i * n;
                for (int64_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> log_softmax_rows(const Tensor<S>& x) {
    const int64_t m = x.rows(), n = x.cols();
    if (n < 1) throw ShapeError("log_softmax_rows: empty rows");
    Tensor<S> out = detail::op_output<S>(x.shape(), {x});
    for (int64_t i = 0; i < m; ++i) {
        const S* in = x.data().data() + i * n;
        S* o = out.data().data() + i * n;
        S mx = in[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        S sum = 0;
        for (int64_t j = 0; j < n; ++j) sum += std::exp(in[j] - mx);
        S lse = mx + std::log(sum);
        for (int64_t j = 0; j < n; ++j) o[j] = in[j] - lse;
    }
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, m, n](const Node<S>& o) {
            xn->ensure_grad();
            for (int64_t i = 0; i < m; ++i) {
                const S* y = o.data.data() + i * n;
                const S* dy = o.grad.data() + i * n;
                S total = 0;
                for (int64_t j = 0; j < n; ++j) total += dy[j];
                S* dx = xn->grad.data() + i * n;
                for (int64_t j = 0; j < n; ++j) dx[j] += dy[j] - std::exp(y[j]) * total;
            }
        };
    }
    return out;
}

// Row-wise normalization to zero mean / unit variance (population variance,
// eps inside the square root). Affine transform is applied by the caller.
template <typename S>
Tensor<S> layer_norm_rows(const Tensor<S>& x, S eps) {
    const int64_t n = x.cols();
    if (n < 1) throw ShapeError("layer_norm_rows: empty normalization dimension");
    if (!(eps > S(0))) throw ValidationError("layer_norm_rows: eps must be > 0");
    const int64_t m = x.rows();
    Tensor<S> out = detail::op_output<S>(x.shape(), {x});
    std::vector<S> inv_sigma(m);
    for (int64_t i = 0; i < m; ++i) {
        const S* in = x.data().data() + i * n;
        S* o = out.data().data() + i * n;
        S mean = 0;
        for (int64_t j = 0; j < n; ++j) mean += in[j];
        mean /= S(n);
        S var = 0;
        for (int64_t j = 0; j < n; ++j) {
            S d = in[j] - mean;
            var += d * d;
        }
        var /= S(n);
        S inv = S(1) / std::sqrt(var + eps);
        inv_sigma[i] = inv;
        for (int64_t j = 0; j < n; ++j) o[j] = (in[j] - mean) * inv;
    }
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, m, n, inv_sigma = std::move(inv_sigma)](const Node<S>& o) {
            xn->ensure_grad();
            for (int64_t i = 0; i < m; ++i) {
                const S* y = o.data.data() + i * n;
                const S* dy = o.grad.data() + i * n;
                S mean_dy = 0, mean_dy_y = 0;
                for (int64_t j = 0; j < n; ++j) {
                    mean_dy += dy[j];
                    mean_dy_y += dy[j] * y[j];
                }
                mean_dy /= S(n);
                mean_dy_y /= S(n);
                S* dx = xn->grad.data() + i * n;
                for (int64_t j = 0; j < n; ++j)
                    dx[j] += inv_sigma[i] * (dy[j] - mean_dy - y[j] * mean_dy_y);
            }
        };
    }
    return out;
}

// Full layer norm with affine transform, composed from primitives.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
    return add_rowvec(mul_rowvec(layer_norm_rows(x, eps), gain), bias);
}

// ---------------------------------------------------------------------------
// embedding lookup

template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int64_t>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank-2");
    const int64_t v = table.dim(0), d = table.dim(1);
    for (int64_t id : ids)
        if (id < 0 || id >= v)
            throw ValidationError("embedding: token id " + std::to_string(id) + " outside [0, " +
                                  std::to_string(v) + ")");
    const int64_t t = static_cast<int64_t>(ids.size());
    Tensor<S> out = detail::op_output<S>({t, d}, {table});
    for (int64_t i = 0; i < t; ++i)
        std::copy(table.data().begin() + ids[i] * d, table.data().begin() + (ids[i] + 1) * d,
                  out.data().begin() + i * d);
    if (detail::tracked(out)) {
        auto tn = table.node();
        out.node()->backward = [tn, ids, d](const Node<S>& o) {
            tn->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int64_t j = 0; j < d; ++j) tn->grad[ids[i] * d + j] += o.grad[i * d + j];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// depthwise 1-D convolution, zero-padded to preserve length

template <typename S>
Tensor<S> dwconv1d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    if (x.rank() != 2 || w.rank() != 2) throw ShapeError("dwconv1d: x and w must be rank-2");
    const int64_t t = x.dim(0), d = x.dim(1), k = w.dim(0);
    if (w.dim(1) != d)
        throw ShapeError("dwconv1d: kernel channels " + std::to_string(w.dim(1)) + " vs input " +
                         std::to_string(d));
    if (b.numel() != d) throw ShapeError("dwconv1d: bias size mismatch");
    if (k % 2 == 0) throw ValidationError("dwconv1d: kernel width must be odd");
    const int64_t p = (k - 1) / 2;
    Tensor<S> out = detail::op_output<S>(x.shape(), {x, w, b});
    for (int64_t i = 0; i < t; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            S acc = b.data()[j];
            for (int64_t q = 0; q < k; ++q) {
                int64_t src = i + q - p;
                if (src >= 0 && src < t) acc += w.data()[q * d + j] * x.data()[src * d + j];
            }
            out.data()[i * d + j] = acc;
        }
    }
    if (detail::tracked(out)) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = b.node();
        out.node()->backward = [xn, wn, bn, t, d, k, p](const Node<S>& o) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int64_t i = 0; i < t; ++i)
                    for (int64_t q = 0; q < k; ++q) {
                        int64_t src = i + q - p;
                        if (src < 0 || src >= t) continue;
                        for (int64_t j = 0; j < d; ++j)
                            xn->grad[src * d + j] += wn->data[q * d + j] * o.grad[i * d + j];
                    }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (int64_t q = 0; q < k; ++q)
                    for (int64_t i = 0; i < t; ++i) {
                        int64_t src = i + q - p;
                        if (src < 0 || src >= t) continue;
                        for (int64_t j = 0; j < d; ++j)
                            wn->grad[q * d + j] += xn->data[src * d + j] * o.grad[i * d + j];
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < t; ++i)
                    for (int64_t j = 0; j < d; ++j) bn->grad[j] += o.grad[i * d + j];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// rotary position rotation, applied per head block of width head_dim

template <typename S>
Tensor<S> rotary(const Tensor<S>& x, int64_t head_dim, S base = S(10000)) {
    if (x.rank() != 2) throw ShapeError("rotary: expects rank-2 input");
    const int64_t t = x.dim(0), d = x.dim(1);
    if (head_dim < 2 || head_dim % 2 != 0 || d % head_dim != 0)
        throw ValidationError("rotary: head_dim must be even and divide feature dim");
    const int64_t half = head_dim / 2;
    // Shared angle table: heads see identical positions/frequencies.
    std::vector<S> cos_tab(t * half), sin_tab(t * half);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < half; ++j) {
            S theta = S(i) * std::pow(base, S(-2) * S(j) / S(head_dim));
            cos_tab[i * half + j] = std::cos(theta);
            sin_tab[i * half + j] = std::sin(theta);
        }
    Tensor<S> out = detail::op_output<S>(x.shape(), {x});
    const int64_t heads = d / head_dim;
    for (int64_t i = 0; i < t; ++i)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t j = 0; j < half; ++j) {
                const int64_t off = i * d + h * head_dim + 2 * j;
                const S c = cos_tab[i * half + j], s = sin_tab[i * half + j];
                const S a = x.data()[off], b2 = x.data()[off + 1];
                out.data()[off] = a * c - b2 * s;
                out.data()[off + 1] = a * s + b2 * c;
            }
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, t, d, heads, head_dim, half, cos_tab = std::move(cos_tab),
                                sin_tab = std::move(sin_tab)](const Node<S>& o) {
            xn->ensure_grad();
            for (int64_t i = 0; i < t; ++i)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t j = 0; j < half; ++j) {
                        const int64_t off = i * d + h * head_dim + 2 * j;
                        const S c = cos_tab[i * half + j], s = sin_tab[i * half + j];
                        const S da = o.grad[off], db = o.grad[off + 1];
                        xn->grad[off] += da * c + db * s;
                        xn->grad[off + 1] += -da * s + db * c;
                    }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// slicing and concatenation

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, int64_t begin, int64_t count) {
    const int64_t m = x.rows(), n = x.cols();
    if (begin < 0 || count < 0 || begin + count > m)
        throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + std::to_string(m) + " rows");
    Tensor<S> out = detail::op_output<S>({count, n}, {x});
    std::copy(x.data().begin() + begin * n, x.data().begin() + (begin + count) * n, out.data().begin());
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, begin, count, n](const Node<S>& o) {
            xn->ensure_grad();
            for (int64_t i = 0; i < count * n; ++i) xn->grad[begin * n + i] += o.grad[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, int64_t begin, int64_t count) {
    const int64_t m = x.rows(), n = x.cols();
    if (begin < 0 || count < 0 || begin + count > n)
        throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + std::to_string(n) + " columns");
    Tensor<S> out = detail::op_output<S>({m, count}, {x});
    for (int64_t i = 0; i < m; ++i)
        std::copy(x.data().begin() + i * n + begin, x.data().begin() + i * n + begin + count,
                  out.data().begin() + i * count);
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, m, n, begin, count](const Node<S>& o) {
            xn->ensure_grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < count; ++j) xn->grad[i * n + begin + j] += o.grad[i * count + j];
        };
    }
    return out;
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int64_t n = parts[0].cols();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.cols() != n) throw ShapeError("concat_rows: column counts differ");
        total += p.rows();
    }
    Tensor<S> out = detail::op_output<S>({total, n}, parts);
    int64_t row = 0;
    std::vector<int64_t> offsets(parts.size());
    for (size_t i = 0; i < parts.size(); ++i) {
        offsets[i] = row;
        std::copy(parts[i].data().begin(), parts[i].data().end(), out.data().begin() + row * n);
        row += parts[i].rows();
    }
    if (detail::tracked(out)) {
        std::vector<std::shared_ptr<Node<S>>> nodes;
        nodes.reserve(parts.size());
        for (const auto& p : parts) nodes.push_back(p.node());
        out.node()->backward = [nodes, offsets, n](const Node<S>& o) {
            for (size_t i = 0; i < nodes.size(); ++i) {
                if (!nodes[i]->requires_grad) continue;
                nodes[i]->ensure_grad();
                const int64_t cnt = nodes[i]->numel();
                for (int64_t j = 0; j < cnt; ++j) nodes[i]->grad[j] += o.grad[offsets[i] * n + j];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int64_t m = parts[0].rows();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
        total += p.cols();
    }
    Tensor<S> out = detail::op_output<S>({m, total}, parts);
    int64_t col = 0;
    std::vector<int64_t> offsets(parts.size());
    std::vector<int64_t> widths(parts.size());
    for (size_t i = 0; i < parts.size(); ++i) {
        offsets[i] = col;
        widths[i] = parts[i].cols();
        for (int64_t r = 0; r < m; ++r)
            std::copy(parts[i].data().begin() + r * widths[i], parts[i].data().begin() + (r + 1) * widths[i],
                      out.data().begin() + r * total + col);
        col += widths[i];
    }
    if (detail::tracked(out)) {
        std::vector<std::shared_ptr<Node<S>>> nodes;
        nodes.reserve(parts.size());
        for (const auto& p : parts) nodes.push_back(p.node());
        out.node()->backward = [nodes, offsets, widths, m, total](const Node<S>& o) {
            for (size_t i = 0; i < nodes.size(); ++i) {
                if (!nodes[i]->requires_grad) continue;
                nodes[i]->ensure_grad();
                for (int64_t r = 0; r < m; ++r)
                    for (int64_t j = 0; j < widths[i]; ++j)
                        nodes[i]->grad[r * widths[i] + j] += o.grad[r * total + offsets[i] + j];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    Tensor<S> out = detail::op_output<S>(std::move(shape), {x});
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn](const Node<S>& o) {
            xn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
Tensor<S> row_sum(const Tensor<S>& x) {
    const int64_t m = x.rows(), n = x.cols();
    Tensor<S> out = detail::op_output<S>({m}, {x});
    for (int64_t i = 0; i < m; ++i) {
        S acc = 0;
        for (int64_t j = 0; j < n; ++j) acc += x.data()[i * n + j];
        out.data()[i] = acc;
    }
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, m, n](const Node<S>& o) {
            xn->ensure_grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) xn->grad[i * n + j] += o.grad[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> total_sum(const Tensor<S>& x) {
    Tensor<S> out = detail::op_output<S>({1}, {x});
    S acc = 0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
    out.data()[0] = acc;
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn](const Node<S>& o) {
            xn->ensure_grad();
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += o.grad[0];
        };
    }
    return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
    const S inv = S(1) / S(x.numel());
    return mul_scalar(total_sum(x), inv);
}

// ---------------------------------------------------------------------------
// unary maps

template <typename S>
Tensor<S> sqrt_t(const Tensor<S>& x) {
    Tensor<S> out = detail::op_output<S>(x.shape(), {x});
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::sqrt(x.data()[i]);
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn](const Node<S>& o) {
            xn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i)
                xn->grad[i] += o.grad[i] * S(0.5) / o.data[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> reciprocal(const Tensor<S>& x) {
    Tensor<S> out = detail::op_output<S>(x.shape(), {x});
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = S(1) / x.data()[i];
    if (detail::tracked(out)) {
        auto xn = x.node();
        out.node()->backward = [xn](const Node<S>& o) {
            xn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i)
                xn->grad[i] -= o.grad[i] * o.data[i] * o.data[i];
        };
    }
    return out;
}

// Detach from the graph: same values, no gradient flow.
template <typename S>
Tensor<S> stopgrad(const Tensor<S>& x) {
    return Tensor<S>::from_data(x.shape(), x.data());
}

// Straight-through estimator: forward takes value's data verbatim, backward
// routes the gradient to grad_path only. Exact in value, unlike composing
// grad_path + stopgrad(value - grad_path).
template <typename S>
Tensor<S> straight_through(const Tensor<S>& value, const Tensor<S>& grad_path) {
    if (value.shape() != grad_path.shape())
        throw ShapeError("straight_through: value " + shape_str(value.shape()) +
                         " vs grad path " + shape_str(grad_path.shape()));
    Tensor<S> out = detail::op_output<S>(value.shape(), {grad_path});
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = value.data()[i];
    if (detail::tracked(out)) {
        auto gn = grad_path.node();
        out.node()->backward = [gn](const Node<S>& o) {
            gn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) gn->grad[i] += o.grad[i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// attention (composed from the primitives above)

// Scaled dot-product attention. q [Tq x D], k [Tk x D], v [Tk x Dv].
// Causal masking requires Tq == Tk.
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, bool causal = false) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("attention: q, k, v must be rank-2");
    if (q.dim(1) != k.dim(1))
        throw ShapeError("attention: q/k feature dims differ: " + shape_str(q.shape()) + " vs " +
                         shape_str(k.shape()));
    if (k.dim(0) != v.dim(0))
        throw ShapeError("attention: k/v row counts differ: " + shape_str(k.shape()) + " vs " +
                         shape_str(v.shape()));
    if (q.dim(0) < 1 || k.dim(0) < 1) throw ShapeError("attention: empty sequence");
    const int64_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1);
    Tensor<S> scores = mul_scalar(matmul(q, k, false, true), S(1) / std::sqrt(S(d)));
    if (causal) {
        if (tq != tk) throw ShapeError("attention: causal mask requires square score matrix");
        Tensor<S> mask = Tensor<S>::zeros({tq, tk});
        for (int64_t i = 0; i < tq; ++i)
            for (int64_t j = i + 1; j < tk; ++j) mask.data()[i * tk + j] = S(-1e30);
        scores = add(scores, mask);
    }
    return matmul(softmax_rows(scores), v);
}

// ---------------------------------------------------------------------------
// backward pass

template <typename S>
void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
    auto root = loss.node();
    if (!root->requires_grad)
        throw ValidationError("backward: loss does not depend on any tracked tensor");

    // Reachable tracked nodes. Creation ids increase from parents to
    // children, so descending id order is a valid reverse topological order.
    std::vector<Node<S>*> order;
    std::vector<std::shared_ptr<Node<S>>> stack{root};
    std::unordered_set<Node<S>*> seen{root.get()};
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        order.push_back(n.get());
        for (auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    std::sort(order.begin(), order.end(), [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });

    root->ensure_grad();
    root->grad[0] += S(1);
    for (Node<S>* n : order) {
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

}  // namespace architts
