#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "architts/errors.hpp"
#include "architts/rng.hpp"
#include "architts/tensor.hpp"

// Model building blocks: parameter registry, linear / layer-norm layers,
// rotary multi-head attention, MLP, ConvNeXt-style block, and the DiT block
// with per-frame adaptive modulation. Linear weights init Gaussian with
// fan-in scaling (std 1/sqrt(in)) so attention logits start near unit
// variance and break position symmetry from the first step; embedding
// tables std 0.3; biases zero, norm gains one; modulation and output heads
// zero so every DiT block starts as the identity and the untrained decoder
// predicts zero velocity.

namespace architts {

template <typename S>
class ParamStore {
public:
    explicit ParamStore(uint64_t init_seed) : root_(init_seed) {}

    // Every parameter gets its own named init stream, so values depend only
    // on (seed, name, shape), not on registration order.
    Tensor<S> gaussian(const std::string& name, Shape shape, double stddev = 0.02) {
        auto rng = root_.stream("init/" + name);
        Tensor<S> t = Tensor<S>::randn(std::move(shape), rng, static_cast<S>(stddev));
        return insert(name, std::move(t));
    }

    Tensor<S> zeros(const std::string& name, Shape shape) {
        return insert(name, Tensor<S>::zeros(std::move(shape)));
    }

    Tensor<S> ones(const std::string& name, Shape shape) {
        return insert(name, Tensor<S>::filled(std::move(shape), S(1)));
    }

    const std::vector<std::pair<std::string, Tensor<S>>>& params() const { return params_; }

    Tensor<S> find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("param store: no parameter named " + name);
        return params_[it->second].second;
    }

    int64_t total_values() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

private:
    Tensor<S> insert(const std::string& name, Tensor<S> t) {
        if (index_.count(name)) throw ValidationError("param store: duplicate parameter " + name);
        t.set_requires_grad();
        index_[name] = params_.size();
        params_.emplace_back(name, t);
        return params_.back().second;
    }

    RootRng root_;
    std::vector<std::pair<std::string, Tensor<S>>> params_;
    std::unordered_map<std::string, size_t> index_;
};

template <typename S>
struct Linear {
    Tensor<S> w;  // [in x out]
    Tensor<S> b;  // [out]

    Linear() = default;
    Linear(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t out, bool zero_init = false)
        : w(zero_init ? ps.zeros(name + ".w", {in, out})
                      : ps.gaussian(name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)))),
          b(ps.zeros(name + ".b", {out})) {}

    Tensor<S> operator()(const Tensor<S>& x) const { return add_rowvec(matmul(x, w), b); }
};

template <typename S>
struct LayerNorm {
    Tensor<S> gain;
    Tensor<S> bias;
    S eps = S(1e-5);

    LayerNorm() = default;
    LayerNorm(ParamStore<S>& ps, const std::string& name, int64_t dim)
        : gain(ps.ones(name + ".gain", {dim})), bias(ps.zeros(name + ".bias", {dim})) {}

    Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gain, bias, eps); }
};

// Full bidirectional self-attention with rotary positions applied per head.
template <typename S>
struct MultiHeadAttention {
    Linear<S> wq, wk, wv, wo;
    int64_t heads = 1;
    int64_t head_dim = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<S>& ps, const std::string& name, int64_t dim, int64_t head_count)
        : wq(ps, name + ".wq", dim, dim),
          wk(ps, name + ".wk", dim, dim),
          wv(ps, name + ".wv", dim, dim),
          wo(ps, name + ".wo", dim, dim),
          heads(head_count),
          head_dim(dim / head_count) {
        if (dim % head_count != 0)
            throw ValidationError("attention: model dim not divisible by head count");
        if (head_dim % 2 != 0)
            throw ValidationError("attention: head dim must be even for rotary rotation");
    }

    Tensor<S> operator()(const Tensor<S>& x) const {
        Tensor<S> q = rotary(wq(x), head_dim);
        Tensor<S> k = rotary(wk(x), head_dim);
        Tensor<S> v = wv(x);
        std::vector<Tensor<S>> outs;
        outs.reserve(heads);
        for (int64_t h = 0; h < heads; ++h) {
            const int64_t off = h * head_dim;
            outs.push_back(attention(slice_cols(q, off, head_dim), slice_cols(k, off, head_dim),
                                     slice_cols(v, off, head_dim)));
        }
        return wo(concat_cols(outs));
    }
};

template <typename S>
struct Mlp {
    Linear<S> fc1, fc2;

    Mlp() = default;
    Mlp(ParamStore<S>& ps, const std::string& name, int64_t dim, int64_t hidden)
        : fc1(ps, name + ".fc1", dim, hidden), fc2(ps, name + ".fc2", hidden, dim) {}

    Tensor<S> operator()(const Tensor<S>& x) const { return fc2(gelu(fc1(x))); }
};

// Pre-norm transformer block used by the semantic aligner.
template <typename S>
struct TransformerBlock {
    LayerNorm<S> ln1, ln2;
    MultiHeadAttention<S> attn;
    Mlp<S> mlp;

    TransformerBlock() = default;
    TransformerBlock(ParamStore<S>& ps, const std::string& name, int64_t dim, int64_t heads)
        : ln1(ps, name + ".ln1", dim),
          ln2(ps, name + ".ln2", dim),
          attn(ps, name + ".attn", dim, heads),
          mlp(ps, name + ".mlp", dim, 4 * dim) {}

    Tensor<S> operator()(const Tensor<S>& x) const {
        Tensor<S> y = add(x, attn(ln1(x)));
        return add(y, mlp(ln2(y)));
    }
};

// Depthwise conv, norm, pointwise expand, GELU, pointwise project, residual.
template <typename S>
struct ConvNeXtBlock {
    static constexpr int64_t kKernel = 7;
    Tensor<S> dw_w;  // [kernel x dim]
    Tensor<S> dw_b;  // [dim]
    LayerNorm<S> ln;
    Linear<S> pw1, pw2;

    ConvNeXtBlock() = default;
    ConvNeXtBlock(ParamStore<S>& ps, const std::string& name, int64_t dim)
        : dw_w(ps.gaussian(name + ".dw.w", {kKernel, dim}, 1.0 / std::sqrt(double(kKernel)))),
          dw_b(ps.zeros(name + ".dw.b", {dim})),
          ln(ps, name + ".ln", dim),
          pw1(ps, name + ".pw1", dim, 4 * dim),
          pw2(ps, name + ".pw2", 4 * dim, dim) {}

    Tensor<S> operator()(const Tensor<S>& x) const {
        Tensor<S> y = dwconv1d(x, dw_w, dw_b);
        y = ln(y);
        y = pw2(gelu(pw1(y)));
        return add(x, y);
    }
};

// DiT block: pre-norm attention and MLP, both wrapped in adaptive
// shift/scale/gate computed per frame from the conditioning vector c.
// The modulation projection is zero-initialized, so the block starts as
// the identity regardless of c.
template <typename S>
struct DiTBlock {
    Linear<S> mod;  // dim -> 6*dim, zero-init
    MultiHeadAttention<S> attn;
    Mlp<S> mlp;
    S eps = S(1e-5);

    DiTBlock() = default;
    DiTBlock(ParamStore<S>& ps, const std::string& name, int64_t dim, int64_t heads)
        : mod(ps, name + ".mod", dim, 6 * dim, /*zero_init=*/true),
          attn(ps, name + ".attn", dim, heads),
          mlp(ps, name + ".mlp", dim, 4 * dim) {}

    // x: [T x dim] hidden states; c: [T x dim] per-frame conditioning.
    Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& c) const {
        if (x.shape() != c.shape())
            throw ShapeError("dit block: hidden " + shape_str(x.shape()) + " vs conditioning " +
                             shape_str(c.shape()));
        const int64_t dim = x.cols();
        Tensor<S> m = mod(gelu(c));
        Tensor<S> shift1 = slice_cols(m, 0, dim);
        Tensor<S> scale1 = slice_cols(m, dim, dim);
        Tensor<S> gate1 = slice_cols(m, 2 * dim, dim);
        Tensor<S> shift2 = slice_cols(m, 3 * dim, dim);
        Tensor<S> scale2 = slice_cols(m, 4 * dim, dim);
        Tensor<S> gate2 = slice_cols(m, 5 * dim, dim);

        Tensor<S> h1 = add(mul(layer_norm_rows(x, eps), add_scalar(scale1, S(1))), shift1);
        Tensor<S> y = add(x, mul(gate1, attn(h1)));
        Tensor<S> h2 = add(mul(layer_norm_rows(y, eps), add_scalar(scale2, S(1))), shift2);
        return add(y, mul(gate2, mlp(h2)));
    }
};

// Sinusoidal embedding of a scalar timestep in [0,1]: cosines then sines over
// a geometric frequency ladder, t scaled by 1000 to spread the angles.
template <typename S>
Tensor<S> sinusoidal_embedding(double t, int64_t dim) {
    if (dim < 2 || dim % 2 != 0)
        throw ValidationError("sinusoidal_embedding: dim must be even and >= 2");
    const int64_t half = dim / 2;
    std::vector<S> e(dim);
    for (int64_t k = 0; k < half; ++k) {
        const double freq = std::pow(10000.0, -static_cast<double>(k) / half);
        const double angle = 1000.0 * t * freq;
        e[k] = static_cast<S>(std::cos(angle));
        e[half + k] = static_cast<S>(std::sin(angle));
    }
    return Tensor<S>::from_data({dim}, std::move(e));
}

}  // namespace architts
