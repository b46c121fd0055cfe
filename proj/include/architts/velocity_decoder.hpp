#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "architts/errors.hpp"
#include "architts/nn.hpp"
#include "architts/tensor.hpp"

// Velocity decoder: small DiT stack predicting the flow velocity from x_t.
// All conditioning arrives through h, added per frame to the broadcast
// sinusoidal timestep embedding; the decoder alone runs at every ODE step,
// which is what makes encoder-output sharing possible.

namespace architts {

struct DecoderConfig {
    int64_t blocks = 4;
    int64_t model_dim = 96;
    int64_t head_count = 4;
    int64_t latent_dim = 16;

    void validate() const {
        if (blocks < 1) throw ValidationError("decoder: need at least one block");
        if (model_dim < 2 || model_dim % head_count != 0)
            throw ValidationError("decoder: model_dim must be divisible by head_count");
        if (latent_dim < 1) throw ValidationError("decoder: latent_dim must be >= 1");
    }
};

template <typename S>
class VelocityDecoder {
public:
    VelocityDecoder(ParamStore<S>& ps, const DecoderConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        in_proj_ = Linear<S>(ps, "decoder.in_proj", cfg_.latent_dim, cfg_.model_dim);
        for (int64_t i = 0; i < cfg_.blocks; ++i)
            blocks_.emplace_back(ps, "decoder.block" + std::to_string(i), cfg_.model_dim,
                                 cfg_.head_count);
        // Zero-init modulation and output head: the untrained decoder
        // predicts exactly zero velocity.
        final_mod_ = Linear<S>(ps, "decoder.final_mod", cfg_.model_dim, 2 * cfg_.model_dim,
                               /*zero_init=*/true);
        out_proj_ = Linear<S>(ps, "decoder.out_proj", cfg_.model_dim, cfg_.latent_dim,
                              /*zero_init=*/true);
    }

    const DecoderConfig& config() const { return cfg_; }

    // h may come from a different (earlier) timestep than x_t; only frame
    // counts must agree. That looseness is the sharing mechanism's contract.
    Tensor<S> decode_velocity(const Tensor<S>& x_t, double t, const Tensor<S>& h) const {
        if (x_t.rank() != 2 || x_t.dim(1) != cfg_.latent_dim)
            throw ShapeError("decode_velocity: x_t must be [T x latent_dim], got " +
                             shape_str(x_t.shape()));
        if (h.rank() != 2 || h.dim(0) != x_t.dim(0) || h.dim(1) != cfg_.model_dim)
            throw ValidationError("decode_velocity: h " + shape_str(h.shape()) +
                                  " does not match frames of x_t " + shape_str(x_t.shape()));
        if (t < 0.0 || t > 1.0) throw ValidationError("decode_velocity: t must lie in [0, 1]");
        const int64_t t_frames = x_t.dim(0);
        Tensor<S> c = add(broadcast_rows(sinusoidal_embedding<S>(t, cfg_.model_dim), t_frames), h);
        Tensor<S> x = in_proj_(x_t);
        for (const auto& blk : blocks_) x = blk(x, c);
        Tensor<S> m = final_mod_(gelu(c));
        Tensor<S> shift = slice_cols(m, 0, cfg_.model_dim);
        Tensor<S> scale = slice_cols(m, cfg_.model_dim, cfg_.model_dim);
        Tensor<S> y = add(mul(layer_norm_rows(x, S(1e-5)), add_scalar(scale, S(1))), shift);
        return out_proj_(y);
    }

private:
    DecoderConfig cfg_;
    Linear<S> in_proj_;
    std::vector<DiTBlock<S>> blocks_;
    Linear<S> final_mod_;
    Linear<S> out_proj_;
};

}  // namespace architts
