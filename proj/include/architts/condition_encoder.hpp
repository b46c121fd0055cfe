#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "architts/errors.hpp"
#include "architts/nn.hpp"
#include "architts/tensor.hpp"

// Condition encoder: DiT stack fusing noisy latent x_t, audio prompt x_ref,
// semantic features z, and the speaker vector s (replicated per frame) into
// per-frame hidden states h. One intermediate block output phi is tapped for
// the CTC head. Dropped conditions are replaced by learned null embeddings;
// zero is a valid latent value, a learned null is unambiguous.

namespace architts {

struct EncoderConfig {
    int64_t blocks = 18;
    int64_t model_dim = 96;
    int64_t head_count = 4;
    int64_t ctc_tap_layer = 0;  // 0 resolves to blocks/2, minimum 1
    int64_t ctc_vocab = 17;     // codec vocab + blank
    int64_t latent_dim = 16;
    int64_t speaker_dim = 4;

    int64_t resolved_tap() const {
        if (ctc_tap_layer != 0) return ctc_tap_layer;
        return std::max<int64_t>(1, blocks / 2);
    }

    void validate() const {
        if (blocks < 1) throw ValidationError("encoder: need at least one block");
        if (model_dim < 2 || model_dim % head_count != 0)
            throw ValidationError("encoder: model_dim must be divisible by head_count");
        if (resolved_tap() < 1 || resolved_tap() > blocks)
            throw ValidationError("encoder: ctc tap layer " + std::to_string(resolved_tap()) +
                                  " outside [1, " + std::to_string(blocks) + "]");
        if (ctc_vocab < 2) throw ValidationError("encoder: ctc vocab must include blank plus labels");
        if (latent_dim < 1 || speaker_dim < 1)
            throw ValidationError("encoder: latent and speaker dims must be >= 1");
    }
};

struct NullFlags {
    bool ref = false;      // drop the audio prompt x_ref
    bool z = false;        // drop semantic features
    bool speaker = false;  // drop the speaker vector

    static NullFlags all() { return {true, true, true}; }
    static NullFlags prompt_speaker() { return {true, false, true}; }
};

template <typename S>
struct ConditionState {
    Tensor<S> h;    // [T x model_dim], final block output
    Tensor<S> phi;  // [T x model_dim], tapped block output
    double t = 0;   // timestep this state was computed at
};

template <typename S>
class ConditionEncoder {
public:
    ConditionEncoder(ParamStore<S>& ps, const EncoderConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        const int64_t in_dim = 2 * cfg_.latent_dim + cfg_.model_dim + cfg_.speaker_dim;
        in_proj_ = Linear<S>(ps, "encoder.in_proj", in_dim, cfg_.model_dim);
        null_ref_ = ps.gaussian("encoder.null_ref", {cfg_.latent_dim}, 0.3);
        null_z_ = ps.gaussian("encoder.null_z", {cfg_.model_dim}, 0.3);
        null_s_ = ps.gaussian("encoder.null_s", {cfg_.speaker_dim}, 0.3);
        for (int64_t i = 0; i < cfg_.blocks; ++i)
            blocks_.emplace_back(ps, "encoder.block" + std::to_string(i), cfg_.model_dim,
                                 cfg_.head_count);
        ctc_head_ = Linear<S>(ps, "encoder.ctc_head", cfg_.model_dim, cfg_.ctc_vocab);
    }

    const EncoderConfig& config() const { return cfg_; }

    ConditionState<S> encode(const Tensor<S>& x_t, double t, const Tensor<S>& x_ref,
                             const Tensor<S>& z, const Tensor<S>& speaker,
                             const NullFlags& flags) const {
        if (x_t.rank() != 2 || x_t.dim(1) != cfg_.latent_dim)
            throw ShapeError("encode_condition: x_t must be [T x latent_dim], got " +
                             shape_str(x_t.shape()));
        const int64_t t_frames = x_t.dim(0);
        if (!flags.ref && x_ref.shape() != x_t.shape())
            throw ValidationError("encode_condition: x_ref frame shape " + shape_str(x_ref.shape()) +
                                  " does not match x_t " + shape_str(x_t.shape()));
        if (!flags.z && (z.rank() != 2 || z.dim(0) != t_frames || z.dim(1) != cfg_.model_dim))
            throw ValidationError("encode_condition: z must be [T x model_dim] with T matching x_t");
        if (!flags.speaker && speaker.numel() != cfg_.speaker_dim)
            throw ValidationError("encode_condition: speaker vector size " +
                                  std::to_string(speaker.numel()) + " vs speaker_dim " +
                                  std::to_string(cfg_.speaker_dim));
        if (t < 0.0 || t > 1.0)
            throw ValidationError("encode_condition: t must lie in [0, 1]");

        Tensor<S> ref_in = flags.ref ? broadcast_rows(null_ref_, t_frames) : x_ref;
        Tensor<S> z_in = flags.z ? broadcast_rows(null_z_, t_frames) : z;
        Tensor<S> s_in = broadcast_rows(flags.speaker ? null_s_ : speaker, t_frames);
        Tensor<S> x = in_proj_(concat_cols<S>({x_t, ref_in, z_in, s_in}));
        Tensor<S> c = broadcast_rows(sinusoidal_embedding<S>(t, cfg_.model_dim), t_frames);

        ConditionState<S> state;
        state.t = t;
        const int64_t tap = cfg_.resolved_tap();
        for (int64_t i = 0; i < cfg_.blocks; ++i) {
            x = blocks_[i](x, c);
            if (i + 1 == tap) state.phi = x;
        }
        state.h = x;
        return state;
    }

    // Log-probabilities over [blank, labels...] for the CTC loss.
    Tensor<S> ctc_logits(const Tensor<S>& phi) const {
        return log_softmax_rows(ctc_head_(phi));
    }

    Tensor<S> null_ref() const { return null_ref_; }
    Tensor<S> null_z() const { return null_z_; }
    Tensor<S> null_speaker() const { return null_s_; }
    Linear<S>& ctc_head() { return ctc_head_; }

private:
    EncoderConfig cfg_;
    Linear<S> in_proj_;
    Tensor<S> null_ref_, null_z_, null_s_;
    std::vector<DiTBlock<S>> blocks_;
    Linear<S> ctc_head_;
};

}  // namespace architts
