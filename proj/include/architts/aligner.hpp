#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "architts/errors.hpp"
#include "architts/nn.hpp"
#include "architts/tensor.hpp"

// Semantic aligner: text tokens plus a requested frame count N become N
// contextual semantic features z. The transformer consumes
// [e_st, text..., e_sm, mask x N] with full attention and z is read at the
// N mask positions, which decouples speech length from text length.
// Segment-local sinusoidal positions are added to the text and mask rows:
// attention between a mask row at canvas index j and a text row at index i
// can then form scaled-alignment bands i = j * L / N by pairing sinusoid
// frequencies, which relative-offset attention alone cannot express.
// Optional vector quantization with straight-through gradients.

namespace architts {

struct AlignerConfig {
    int64_t convnext_blocks = 1;
    int64_t transformer_blocks = 6;
    int64_t model_dim = 96;
    int64_t head_count = 4;
    bool vq_enabled = false;
    int64_t codebook_size = 64;

    void validate() const {
        if (transformer_blocks < 1) throw ValidationError("aligner: need at least one transformer block");
        if (convnext_blocks < 0) throw ValidationError("aligner: negative convnext block count");
        if (model_dim < 2 || model_dim % head_count != 0)
            throw ValidationError("aligner: model_dim must be divisible by head_count");
        if (vq_enabled && codebook_size < 1) throw ConfigError("aligner: empty codebook");
    }
};

template <typename S>
struct AlignerOutput {
    Tensor<S> z;                      // [N x model_dim]
    std::vector<int64_t> vq_indices;  // empty unless vq_enabled
    Tensor<S> vq_loss;                // undefined unless vq_enabled
};

template <typename S>
class SemanticAligner {
public:
    SemanticAligner(ParamStore<S>& ps, const AlignerConfig& cfg, int64_t vocab_size) : cfg_(cfg) {
        cfg_.validate();
        if (vocab_size < 1) throw ValidationError("aligner: vocab_size must be >= 1");
        token_table_ = ps.gaussian("aligner.token_table", {vocab_size, cfg_.model_dim}, 0.3);
        for (int64_t i = 0; i < cfg_.convnext_blocks; ++i)
            convnext_.emplace_back(ps, "aligner.convnext" + std::to_string(i), cfg_.model_dim);
        e_st_ = ps.gaussian("aligner.e_st", {cfg_.model_dim}, 0.3);
        e_sm_ = ps.gaussian("aligner.e_sm", {cfg_.model_dim}, 0.3);
        mask_emb_ = ps.gaussian("aligner.mask_emb", {cfg_.model_dim}, 0.3);
        for (int64_t i = 0; i < cfg_.transformer_blocks; ++i)
            blocks_.emplace_back(ps, "aligner.block" + std::to_string(i), cfg_.model_dim, cfg_.head_count);
        final_ln_ = LayerNorm<S>(ps, "aligner.final_ln", cfg_.model_dim);
        if (cfg_.vq_enabled)
            codebook_ = ps.gaussian("aligner.codebook", {cfg_.codebook_size, cfg_.model_dim}, 0.3);
    }

    const AlignerConfig& config() const { return cfg_; }

    // Transformer input layout [e_st | text 1..L | e_sm | mask 1..N].
    static int64_t input_length(int64_t l, int64_t n) { return l + n + 2; }

    // Token embeddings refined by the ConvNeXt stack; length preserved.
    Tensor<S> embed_text(const std::vector<int64_t>& tokens) const {
        if (tokens.empty()) throw ValidationError("embed_text: empty token sequence");
        Tensor<S> e = embedding(token_table_, tokens);
        for (const auto& blk : convnext_) e = blk(e);
        return e;
    }

    AlignerOutput<S> align(const Tensor<S>& text_features, int64_t n_frames) const {
        if (n_frames < 1) throw ValidationError("align: requested frame count must be >= 1");
        if (text_features.rank() != 2 || text_features.dim(0) < 1)
            throw ShapeError("align: text features must be a non-empty [L x model_dim] matrix");
        if (text_features.dim(1) != cfg_.model_dim)
            throw ShapeError("align: text feature dim " + std::to_string(text_features.dim(1)) +
                             " vs model_dim " + std::to_string(cfg_.model_dim));
        const int64_t l = text_features.dim(0);
        Tensor<S> seq = concat_rows<S>({reshape(e_st_, {1, cfg_.model_dim}), text_features,
                                        reshape(e_sm_, {1, cfg_.model_dim}),
                                        broadcast_rows(mask_emb_, n_frames)});
        if (seq.dim(0) != input_length(l, n_frames))
            throw ShapeError("align: malformed sequence assembly");
        seq = add(seq, segment_positions(l, n_frames));
        for (const auto& blk : blocks_) seq = blk(seq);
        seq = final_ln_(seq);
        AlignerOutput<S> out;
        out.z = slice_rows(seq, l + 2, n_frames);
        if (cfg_.vq_enabled) quantize_into(out);
        return out;
    }

    // Nearest codebook entry per row; straight-through estimator so the
    // downstream gradient reaches z unchanged, codebook trained by the
    // quantization term, z pulled toward codes by the commitment term.
    void quantize_into(AlignerOutput<S>& out) const {
        if (!cfg_.vq_enabled) throw ConfigError("quantize: vq not enabled");
        const Tensor<S>& z = out.z;
        const int64_t n = z.dim(0), d = cfg_.model_dim, k = cfg_.codebook_size;
        out.vq_indices.resize(n);
        for (int64_t i = 0; i < n; ++i) {
            int64_t best = 0;
            S best_d2 = 0;
            for (int64_t c = 0; c < k; ++c) {
                S d2 = 0;
                for (int64_t j = 0; j < d; ++j) {
                    S diff = z.data()[i * d + j] - codebook_.data()[c * d + j];
                    d2 += diff * diff;
                }
                if (c == 0 || d2 < best_d2) {
                    best = c;
                    best_d2 = d2;
                }
            }
            out.vq_indices[i] = best;
        }
        Tensor<S> q = embedding(codebook_, out.vq_indices);
        Tensor<S> codebook_term = sub(stopgrad(z), q);
        Tensor<S> commit_term = sub(z, stopgrad(q));
        out.vq_loss = add(mean_all(mul(codebook_term, codebook_term)),
                          mul_scalar(mean_all(mul(commit_term, commit_term)), S(0.25)));
        out.z = straight_through(q, z);
    }

    Tensor<S> token_table() const { return token_table_; }
    Tensor<S> codebook() const { return codebook_; }
    std::vector<ConvNeXtBlock<S>>& convnext_blocks() { return convnext_; }

    // Constant [L+N+2 x model_dim] table: zeros on the special rows, classic
    // sinusoids over the local index within the text and mask segments,
    // scaled to the embedding init so neither signal drowns the other.
    Tensor<S> segment_positions(int64_t l, int64_t n) const {
        const int64_t dim = cfg_.model_dim, half = dim / 2, rows = input_length(l, n);
        std::vector<S> buf(rows * dim, S(0));
        auto fill = [&](int64_t row, int64_t pos) {
            for (int64_t k = 0; k < half; ++k) {
                const double freq = std::pow(10000.0, -static_cast<double>(k) / half);
                const double angle = static_cast<double>(pos) * freq;
                buf[row * dim + k] = static_cast<S>(0.3 * std::cos(angle));
                buf[row * dim + half + k] = static_cast<S>(0.3 * std::sin(angle));
            }
        };
        for (int64_t i = 0; i < l; ++i) fill(1 + i, i);
        for (int64_t j = 0; j < n; ++j) fill(l + 2 + j, j);
        return Tensor<S>::from_data({rows, dim}, std::move(buf));
    }

private:
    AlignerConfig cfg_;
    Tensor<S> token_table_;
    std::vector<ConvNeXtBlock<S>> convnext_;
    Tensor<S> e_st_, e_sm_, mask_emb_;
    std::vector<TransformerBlock<S>> blocks_;
    LayerNorm<S> final_ln_;
    Tensor<S> codebook_;
};

}  // namespace architts
