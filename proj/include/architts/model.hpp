#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "architts/aligner.hpp"
#include "architts/condition_encoder.hpp"
#include "architts/errors.hpp"
#include "architts/nn.hpp"
#include "architts/velocity_decoder.hpp"

// Whole model: semantic aligner, condition encoder, velocity decoder, all
// registered in one parameter store so the optimizer, EMA, and checkpoints
// see a single named, ordered weight list.

namespace architts {

struct ModelConfig {
    int64_t vocab_size = 16;  // codec tokens; CTC adds a blank internally
    int64_t latent_dim = 16;
    int64_t speaker_dim = 4;
    int64_t model_dim = 96;
    int64_t head_count = 4;
    int64_t convnext_blocks = 1;
    int64_t aligner_blocks = 6;
    int64_t encoder_blocks = 18;
    int64_t decoder_blocks = 4;
    int64_t ctc_tap_layer = 0;  // 0 resolves to encoder_blocks/2, minimum 1
    bool vq_enabled = false;
    int64_t codebook_size = 64;

    AlignerConfig aligner() const {
        AlignerConfig c;
        c.convnext_blocks = convnext_blocks;
        c.transformer_blocks = aligner_blocks;
        c.model_dim = model_dim;
        c.head_count = head_count;
        c.vq_enabled = vq_enabled;
        c.codebook_size = codebook_size;
        return c;
    }

    EncoderConfig encoder() const {
        EncoderConfig c;
        c.blocks = encoder_blocks;
        c.model_dim = model_dim;
        c.head_count = head_count;
        c.ctc_tap_layer = ctc_tap_layer;
        c.ctc_vocab = vocab_size + 1;
        c.latent_dim = latent_dim;
        c.speaker_dim = speaker_dim;
        return c;
    }

    DecoderConfig decoder() const {
        DecoderConfig c;
        c.blocks = decoder_blocks;
        c.model_dim = model_dim;
        c.head_count = head_count;
        c.latent_dim = latent_dim;
        return c;
    }

    void validate() const {
        if (vocab_size < 2) throw ValidationError("model: vocab_size must be >= 2");
        aligner().validate();
        encoder().validate();
        decoder().validate();
    }
};

template <typename S>
class ArchiTtsModel {
public:
    ArchiTtsModel(const ModelConfig& cfg, uint64_t init_seed)
        : cfg_(cfg), store_(init_seed), init_seed_(init_seed) {
        cfg_.validate();
        aligner_ = std::make_unique<SemanticAligner<S>>(store_, cfg_.aligner(), cfg_.vocab_size);
        encoder_ = std::make_unique<ConditionEncoder<S>>(store_, cfg_.encoder());
        decoder_ = std::make_unique<VelocityDecoder<S>>(store_, cfg_.decoder());
    }

    const ModelConfig& config() const { return cfg_; }
    uint64_t init_seed() const { return init_seed_; }
    ParamStore<S>& store() { return store_; }
    const ParamStore<S>& store() const { return store_; }

    SemanticAligner<S>& aligner() { return *aligner_; }
    const SemanticAligner<S>& aligner() const { return *aligner_; }
    ConditionEncoder<S>& encoder() { return *encoder_; }
    const ConditionEncoder<S>& encoder() const { return *encoder_; }
    VelocityDecoder<S>& decoder() { return *decoder_; }
    const VelocityDecoder<S>& decoder() const { return *decoder_; }

    // Semantic features for a token sequence at a target frame count.
    AlignerOutput<S> semantics(const std::vector<int64_t>& tokens, int64_t n_frames) const {
        return aligner_->align(aligner_->embed_text(tokens), n_frames);
    }

    int64_t parameter_count() const { return store_.total_values(); }

private:
    ModelConfig cfg_;
    ParamStore<S> store_;
    uint64_t init_seed_ = 0;
    std::unique_ptr<SemanticAligner<S>> aligner_;
    std::unique_ptr<ConditionEncoder<S>> encoder_;
    std::unique_ptr<VelocityDecoder<S>> decoder_;
};

}  // namespace architts
