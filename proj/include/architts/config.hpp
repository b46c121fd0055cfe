#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "architts/dataset.hpp"
#include "architts/errors.hpp"
#include "architts/model.hpp"
#include "architts/sampler.hpp"
#include "architts/training.hpp"

// Run configuration for the command line: output paths plus one section per
// pipeline stage. Every key is optional (defaults fill the gaps), unknown
// keys are rejected, and to/from JSON round-trips are lossless. Flag
// precedence is handled by the CLI: flags are applied after the file.

namespace architts {

struct PathsConfig {
    std::string dataset = "data";
    std::string checkpoints = "checkpoints";
    std::string reports = "reports";
};

struct CorpusConfig {
    int64_t train_count = 2000;
    int64_t test_count = 200;
    int64_t len_min = 4;
    int64_t len_max = 12;
    uint64_t seed = 7;

    void validate() const {
        if (train_count < 0 || test_count < 0)
            throw ValidationError("corpus config: counts must be >= 0");
        if (len_min < 1 || len_max < len_min)
            throw ValidationError("corpus config: need 1 <= len_min <= len_max");
    }
};

struct RunConfig {
    PathsConfig paths;
    CodecConfig codec;
    CorpusConfig corpus;
    ModelConfig model;
    uint64_t init_seed = 1;
    TrainConfig train;
    uint64_t train_seed = 1;
    int64_t checkpoint_interval = 1000;
    SamplerPlan sampler;

    void validate() const {
        codec.validate();
        corpus.validate();
        model.validate();
        train.validate();
        sampler.validate();
        if (checkpoint_interval < 1)
            throw ValidationError("run config: checkpoint_interval must be >= 1");
        if (model.vocab_size != codec.vocab_size)
            throw ValidationError("run config: model and codec vocab_size differ");
        if (model.latent_dim != codec.latent_dim)
            throw ValidationError("run config: model and codec latent_dim differ");
        if (model.speaker_dim != codec.speaker_dim)
            throw ValidationError("run config: model and codec speaker_dim differ");
    }
};

namespace detail {

template <typename T>
void assign_if(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config key \"") + key + "\": " + e.what());
    }
}

inline void reject_unknown(const nlohmann::json& j, const nlohmann::json& ref,
                           const std::string& section) {
    if (!j.is_object()) throw ConfigError("config section \"" + section + "\" must be an object");
    for (const auto& [key, value] : j.items()) {
        if (!ref.contains(key))
            throw ConfigError("config section \"" + section + "\": unknown key \"" + key + "\"");
        (void)value;
    }
}

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
    return nlohmann::json{{"vocab_size", m.vocab_size},
                          {"latent_dim", m.latent_dim},
                          {"speaker_dim", m.speaker_dim},
                          {"model_dim", m.model_dim},
                          {"head_count", m.head_count},
                          {"convnext_blocks", m.convnext_blocks},
                          {"aligner_blocks", m.aligner_blocks},
                          {"encoder_blocks", m.encoder_blocks},
                          {"decoder_blocks", m.decoder_blocks},
                          {"ctc_tap_layer", m.ctc_tap_layer},
                          {"vq_enabled", m.vq_enabled},
                          {"codebook_size", m.codebook_size}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig m;
    detail::reject_unknown(j, model_config_to_json(m), "model");
    detail::assign_if(j, "vocab_size", m.vocab_size);
    detail::assign_if(j, "latent_dim", m.latent_dim);
    detail::assign_if(j, "speaker_dim", m.speaker_dim);
    detail::assign_if(j, "model_dim", m.model_dim);
    detail::assign_if(j, "head_count", m.head_count);
    detail::assign_if(j, "convnext_blocks", m.convnext_blocks);
    detail::assign_if(j, "aligner_blocks", m.aligner_blocks);
    detail::assign_if(j, "encoder_blocks", m.encoder_blocks);
    detail::assign_if(j, "decoder_blocks", m.decoder_blocks);
    detail::assign_if(j, "ctc_tap_layer", m.ctc_tap_layer);
    detail::assign_if(j, "vq_enabled", m.vq_enabled);
    detail::assign_if(j, "codebook_size", m.codebook_size);
    return m;
}

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
    return nlohmann::json{{"batch_size", t.batch_size},
                          {"total_steps", t.total_steps},
                          {"warmup_steps", t.warmup_steps},
                          {"peak_lr", t.peak_lr},
                          {"clip_norm", t.clip_norm},
                          {"ema_decay", t.ema_decay},
                          {"eta", t.eta},
                          {"p_drop_all", t.p_drop_all},
                          {"p_drop_joint", t.p_drop_joint},
                          {"mask_min", t.mask_min},
                          {"mask_max", t.mask_max},
                          {"log_interval", t.log_interval}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig t;
    detail::reject_unknown(j, train_config_to_json(t), "train");
    detail::assign_if(j, "batch_size", t.batch_size);
    detail::assign_if(j, "total_steps", t.total_steps);
    detail::assign_if(j, "warmup_steps", t.warmup_steps);
    detail::assign_if(j, "peak_lr", t.peak_lr);
    detail::assign_if(j, "clip_norm", t.clip_norm);
    detail::assign_if(j, "ema_decay", t.ema_decay);
    detail::assign_if(j, "eta", t.eta);
    detail::assign_if(j, "p_drop_all", t.p_drop_all);
    detail::assign_if(j, "p_drop_joint", t.p_drop_joint);
    detail::assign_if(j, "mask_min", t.mask_min);
    detail::assign_if(j, "mask_max", t.mask_max);
    detail::assign_if(j, "log_interval", t.log_interval);
    return t;
}

inline nlohmann::json sampler_plan_to_json(const SamplerPlan& p) {
    return nlohmann::json{{"nfe", p.nfe},
                          {"recompute", p.recompute},
                          {"cfg_strength", p.cfg_strength},
                          {"timeshift", p.timeshift},
                          {"seed", p.seed},
                          {"uncond_mode", uncond_mode_name(p.uncond_mode)}};
}

inline SamplerPlan sampler_plan_from_json(const nlohmann::json& j) {
    SamplerPlan p;
    detail::reject_unknown(j, sampler_plan_to_json(p), "sampler");
    detail::assign_if(j, "nfe", p.nfe);
    detail::assign_if(j, "recompute", p.recompute);
    detail::assign_if(j, "cfg_strength", p.cfg_strength);
    detail::assign_if(j, "timeshift", p.timeshift);
    detail::assign_if(j, "seed", p.seed);
    if (j.contains("uncond_mode")) p.uncond_mode = uncond_mode_from_name(j.at("uncond_mode"));
    return p;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["paths"] = {{"dataset", c.paths.dataset},
                  {"checkpoints", c.paths.checkpoints},
                  {"reports", c.paths.reports}};
    j["codec"] = codec_config_to_json(c.codec);
    j["corpus"] = {{"train_count", c.corpus.train_count},
                   {"test_count", c.corpus.test_count},
                   {"len_min", c.corpus.len_min},
                   {"len_max", c.corpus.len_max},
                   {"seed", c.corpus.seed}};
    j["model"] = model_config_to_json(c.model);
    j["init_seed"] = c.init_seed;
    j["train"] = train_config_to_json(c.train);
    j["train_seed"] = c.train_seed;
    j["checkpoint_interval"] = c.checkpoint_interval;
    j["sampler"] = sampler_plan_to_json(c.sampler);
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::reject_unknown(j, run_config_to_json(c), "run");
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        detail::reject_unknown(p, run_config_to_json(c)["paths"], "paths");
        detail::assign_if(p, "dataset", c.paths.dataset);
        detail::assign_if(p, "checkpoints", c.paths.checkpoints);
        detail::assign_if(p, "reports", c.paths.reports);
    }
    if (j.contains("codec")) {
        // The codec sidecar loader wants every key; inside a run config the
        // section is a partial override like the others.
        const auto& k = j.at("codec");
        detail::reject_unknown(k, codec_config_to_json(c.codec), "codec");
        detail::assign_if(k, "vocab_size", c.codec.vocab_size);
        detail::assign_if(k, "latent_dim", c.codec.latent_dim);
        detail::assign_if(k, "speaker_dim", c.codec.speaker_dim);
        detail::assign_if(k, "frames_min", c.codec.frames_min);
        detail::assign_if(k, "frames_max", c.codec.frames_max);
        detail::assign_if(k, "speaker_count", c.codec.speaker_count);
        detail::assign_if(k, "speaker_scale", c.codec.speaker_scale);
        detail::assign_if(k, "noise_scale", c.codec.noise_scale);
        detail::assign_if(k, "seed", c.codec.seed);
    }
    if (j.contains("corpus")) {
        const auto& k = j.at("corpus");
        detail::reject_unknown(k, run_config_to_json(c)["corpus"], "corpus");
        detail::assign_if(k, "train_count", c.corpus.train_count);
        detail::assign_if(k, "test_count", c.corpus.test_count);
        detail::assign_if(k, "len_min", c.corpus.len_min);
        detail::assign_if(k, "len_max", c.corpus.len_max);
        detail::assign_if(k, "seed", c.corpus.seed);
    }
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    detail::assign_if(j, "init_seed", c.init_seed);
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    detail::assign_if(j, "train_seed", c.train_seed);
    detail::assign_if(j, "checkpoint_interval", c.checkpoint_interval);
    if (j.contains("sampler")) c.sampler = sampler_plan_from_json(j.at("sampler"));
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("run config: cannot parse " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

inline void save_run_config(const std::string& path, const RunConfig& c) {
    detail::write_file(path, run_config_to_json(c).dump(2) + "\n");
}

}  // namespace architts
