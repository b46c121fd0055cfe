#pragma once

#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "architts/dataset.hpp"
#include "architts/errors.hpp"
#include "architts/model.hpp"
#include "architts/training.hpp"

// Checkpoints carry everything a resumed run needs to continue bit for bit:
// model config, both seeds, all parameters, the EMA shadow, and the full
// optimizer state. Floats are stored as raw bits, so save/load is exact.

namespace architts {

constexpr char kCheckpointMagic[8] = {'A', 'T', 'T', 'S', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_f64(std::string& buf, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(buf, bits);
}

inline double get_f64(ByteReader& r, const char* what) {
    uint64_t bits = r.u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void put_str(std::string& buf, const std::string& s) {
    put_u32(buf, static_cast<uint32_t>(s.size()));
    buf.append(s);
}

inline std::string get_str(ByteReader& r, const char* what) {
    const uint32_t n = r.u32(what);
    r.need(n, what);
    std::string s = r.buf.substr(r.pos, n);
    r.pos += n;
    return s;
}

inline void put_i64(std::string& buf, int64_t v) { put_u64(buf, static_cast<uint64_t>(v)); }
inline int64_t get_i64(ByteReader& r, const char* what) {
    return static_cast<int64_t>(r.u64(what));
}

}  // namespace detail

// Plain data loaded from a checkpoint file; feed it to build_model /
// build_ema_model / resume_trainer.
struct CheckpointData {
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    uint64_t init_seed = 0;
    uint64_t train_seed = 0;
    int64_t step = 0;  // completed training steps
    int64_t adam_steps = 0;
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<float>> params;
    std::vector<std::vector<float>> ema;
    std::vector<std::vector<float>> adam_m;
    std::vector<std::vector<float>> adam_v;
};

inline void save_checkpoint(const std::string& path, Trainer<float>& trainer, int64_t step) {
    if (step < 0) throw ValidationError("save_checkpoint: step must be >= 0");
    auto& model = trainer.model();
    const auto& mc = model.config();
    const auto& tc = trainer.config();
    std::string buf;
    buf.append(kCheckpointMagic, 8);
    detail::put_u32(buf, kCheckpointVersion);

    detail::put_i64(buf, mc.vocab_size);
    detail::put_i64(buf, mc.latent_dim);
    detail::put_i64(buf, mc.speaker_dim);
    detail::put_i64(buf, mc.model_dim);
    detail::put_i64(buf, mc.head_count);
    detail::put_i64(buf, mc.convnext_blocks);
    detail::put_i64(buf, mc.aligner_blocks);
    detail::put_i64(buf, mc.encoder_blocks);
    detail::put_i64(buf, mc.decoder_blocks);
    detail::put_i64(buf, mc.ctc_tap_layer);
    detail::put_u32(buf, mc.vq_enabled ? 1 : 0);
    detail::put_i64(buf, mc.codebook_size);

    detail::put_i64(buf, tc.batch_size);
    detail::put_i64(buf, tc.total_steps);
    detail::put_i64(buf, tc.warmup_steps);
    detail::put_i64(buf, tc.log_interval);
    detail::put_f64(buf, tc.peak_lr);
    detail::put_f64(buf, tc.clip_norm);
    detail::put_f64(buf, tc.ema_decay);
    detail::put_f64(buf, tc.eta);
    detail::put_f64(buf, tc.p_drop_all);
    detail::put_f64(buf, tc.p_drop_joint);
    detail::put_f64(buf, tc.mask_min);
    detail::put_f64(buf, tc.mask_max);

    detail::put_u64(buf, model.init_seed());
    detail::put_u64(buf, trainer.seed());
    detail::put_i64(buf, step);
    detail::put_i64(buf, trainer.optimizer().steps_taken());

    const auto& params = model.store().params();
    const auto& ema = trainer.ema().shadow();
    const auto& m = trainer.optimizer().first_moments();
    const auto& v = trainer.optimizer().second_moments();
    if (ema.size() != params.size() || m.size() != params.size() || v.size() != params.size())
        throw ValidationError("save_checkpoint: trainer state does not match parameter layout");

    detail::put_u64(buf, params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, tensor] = params[i];
        detail::put_str(buf, name);
        detail::put_u32(buf, static_cast<uint32_t>(tensor.rank()));
        for (int64_t d : tensor.shape()) detail::put_i64(buf, d);
        for (float x : tensor.data()) detail::put_f32(buf, x);
        for (float x : ema[i]) detail::put_f32(buf, x);
        for (float x : m[i]) detail::put_f32(buf, x);
        for (float x : v[i]) detail::put_f32(buf, x);
    }
    detail::write_file(path, buf);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    const std::string buf = detail::read_file(path);
    detail::ByteReader r(buf);
    r.need(8, "checkpoint magic");
    if (std::memcmp(buf.data(), kCheckpointMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path);
    r.pos = 8;
    const uint32_t version = r.u32("checkpoint version");
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));

    CheckpointData ck;
    auto& mc = ck.model_cfg;
    mc.vocab_size = detail::get_i64(r, "vocab_size");
    mc.latent_dim = detail::get_i64(r, "latent_dim");
    mc.speaker_dim = detail::get_i64(r, "speaker_dim");
    mc.model_dim = detail::get_i64(r, "model_dim");
    mc.head_count = detail::get_i64(r, "head_count");
    mc.convnext_blocks = detail::get_i64(r, "convnext_blocks");
    mc.aligner_blocks = detail::get_i64(r, "aligner_blocks");
    mc.encoder_blocks = detail::get_i64(r, "encoder_blocks");
    mc.decoder_blocks = detail::get_i64(r, "decoder_blocks");
    mc.ctc_tap_layer = detail::get_i64(r, "ctc_tap_layer");
    mc.vq_enabled = r.u32("vq_enabled") != 0;
    mc.codebook_size = detail::get_i64(r, "codebook_size");

    auto& tc = ck.train_cfg;
    tc.batch_size = detail::get_i64(r, "batch_size");
    tc.total_steps = detail::get_i64(r, "total_steps");
    tc.warmup_steps = detail::get_i64(r, "warmup_steps");
    tc.log_interval = detail::get_i64(r, "log_interval");
    tc.peak_lr = detail::get_f64(r, "peak_lr");
    tc.clip_norm = detail::get_f64(r, "clip_norm");
    tc.ema_decay = detail::get_f64(r, "ema_decay");
    tc.eta = detail::get_f64(r, "eta");
    tc.p_drop_all = detail::get_f64(r, "p_drop_all");
    tc.p_drop_joint = detail::get_f64(r, "p_drop_joint");
    tc.mask_min = detail::get_f64(r, "mask_min");
    tc.mask_max = detail::get_f64(r, "mask_max");

    ck.init_seed = r.u64("init_seed");
    ck.train_seed = r.u64("train_seed");
    ck.step = detail::get_i64(r, "step");
    ck.adam_steps = detail::get_i64(r, "adam_steps");

    const uint64_t count = r.u64("parameter count");
    for (uint64_t i = 0; i < count; ++i) {
        ck.names.push_back(detail::get_str(r, "parameter name"));
        const uint32_t rank = r.u32("parameter rank");
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = detail::get_i64(r, "parameter dim");
        const int64_t n = shape_numel(shape);
        ck.shapes.push_back(std::move(shape));
        auto read_block = [&](const char* what) {
            std::vector<float> vals(static_cast<size_t>(n));
            for (auto& x : vals) x = r.f32(what);
            return vals;
        };
        ck.params.push_back(read_block("parameter data"));
        ck.ema.push_back(read_block("ema data"));
        ck.adam_m.push_back(read_block("adam first moment"));
        ck.adam_v.push_back(read_block("adam second moment"));
    }
    if (r.pos != buf.size()) throw IoError("checkpoint has trailing bytes: " + path);
    return ck;
}

namespace detail {

// Layout check plus bulk copy of per-parameter float blocks into a store.
inline void install_values(ParamStore<float>& store, const CheckpointData& ck,
                           const std::vector<std::vector<float>>& blocks) {
    const auto& params = store.params();
    if (params.size() != ck.names.size())
        throw ValidationError("checkpoint: parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].first != ck.names[i])
            throw ValidationError("checkpoint: parameter order differs at " + params[i].first);
        if (params[i].second.shape() != ck.shapes[i])
            throw ValidationError("checkpoint: shape mismatch at " + params[i].first);
        Tensor<float> t = params[i].second;  // shared handle, mutates in place
        t.data() = blocks[i];
    }
}

}  // namespace detail

// Model with the raw (non-averaged) training weights.
inline std::unique_ptr<ArchiTtsModel<float>> build_model(const CheckpointData& ck) {
    auto model = std::make_unique<ArchiTtsModel<float>>(ck.model_cfg, ck.init_seed);
    detail::install_values(model->store(), ck, ck.params);
    return model;
}

// Model with the EMA weights, the ones sampling should use.
inline std::unique_ptr<ArchiTtsModel<float>> build_ema_model(const CheckpointData& ck) {
    auto model = std::make_unique<ArchiTtsModel<float>>(ck.model_cfg, ck.init_seed);
    detail::install_values(model->store(), ck, ck.ema);
    return model;
}

// Installs optimizer and EMA state into a freshly constructed trainer whose
// model already carries the checkpoint parameters. The next call should be
// train_step(ck.step + 1).
inline void resume_trainer(Trainer<float>& trainer, const CheckpointData& ck) {
    const auto& params = trainer.model().store().params();
    if (params.size() != ck.names.size())
        throw ValidationError("resume: parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i)
        if (params[i].first != ck.names[i])
            throw ValidationError("resume: parameter order differs at " + params[i].first);
    trainer.optimizer().first_moments() = ck.adam_m;
    trainer.optimizer().second_moments() = ck.adam_v;
    trainer.optimizer().set_steps_taken(ck.adam_steps);
    trainer.ema().shadow() = ck.ema;
}

}  // namespace architts
