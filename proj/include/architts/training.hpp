#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "architts/codec.hpp"
#include "architts/ctc.hpp"
#include "architts/dataset.hpp"
#include "architts/errors.hpp"
#include "architts/model.hpp"
#include "architts/rng.hpp"

// Training: optimal-transport flow interpolation, logit-normal timesteps,
// contiguous infilling masks, classifier-free-guidance condition dropout,
// the three-part loss, AdamW with global-norm clipping and a linear
// warmup/decay schedule, and EMA weight tracking. Every random draw comes
// from a stream keyed by (seed, purpose, step, item), so a resumed run
// reproduces an uninterrupted one bit for bit.

namespace architts {

// x_t = (1-t) x0 + t x1 on the straight path; the matching velocity x1 - x0.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> interpolate(const Tensor<S>& x0, const Tensor<S>& x1, double t) {
    if (x0.shape() != x1.shape())
        throw ShapeError("interpolate: shapes differ: " + shape_str(x0.shape()) + " vs " +
                         shape_str(x1.shape()));
    if (t < 0.0 || t > 1.0) throw ValidationError("interpolate: t must lie in [0, 1]");
    Tensor<S> x_t = add(mul_scalar(x0, static_cast<S>(1.0 - t)), mul_scalar(x1, static_cast<S>(t)));
    Tensor<S> v_hat = sub(x1, x0);
    return {x_t, v_hat};
}

// Logit-normal timestep: sigmoid of a standard normal draw.
inline double sample_timestep(RngStream& rng) {
    const double g = rng.normal();
    return 1.0 / (1.0 + std::exp(-g));
}

inline std::vector<double> sample_timesteps(int64_t count, RngStream& rng) {
    if (count < 1) throw ValidationError("sample_timesteps: count must be >= 1");
    std::vector<double> out(count);
    for (auto& t : out) t = sample_timestep(rng);
    return out;
}

// Contiguous infilling mask covering a uniform fraction of [mask_min, 1].
// The rounded length is clamped so the realized fraction never drops below
// mask_min. Returns per-frame flags, true = frame is generated.
inline std::vector<bool> sample_mask(int64_t t_frames, RngStream& rng, double mask_min = 0.7,
                                     double mask_max = 1.0) {
    if (t_frames < 1) throw ValidationError("sample_mask: need at least one frame");
    if (!(mask_min > 0.0) || mask_min > mask_max || mask_max > 1.0)
        throw ValidationError("sample_mask: fraction range must satisfy 0 < min <= max <= 1");
    const double frac = rng.uniform(mask_min, mask_max);
    const int64_t floor_len = static_cast<int64_t>(std::ceil(mask_min * t_frames));
    int64_t len = static_cast<int64_t>(std::llround(frac * t_frames));
    len = std::clamp(len, std::max<int64_t>(floor_len, 1), t_frames);
    const int64_t start = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(t_frames - len + 1)));
    std::vector<bool> mask(t_frames, false);
    for (int64_t i = start; i < start + len; ++i) mask[i] = true;
    return mask;
}

// All-conditions drop first; joint prompt+speaker drop among the survivors.
// With defaults 0.2/0.3 the item-level rates are all-null 0.20, prompt and
// speaker null 0.24, fully conditioned 0.56.
inline NullFlags sample_condition_dropout(RngStream& rng, double p_all = 0.2, double p_joint = 0.3) {
    if (p_all < 0 || p_all > 1 || p_joint < 0 || p_joint > 1)
        throw ValidationError("condition dropout: probabilities must lie in [0, 1]");
    const double u_all = rng.uniform();
    const double u_joint = rng.uniform();  // always drawn, keeps streams aligned
    if (u_all < p_all) return NullFlags::all();
    if (u_joint < p_joint) return NullFlags::prompt_speaker();
    return {};
}

template <typename S>
struct TrainItem {
    std::vector<int64_t> tokens;
    Tensor<S> x1;       // [T x latent_dim] data latents
    Tensor<S> x0;       // [T x latent_dim] standard normal draw
    Tensor<S> x_ref;    // x1 with masked frames zeroed
    Tensor<S> mask;     // [T], 1 on generated frames
    Tensor<S> speaker;  // [speaker_dim] unit vector
    double t = 0.5;
    NullFlags flags;
    int64_t masked_frames = 0;
};

struct LossBreakdown {
    double cfm = 0;
    double dir = 0;
    double ctc = 0;
    double vq = 0;  // zero unless vector quantization is enabled
    double total = 0;
    double eta = 0.1;
};

template <typename S>
struct FlowLosses {
    Tensor<S> cfm;
    Tensor<S> dir;
};

// Masked-frame means of the squared velocity error and (1 - cosine).
// Frames outside the mask contribute nothing, exactly: the mask multiply
// zeroes their gradient paths.
template <typename S>
FlowLosses<S> masked_flow_losses(const Tensor<S>& v_pred, const Tensor<S>& v_hat,
                                 const Tensor<S>& mask, int64_t masked_frames) {
    if (v_pred.shape() != v_hat.shape())
        throw ShapeError("flow losses: prediction and target shapes differ");
    if (mask.numel() != v_pred.dim(0))
        throw ShapeError("flow losses: mask length does not match frame count");
    if (masked_frames < 1) throw ValidationError("flow losses: no masked frames");
    const S inv_m = S(1) / static_cast<S>(masked_frames);
    const S eps = S(1e-8);

    Tensor<S> diff = sub(v_pred, v_hat);
    Tensor<S> cfm = mul_scalar(total_sum(mul(row_sum(mul(diff, diff)), mask)), inv_m);

    Tensor<S> dot = row_sum(mul(v_pred, v_hat));
    Tensor<S> np = sqrt_t(add_scalar(row_sum(mul(v_pred, v_pred)), eps));
    Tensor<S> nh = sqrt_t(add_scalar(row_sum(mul(v_hat, v_hat)), eps));
    Tensor<S> cosine = mul(dot, reciprocal(mul(np, nh)));
    Tensor<S> one_minus = add_scalar(mul_scalar(cosine, S(-1)), S(1));
    Tensor<S> dir = mul_scalar(total_sum(mul(one_minus, mask)), inv_m);
    return {cfm, dir};
}

// Full objective over a batch of independent items: per-item losses averaged
// with equal weight. Returns the differentiable total plus plain numbers.
template <typename S>
std::pair<Tensor<S>, LossBreakdown> compute_losses(ArchiTtsModel<S>& model,
                                                   const std::vector<TrainItem<S>>& batch,
                                                   double eta = 0.1) {
    if (batch.empty()) throw ValidationError("compute_losses: empty batch");
    Tensor<S> cfm_sum, dir_sum, ctc_sum, vq_sum;
    const bool vq = model.config().vq_enabled;
    for (const auto& item : batch) {
        const int64_t t_frames = item.x1.dim(0);
        if (item.masked_frames < 1)
            throw ValidationError("compute_losses: item with no masked frames (mask floor violated)");
        // Mask invariants: contiguity and the 70% floor.
        int64_t count = 0, first = -1, last = -1;
        for (int64_t i = 0; i < t_frames; ++i) {
            if (item.mask.data()[i] != S(0)) {
                ++count;
                if (first < 0) first = i;
                last = i;
            }
        }
        if (count != item.masked_frames || last - first + 1 != count)
            throw ValidationError("compute_losses: mask must be one contiguous run");
        if (static_cast<double>(count) < 0.7 * static_cast<double>(t_frames) - 1e-9)
            throw ValidationError("compute_losses: masked fraction below the 0.7 floor");

        auto aligned = model.semantics(item.tokens, t_frames);
        auto [x_t, v_hat] = interpolate(item.x0, item.x1, item.t);
        auto state = model.encoder().encode(x_t, item.t, item.x_ref, aligned.z, item.speaker,
                                            item.flags);
        Tensor<S> v_pred = model.decoder().decode_velocity(x_t, item.t, state.h);
        auto flow = masked_flow_losses(v_pred, v_hat, item.mask, item.masked_frames);

        std::vector<int64_t> target(item.tokens.size());
        for (size_t i = 0; i < target.size(); ++i) target[i] = item.tokens[i] + 1;
        Tensor<S> ctc = mul_scalar(ctc_loss(model.encoder().ctc_logits(state.phi), target),
                                   S(1) / static_cast<S>(target.size()));

        cfm_sum = cfm_sum.defined() ? add(cfm_sum, flow.cfm) : flow.cfm;
        dir_sum = dir_sum.defined() ? add(dir_sum, flow.dir) : flow.dir;
        ctc_sum = ctc_sum.defined() ? add(ctc_sum, ctc) : ctc;
        if (vq) vq_sum = vq_sum.defined() ? add(vq_sum, aligned.vq_loss) : aligned.vq_loss;
    }
    const S inv_b = S(1) / static_cast<S>(batch.size());
    Tensor<S> cfm = mul_scalar(cfm_sum, inv_b);
    Tensor<S> dir = mul_scalar(dir_sum, inv_b);
    Tensor<S> ctc = mul_scalar(ctc_sum, inv_b);
    Tensor<S> total = add(add(cfm, dir), mul_scalar(ctc, static_cast<S>(eta)));
    LossBreakdown bd;
    bd.eta = eta;
    bd.cfm = static_cast<double>(cfm.item());
    bd.dir = static_cast<double>(dir.item());
    bd.ctc = static_cast<double>(ctc.item());
    if (vq) {
        Tensor<S> vq_mean = mul_scalar(vq_sum, inv_b);
        total = add(total, vq_mean);
        bd.vq = static_cast<double>(vq_mean.item());
    }
    bd.total = static_cast<double>(total.item());
    return {total, bd};
}

// Linear warmup to the peak, then linear decay to zero at total_steps.
inline double lr_schedule(int64_t step, double peak, int64_t warmup_steps, int64_t total_steps) {
    if (step < 1) throw ValidationError("lr_schedule: step must be >= 1");
    if (warmup_steps < 1 || total_steps <= warmup_steps)
        throw ValidationError("lr_schedule: need 1 <= warmup < total");
    if (step <= warmup_steps)
        return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return 0.0;
    return peak * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warmup_steps);
}

// Decoupled weight decay on matrices only; biases, gains, and single
// embedding vectors are exempt.
template <typename S>
class AdamW {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;
    static constexpr double kWeightDecay = 0.01;

    explicit AdamW(ParamStore<S>& store) : store_(&store) {
        for (const auto& [name, t] : store.params()) {
            m_.emplace_back(t.numel(), S(0));
            v_.emplace_back(t.numel(), S(0));
        }
    }

    // Returns the pre-clip global gradient norm.
    double step(double lr, double clip_norm) {
        auto& params = store_->params();
        double norm2 = 0;
        for (const auto& [name, t] : params) {
            if (!t.has_grad()) continue;
            for (S g : t.grad()) norm2 += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(norm2);
        if (!std::isfinite(norm)) throw NumericError("adamw: non-finite gradient norm");
        const double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;
        ++t_;
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor<S> tensor = params[i].second;  // shared handle, mutates in place
            if (!tensor.has_grad()) continue;
            const bool decay = tensor.rank() >= 2;
            auto& data = tensor.data();
            const auto& grad = tensor.grad();
            for (size_t j = 0; j < data.size(); ++j) {
                const double g = static_cast<double>(grad[j]) * scale;
                m_[i][j] = static_cast<S>(kBeta1 * m_[i][j] + (1.0 - kBeta1) * g);
                v_[i][j] = static_cast<S>(kBeta2 * v_[i][j] + (1.0 - kBeta2) * g * g);
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                double upd = mhat / (std::sqrt(vhat) + kEps);
                if (decay) upd += kWeightDecay * static_cast<double>(data[j]);
                data[j] = static_cast<S>(data[j] - lr * upd);
            }
        }
        return norm;
    }

    int64_t steps_taken() const { return t_; }
    std::vector<std::vector<S>>& first_moments() { return m_; }
    std::vector<std::vector<S>>& second_moments() { return v_; }
    void set_steps_taken(int64_t t) { t_ = t; }

private:
    ParamStore<S>* store_;
    std::vector<std::vector<S>> m_;
    std::vector<std::vector<S>> v_;
    int64_t t_ = 0;
};

// Exponential moving average of all parameters, used for sampling.
template <typename S>
class EmaWeights {
public:
    EmaWeights(const ParamStore<S>& store, double decay) : decay_(decay) {
        for (const auto& [name, t] : store.params()) shadow_.push_back(t.data());
    }

    void update(const ParamStore<S>& store) {
        const auto& params = store.params();
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& data = params[i].second.data();
            for (size_t j = 0; j < data.size(); ++j)
                shadow_[i][j] = static_cast<S>(decay_ * shadow_[i][j] + (1.0 - decay_) * data[j]);
        }
    }

    // Writes the averaged weights into a parameter store of identical layout.
    void copy_to(ParamStore<S>& store) const {
        const auto& params = store.params();
        if (params.size() != shadow_.size()) throw ValidationError("ema: parameter layout mismatch");
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor<S> t = params[i].second;  // shared handle, mutates in place
            if (t.data().size() != shadow_[i].size())
                throw ValidationError("ema: size mismatch at " + params[i].first);
            t.data() = shadow_[i];
        }
    }

    double decay() const { return decay_; }
    std::vector<std::vector<S>>& shadow() { return shadow_; }
    const std::vector<std::vector<S>>& shadow() const { return shadow_; }

private:
    double decay_;
    std::vector<std::vector<S>> shadow_;
};

struct TrainConfig {
    int64_t batch_size = 8;
    int64_t total_steps = 12000;
    int64_t warmup_steps = 1000;
    double peak_lr = 1e-4;
    double clip_norm = 1.0;
    double ema_decay = 0.999;
    double eta = 0.1;
    double p_drop_all = 0.2;
    double p_drop_joint = 0.3;
    double mask_min = 0.7;
    double mask_max = 1.0;
    int64_t log_interval = 50;

    void validate() const {
        if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
        if (total_steps < 2 || warmup_steps < 1 || warmup_steps >= total_steps)
            throw ValidationError("train config: need 1 <= warmup_steps < total_steps");
        if (peak_lr <= 0) throw ValidationError("train config: peak_lr must be > 0");
        if (clip_norm <= 0) throw ValidationError("train config: clip_norm must be > 0");
        if (ema_decay < 0 || ema_decay >= 1)
            throw ValidationError("train config: ema_decay must lie in [0, 1)");
        if (eta < 0) throw ValidationError("train config: eta must be >= 0");
        if (p_drop_all < 0 || p_drop_all > 1 || p_drop_joint < 0 || p_drop_joint > 1)
            throw ValidationError("train config: dropout probabilities must lie in [0, 1]");
        if (!(mask_min > 0.0) || mask_min > mask_max || mask_max > 1.0)
            throw ValidationError("train config: mask fractions must satisfy 0 < min <= max <= 1");
        if (log_interval < 1) throw ValidationError("train config: log_interval must be >= 1");
    }
};

// One training step's public record.
struct StepRecord {
    int64_t step = 0;
    double lr = 0;
    LossBreakdown losses;
    double grad_norm = 0;
};

template <typename S>
class Trainer {
public:
    Trainer(ArchiTtsModel<S>& model, const LatentCodec& codec, const Corpus& corpus,
            const TrainConfig& cfg, uint64_t seed)
        : model_(&model),
          codec_(&codec),
          corpus_(&corpus),
          cfg_(cfg),
          seed_(seed),
          root_(seed),
          opt_(model.store()),
          ema_(model.store(), cfg.ema_decay) {
        cfg_.validate();
        if (corpus.utterances.empty()) throw ValidationError("trainer: empty corpus");
    }

    // Deterministic batch for a step index; usable independently of run().
    std::vector<TrainItem<S>> make_batch(int64_t step) {
        std::vector<TrainItem<S>> batch;
        batch.reserve(cfg_.batch_size);
        auto pick = root_.stream("batch-pick", static_cast<uint64_t>(step));
        for (int64_t b = 0; b < cfg_.batch_size; ++b) {
            const auto& utt = corpus_->utterances[pick.uniform_int(corpus_->utterances.size())];
            batch.push_back(make_item(utt, step, b));
        }
        return batch;
    }

    TrainItem<S> make_item(const Utterance& utt, int64_t step, int64_t slot) {
        const int64_t d = codec_->config().latent_dim;
        const int64_t t_frames = utt.frame_count(d);
        TrainItem<S> item;
        item.tokens = utt.tokens;
        std::vector<S> x1(utt.frames.begin(), utt.frames.end());
        item.x1 = Tensor<S>::from_data({t_frames, d}, std::move(x1));

        auto noise = root_.stream("x0", static_cast<uint64_t>(step), static_cast<uint64_t>(slot));
        item.x0 = Tensor<S>::randn({t_frames, d}, noise);

        auto trng = root_.stream("t", static_cast<uint64_t>(step), static_cast<uint64_t>(slot));
        item.t = sample_timestep(trng);

        auto mrng = root_.stream("mask", static_cast<uint64_t>(step), static_cast<uint64_t>(slot));
        auto mask = sample_mask(t_frames, mrng, cfg_.mask_min, cfg_.mask_max);
        std::vector<S> mask_vals(t_frames), ref_vals(t_frames * d);
        item.masked_frames = 0;
        for (int64_t i = 0; i < t_frames; ++i) {
            mask_vals[i] = mask[i] ? S(1) : S(0);
            item.masked_frames += mask[i] ? 1 : 0;
            for (int64_t j = 0; j < d; ++j)
                ref_vals[i * d + j] = mask[i] ? S(0) : item.x1.data()[i * d + j];
        }
        item.mask = Tensor<S>::from_data({t_frames}, std::move(mask_vals));
        item.x_ref = Tensor<S>::from_data({t_frames, d}, std::move(ref_vals));

        auto spk = codec_->estimate_speaker(utt.frames);
        std::vector<S> spk_vals(spk.begin(), spk.end());
        item.speaker = Tensor<S>::from_data({codec_->config().speaker_dim}, std::move(spk_vals));

        auto drng = root_.stream("dropout", static_cast<uint64_t>(step), static_cast<uint64_t>(slot));
        item.flags = sample_condition_dropout(drng, cfg_.p_drop_all, cfg_.p_drop_joint);
        return item;
    }

    StepRecord train_step(int64_t step) {
        if (step < 1) throw ValidationError("train_step: step must be >= 1");
        auto batch = make_batch(step);
        model_->store().zero_grads();
        auto [total, breakdown] = compute_losses(*model_, batch, cfg_.eta);
        if (!std::isfinite(breakdown.total))
            throw NumericError("train_step: non-finite loss at step " + std::to_string(step) +
                               " (rerun batch with stream tags x0/t/mask/dropout at this step)");
        backward(total);
        StepRecord rec;
        rec.step = step;
        rec.lr = lr_schedule(step, cfg_.peak_lr, cfg_.warmup_steps, cfg_.total_steps);
        rec.losses = breakdown;
        rec.grad_norm = opt_.step(rec.lr, cfg_.clip_norm);
        ema_.update(model_->store());
        return rec;
    }

    const TrainConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }
    AdamW<S>& optimizer() { return opt_; }
    EmaWeights<S>& ema() { return ema_; }
    ArchiTtsModel<S>& model() { return *model_; }

private:
    ArchiTtsModel<S>* model_;
    const LatentCodec* codec_;
    const Corpus* corpus_;
    TrainConfig cfg_;
    uint64_t seed_ = 0;
    RootRng root_;
    AdamW<S> opt_;
    EmaWeights<S> ema_;
};

}  // namespace architts
