#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "architts/codec.hpp"
#include "architts/errors.hpp"
#include "architts/model.hpp"
#include "architts/rng.hpp"
#include "architts/tensor.hpp"

// Zero-shot inference: duration estimation at the reference token-per-frame
// rate, a timeshifted Euler schedule, classifier-free guidance, and encoder
// output sharing across adjacent steps. The decoder runs at every step; the
// condition encoder only at the K recompute steps, so its cost scales with
// K/N while the integration stays at N steps.

namespace architts {

// Which conditions the guidance's unconditional branch nulls out. The
// default mirrors the training-time all-drop event; the alternative mirrors
// the joint prompt+speaker drop (semantic tokens stay conditioned).
enum class UncondMode { kAllNull, kPromptSpeakerNull };

inline std::string uncond_mode_name(UncondMode m) {
    return m == UncondMode::kAllNull ? "all_null" : "prompt_speaker_null";
}

inline UncondMode uncond_mode_from_name(const std::string& name) {
    if (name == "all_null") return UncondMode::kAllNull;
    if (name == "prompt_speaker_null") return UncondMode::kPromptSpeakerNull;
    throw ConfigError("unknown uncond_mode: " + name +
                      " (expected all_null or prompt_speaker_null)");
}

struct SamplerPlan {
    int64_t nfe = 32;
    int64_t recompute = 0;  // encoder recompute steps K; 0 means every step
    double cfg_strength = 4.0;
    double timeshift = 3.0;
    uint64_t seed = 1;
    UncondMode uncond_mode = UncondMode::kAllNull;

    int64_t resolved_k() const { return recompute == 0 ? nfe : recompute; }
    double sharing_ratio() const {
        return 1.0 - static_cast<double>(resolved_k()) / static_cast<double>(nfe);
    }

    void validate() const {
        if (nfe < 1) throw ValidationError("sampler plan: nfe must be >= 1");
        if (recompute < 0 || recompute > nfe)
            throw ValidationError("sampler plan: recompute must lie in [0, nfe]");
        if (cfg_strength < 0) throw ValidationError("sampler plan: cfg_strength must be >= 0");
        if (!(timeshift > 0)) throw ValidationError("sampler plan: timeshift must be > 0");
    }
};

struct DurationEstimate {
    int64_t d = 0;
    int64_t t_ref = 0;
    int64_t l_ref = 0;
    int64_t l_gen = 0;
};

// d = floor(l_gen * t_ref / l_ref), in exact integer arithmetic.
inline DurationEstimate estimate_duration(int64_t t_ref, int64_t l_ref, int64_t l_gen) {
    if (t_ref < 1 || l_ref < 1 || l_gen < 1)
        throw ValidationError("estimate_duration: all inputs must be >= 1");
    DurationEstimate e;
    e.t_ref = t_ref;
    e.l_ref = l_ref;
    e.l_gen = l_gen;
    e.d = (l_gen * t_ref) / l_ref;
    return e;
}

// Uniform grid u = i/N warped by t = s*u / (1 + (s-1)*u). Monotone and
// endpoint-fixing; s > 1 concentrates steps near t = 0. Endpoints are pinned
// so they are exact regardless of rounding in the warp.
inline std::vector<double> build_schedule(int64_t n, double timeshift) {
    if (n < 1) throw ValidationError("build_schedule: need at least one step");
    if (!(timeshift > 0)) throw ValidationError("build_schedule: timeshift must be > 0");
    std::vector<double> t(n + 1);
    t[0] = 0.0;
    t[n] = 1.0;
    for (int64_t i = 1; i < n; ++i) {
        const double u = static_cast<double>(i) / static_cast<double>(n);
        t[i] = timeshift * u / (1.0 + (timeshift - 1.0) * u);
    }
    for (int64_t i = 0; i < n; ++i)
        if (!(t[i + 1] > t[i])) throw NumericError("build_schedule: schedule not increasing");
    return t;
}

// Guidance extrapolation, computed in exactly this order so runs are
// reproducible: (1 + w) * v_cond - w * v_uncond.
template <typename S>
Tensor<S> cfg_velocity(const Tensor<S>& v_cond, const Tensor<S>& v_uncond, double omega) {
    if (v_cond.shape() != v_uncond.shape())
        throw ValidationError("cfg_velocity: branch shapes differ: " + shape_str(v_cond.shape()) +
                              " vs " + shape_str(v_uncond.shape()));
    if (omega < 0) throw ValidationError("cfg_velocity: strength must be >= 0");
    return sub(mul_scalar(v_cond, static_cast<S>(1.0 + omega)),
               mul_scalar(v_uncond, static_cast<S>(omega)));
}

// The K step indices at which the encoder recomputes, evenly spaced over
// [0, N) and always including step 0.
inline std::vector<int64_t> plan_sharing(int64_t n, int64_t k) {
    if (k < 1 || k > n) throw ValidationError("plan_sharing: need 1 <= k <= n");
    std::vector<int64_t> steps(k);
    for (int64_t j = 0; j < k; ++j) steps[j] = (j * n) / k;
    return steps;
}

// The sampling loop talks to the model through this seam, which is also how
// tests inject analytic velocity fields. One encode call is one encoder
// forward; one velocity call is one decoder forward.
template <typename S>
class ConditionProvider {
public:
    virtual ~ConditionProvider() = default;
    virtual Tensor<S> encode(const Tensor<S>& x, double t, bool conditional) = 0;
    virtual Tensor<S> velocity(const Tensor<S>& x, double t, const Tensor<S>& h,
                               bool conditional) = 0;
};

// Real model wiring: fixed conditions, per-branch null flags.
template <typename S>
class ModelConditionProvider : public ConditionProvider<S> {
public:
    ModelConditionProvider(ArchiTtsModel<S>& model, Tensor<S> x_ref, Tensor<S> z, Tensor<S> speaker,
                           UncondMode mode)
        : model_(&model),
          x_ref_(std::move(x_ref)),
          z_(std::move(z)),
          speaker_(std::move(speaker)),
          mode_(mode) {}

    Tensor<S> encode(const Tensor<S>& x, double t, bool conditional) override {
        NullFlags flags;
        if (!conditional)
            flags = mode_ == UncondMode::kAllNull ? NullFlags::all() : NullFlags::prompt_speaker();
        return model_->encoder().encode(x, t, x_ref_, z_, speaker_, flags).h;
    }

    Tensor<S> velocity(const Tensor<S>& x, double t, const Tensor<S>& h, bool) override {
        return model_->decoder().decode_velocity(x, t, h);
    }

private:
    ArchiTtsModel<S>* model_;
    Tensor<S> x_ref_;
    Tensor<S> z_;
    Tensor<S> speaker_;
    UncondMode mode_;
};

template <typename S>
struct SampleResult {
    Tensor<S> latents;
    Tensor<S> initial;  // the seeded noise the trajectory started from
    std::vector<double> schedule;
    std::vector<int64_t> recompute_steps;
    int64_t encoder_evals = 0;
    int64_t decoder_evals = 0;
};

// Euler integration from seeded noise at t=0 to data at t=1. Encoder
// contexts (both guidance branches) are recomputed only at the planned
// steps and reused in between, so encoder forwards total 2K and decoder
// forwards 2N.
template <typename S>
SampleResult<S> sample(ConditionProvider<S>& field, int64_t t_frames, int64_t latent_dim,
                       const SamplerPlan& plan) {
    plan.validate();
    if (t_frames < 1 || latent_dim < 1)
        throw ValidationError("sample: frame count and latent width must be >= 1");
    NoGradGuard no_grad;

    const int64_t n = plan.nfe;
    const int64_t k = plan.resolved_k();
    SampleResult<S> res;
    res.schedule = build_schedule(n, plan.timeshift);
    res.recompute_steps = plan_sharing(n, k);
    std::vector<bool> recompute(n, false);
    for (int64_t idx : res.recompute_steps) recompute[idx] = true;

    RootRng root(plan.seed);
    auto noise = root.stream("sample-noise");
    Tensor<S> x = Tensor<S>::randn({t_frames, latent_dim}, noise);
    res.initial = Tensor<S>::from_data(x.shape(), x.data());

    Tensor<S> h_cond, h_uncond;
    for (int64_t i = 0; i < n; ++i) {
        const double t = res.schedule[i];
        if (recompute[i]) {
            h_cond = field.encode(x, t, true);
            h_uncond = field.encode(x, t, false);
            res.encoder_evals += 2;
        }
        Tensor<S> v_cond = field.velocity(x, t, h_cond, true);
        Tensor<S> v_uncond = field.velocity(x, t, h_uncond, false);
        res.decoder_evals += 2;
        Tensor<S> v = cfg_velocity(v_cond, v_uncond, plan.cfg_strength);
        const double dt = res.schedule[i + 1] - res.schedule[i];
        x = add(x, mul_scalar(v, static_cast<S>(dt)));
        for (S val : x.data())
            if (!std::isfinite(static_cast<double>(val)))
                throw NumericError("sample: non-finite state after step " + std::to_string(i));
    }
    res.latents = x;
    return res;
}

struct SynthesisResult {
    Tensor<float> latents;  // generated-region slice, [d x latent_dim]
    std::vector<int64_t> decoded_tokens;
    DurationEstimate duration;
    int64_t total_frames = 0;
    int64_t encoder_evals = 0;
    int64_t decoder_evals = 0;
};

// Zero-shot synthesis: the reference and target transcriptions form one
// context, the reference latents occupy the prompt region, and the model
// infills the generated region, which is then sliced off and decoded.
inline SynthesisResult zero_shot_synthesize(ArchiTtsModel<float>& model, const LatentCodec& codec,
                                            const Tensor<float>& ref_latents,
                                            const std::vector<int64_t>& ref_tokens,
                                            const std::vector<int64_t>& gen_tokens,
                                            const Tensor<float>& speaker,
                                            const SamplerPlan& plan) {
    if (ref_tokens.empty() || gen_tokens.empty())
        throw ValidationError("synthesize: reference and target tokens must be non-empty");
    if (ref_latents.rank() != 2 || ref_latents.dim(1) != model.config().latent_dim)
        throw ShapeError("synthesize: reference latents must be [T x latent_dim]");
    const int64_t t_ref = ref_latents.dim(0);
    const int64_t d_lat = model.config().latent_dim;

    SynthesisResult out;
    out.duration = estimate_duration(t_ref, static_cast<int64_t>(ref_tokens.size()),
                                     static_cast<int64_t>(gen_tokens.size()));
    if (out.duration.d < 1)
        throw ValidationError("synthesize: estimated duration is zero frames");
    out.total_frames = t_ref + out.duration.d;

    NoGradGuard no_grad;
    std::vector<int64_t> all_tokens = ref_tokens;
    all_tokens.insert(all_tokens.end(), gen_tokens.begin(), gen_tokens.end());
    Tensor<float> z = model.semantics(all_tokens, out.total_frames).z;
    Tensor<float> x_ref =
        concat_rows<float>({ref_latents, Tensor<float>::zeros({out.duration.d, d_lat})});

    ModelConditionProvider<float> provider(model, x_ref, z, speaker, plan.uncond_mode);
    auto res = sample(provider, out.total_frames, d_lat, plan);
    out.encoder_evals = res.encoder_evals;
    out.decoder_evals = res.decoder_evals;
    out.latents = slice_rows(res.latents, t_ref, out.duration.d);
    out.decoded_tokens = codec.decode(out.latents.data());
    return out;
}

inline nlohmann::json synthesis_report(const SamplerPlan& plan, const SynthesisResult& result,
                                       double wall_time_s,
                                       std::optional<double> token_error_rate = std::nullopt) {
    nlohmann::json j;
    j["nfe"] = plan.nfe;
    j["recompute"] = plan.resolved_k();
    j["sharing_ratio"] = plan.sharing_ratio();
    j["cfg_strength"] = plan.cfg_strength;
    j["timeshift"] = plan.timeshift;
    j["seed"] = plan.seed;
    j["uncond_mode"] = uncond_mode_name(plan.uncond_mode);
    j["duration_frames"] = result.duration.d;
    j["total_frames"] = result.total_frames;
    j["encoder_evals"] = result.encoder_evals;
    j["decoder_evals"] = result.decoder_evals;
    j["decoded_tokens"] = result.decoded_tokens;
    j["wall_time"] = wall_time_s;
    if (token_error_rate)
        j["token_error_rate"] = *token_error_rate;
    else
        j["token_error_rate"] = nullptr;
    return j;
}

}  // namespace architts
