#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "architts/model.hpp"
#include "architts/sampler.hpp"

using namespace architts;

namespace {

CodecConfig tiny_codec_config() {
    CodecConfig c;
    c.vocab_size = 5;
    c.latent_dim = 6;
    c.speaker_dim = 2;
    c.frames_min = 2;
    c.frames_max = 3;
    c.speaker_count = 3;
    c.noise_scale = 0.2;
    c.seed = 11;
    return c;
}

ModelConfig tiny_model_config() {
    ModelConfig m;
    m.vocab_size = 5;
    m.latent_dim = 6;
    m.speaker_dim = 2;
    m.model_dim = 16;
    m.head_count = 2;
    m.convnext_blocks = 1;
    m.aligner_blocks = 2;
    m.encoder_blocks = 2;
    m.decoder_blocks = 1;
    return m;
}

template <typename S>
bool bit_equal(const std::vector<S>& a, const std::vector<S>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (std::memcmp(&a[i], &b[i], sizeof(S)) != 0) return false;
    return true;
}

// Zero-initialized modulation gates the conditioning path on a fresh model;
// random values make sampler trajectories nontrivial.
template <typename S>
void randomize_zero_init_weights(ArchiTtsModel<S>& model, uint64_t seed) {
    RootRng root(seed);
    for (const auto& [name, t] : model.store().params()) {
        const bool zero_init = name.size() > 6 && (name.rfind("mod.w") == name.size() - 5 ||
                                                   name == "decoder.out_proj.w");
        if (!zero_init) continue;
        Tensor<S> handle = t;
        auto rng = root.stream(name);
        for (auto& x : handle.data()) x = static_cast<S>(0.05 * rng.normal());
    }
}

template <typename S>
Tensor<S> unit_speaker(uint64_t seed, int64_t dim) {
    RngStream rng(seed);
    std::vector<S> v(dim);
    double norm2 = 0;
    for (auto& x : v) {
        x = static_cast<S>(rng.normal());
        norm2 += static_cast<double>(x) * static_cast<double>(x);
    }
    for (auto& x : v) x = static_cast<S>(x / std::sqrt(norm2));
    return Tensor<S>::from_data({dim}, std::move(v));
}

// Counts calls and keeps the state still (zero velocity).
template <typename S>
struct CountingField : ConditionProvider<S> {
    int64_t encodes = 0;
    int64_t velocities = 0;
    Tensor<S> encode(const Tensor<S>&, double, bool) override {
        ++encodes;
        return Tensor<S>::zeros({1});
    }
    Tensor<S> velocity(const Tensor<S>& x, double, const Tensor<S>&, bool) override {
        ++velocities;
        return Tensor<S>::zeros(x.shape());
    }
};

// dx/dt = x, whose exact solution at t=1 is e * x0.
template <typename S>
struct LinearField : ConditionProvider<S> {
    Tensor<S> encode(const Tensor<S>&, double, bool) override { return Tensor<S>::zeros({1}); }
    Tensor<S> velocity(const Tensor<S>& x, double, const Tensor<S>&, bool) override { return x; }
};

template <typename S>
struct ExplodingField : ConditionProvider<S> {
    Tensor<S> encode(const Tensor<S>&, double, bool) override { return Tensor<S>::zeros({1}); }
    Tensor<S> velocity(const Tensor<S>& x, double, const Tensor<S>&, bool) override {
        return Tensor<S>::filled(x.shape(), std::numeric_limits<S>::infinity());
    }
};

}  // namespace

TEST_CASE("duration estimation preserves the token-per-frame rate") {
    CHECK(estimate_duration(100, 50, 25).d == 50);
    CHECK(estimate_duration(10, 3, 3).d == 10);
    CHECK(estimate_duration(7, 3, 5).d == 11);  // floor(35 / 3)
    CHECK(estimate_duration(1, 1, 1).d == 1);
    CHECK_THROWS_AS(estimate_duration(0, 3, 5), ValidationError);
    CHECK_THROWS_AS(estimate_duration(7, 0, 5), ValidationError);
    CHECK_THROWS_AS(estimate_duration(7, 3, 0), ValidationError);
}

TEST_CASE("duration estimation is exact integer arithmetic") {
    // Values chosen so double rounding of l_gen * (t_ref / l_ref) would err.
    const int64_t t_ref = 1000003, l_ref = 3, l_gen = 3;
    CHECK(estimate_duration(t_ref, l_ref, l_gen).d == 1000003);
    CHECK(estimate_duration(999999, 7, 5).d == (999999LL * 5) / 7);
}

TEST_CASE("a unit timeshift leaves the grid uniform") {
    const int64_t n = 16;
    auto t = build_schedule(n, 1.0);
    REQUIRE(t.size() == static_cast<size_t>(n + 1));
    for (int64_t i = 0; i <= n; ++i)
        CHECK(t[i] == static_cast<double>(i) / static_cast<double>(n));
}

TEST_CASE("the timeshift warp hits its pinned value") {
    auto t = build_schedule(2, 3.0);
    CHECK(t[0] == 0.0);
    CHECK(t[1] == 0.75);  // 3 * 0.5 / (1 + 2 * 0.5)
    CHECK(t[2] == 1.0);

    auto t4 = build_schedule(4, 3.0);
    CHECK(t4[3] == Catch::Approx(0.9));  // 3 * 0.75 / 2.5
}

TEST_CASE("schedules are strictly increasing with exact endpoints") {
    for (double s : {0.3, 0.7, 1.0, 2.0, 3.0, 10.0}) {
        for (int64_t n : {1, 2, 5, 32, 100}) {
            auto t = build_schedule(n, s);
            INFO("s=" << s << " n=" << n);
            CHECK(t.front() == 0.0);
            CHECK(t.back() == 1.0);
            for (size_t i = 1; i < t.size(); ++i) REQUIRE(t[i] > t[i - 1]);
        }
    }
    CHECK_THROWS_AS(build_schedule(0, 3.0), ValidationError);
    CHECK_THROWS_AS(build_schedule(8, 0.0), ValidationError);
    CHECK_THROWS_AS(build_schedule(8, -1.0), ValidationError);
}

TEST_CASE("larger timeshift concentrates steps near zero") {
    auto flat = build_schedule(10, 1.0);
    auto shifted = build_schedule(10, 3.0);
    for (size_t i = 1; i < flat.size() - 1; ++i) CHECK(shifted[i] > flat[i]);
    // Early times are pushed up, so early intervals cover more of [0, 1]:
    // equivalently more of the step budget lands at small t.
    CHECK(shifted[5] == 0.75);
}

TEST_CASE("guidance at zero strength is the conditional branch exactly") {
    RngStream rng(7);
    auto v_cond = Tensor<float>::randn({5, 4}, rng);
    auto v_uncond = Tensor<float>::randn({5, 4}, rng);
    auto v = cfg_velocity(v_cond, v_uncond, 0.0);
    CHECK(bit_equal(v.data(), v_cond.data()));
}

TEST_CASE("guidance collapses when both branches agree") {
    RngStream rng(8);
    auto v_cond = Tensor<float>::randn({5, 4}, rng);
    for (double omega : {0.5, 1.0, 4.0, 10.0}) {
        auto v = cfg_velocity(v_cond, v_cond, omega);
        for (int64_t i = 0; i < v.numel(); ++i)
            CHECK(v.data()[i] == Catch::Approx(v_cond.data()[i]).margin(1e-5));
    }
}

TEST_CASE("guidance extrapolates past the unconditional branch") {
    auto v_cond = Tensor<float>::filled({1}, 2.0f);
    auto v_uncond = Tensor<float>::filled({1}, 1.0f);
    auto v = cfg_velocity(v_cond, v_uncond, 4.0);
    CHECK(v.data()[0] == 6.0f);  // 5*2 - 4*1

    auto bad = Tensor<float>::filled({2}, 1.0f);
    CHECK_THROWS_AS(cfg_velocity(v_cond, bad, 1.0), ValidationError);
    CHECK_THROWS_AS(cfg_velocity(v_cond, v_uncond, -0.5), ValidationError);
}

TEST_CASE("recompute steps are evenly spaced and start at zero") {
    CHECK(plan_sharing(32, 8) == std::vector<int64_t>{0, 4, 8, 12, 16, 20, 24, 28});
    CHECK(plan_sharing(4, 4) == std::vector<int64_t>{0, 1, 2, 3});
    CHECK(plan_sharing(32, 1) == std::vector<int64_t>{0});
    CHECK_THROWS_AS(plan_sharing(8, 0), ValidationError);
    CHECK_THROWS_AS(plan_sharing(8, 9), ValidationError);

    RngStream rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const int64_t n = 1 + static_cast<int64_t>(rng.uniform_int(64));
        const int64_t k = 1 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n)));
        auto steps = plan_sharing(n, k);
        INFO("n=" << n << " k=" << k);
        REQUIRE(steps.size() == static_cast<size_t>(k));
        REQUIRE(steps.front() == 0);
        for (size_t i = 1; i < steps.size(); ++i) REQUIRE(steps[i] > steps[i - 1]);
        REQUIRE(steps.back() < n);
    }
}

TEST_CASE("encoder and decoder forward counts follow the sharing plan") {
    for (auto [n, k] : std::vector<std::pair<int64_t, int64_t>>{
             {32, 8}, {32, 32}, {32, 1}, {7, 3}, {1, 1}, {16, 5}}) {
        CountingField<float> field;
        SamplerPlan plan;
        plan.nfe = n;
        plan.recompute = k;
        plan.cfg_strength = 0.0;
        auto res = sample(field, 4, 3, plan);
        INFO("n=" << n << " k=" << k);
        CHECK(res.encoder_evals == 2 * k);
        CHECK(res.decoder_evals == 2 * n);
        CHECK(field.encodes == 2 * k);
        CHECK(field.velocities == 2 * n);
    }
}

TEST_CASE("full recompute matches a cache-free reference loop bit for bit") {
    ArchiTtsModel<float> model(tiny_model_config(), 81);
    randomize_zero_init_weights(model, 0xabcddcba);
    RngStream rng(10);
    const int64_t t_frames = 5, d_lat = 6;
    auto x_ref = Tensor<float>::randn({t_frames, d_lat}, rng);
    auto z = Tensor<float>::randn({t_frames, 16}, rng);
    auto speaker = unit_speaker<float>(11, 2);

    SamplerPlan plan;
    plan.nfe = 6;
    plan.recompute = 6;
    plan.cfg_strength = 2.0;
    plan.seed = 77;

    ModelConditionProvider<float> provider(model, x_ref, z, speaker, UncondMode::kAllNull);
    auto res = sample(provider, t_frames, d_lat, plan);

    // Reference: no cache, both branches recomputed inline every step.
    NoGradGuard ng;
    auto schedule = build_schedule(plan.nfe, plan.timeshift);
    RootRng root(plan.seed);
    auto noise = root.stream("sample-noise");
    Tensor<float> x = Tensor<float>::randn({t_frames, d_lat}, noise);
    ModelConditionProvider<float> ref_provider(model, x_ref, z, speaker, UncondMode::kAllNull);
    for (int64_t i = 0; i < plan.nfe; ++i) {
        const double t = schedule[i];
        auto h_c = ref_provider.encode(x, t, true);
        auto h_u = ref_provider.encode(x, t, false);
        auto v = cfg_velocity(ref_provider.velocity(x, t, h_c, true),
                              ref_provider.velocity(x, t, h_u, false), plan.cfg_strength);
        x = add(x, mul_scalar(v, static_cast<float>(schedule[i + 1] - schedule[i])));
    }
    CHECK(bit_equal(res.latents.data(), x.data()));
}

TEST_CASE("euler integration converges to the analytic linear flow") {
    LinearField<double> field;
    const double e1 = std::exp(1.0);
    std::vector<double> errors;
    for (int64_t n : {16, 32, 64}) {
        SamplerPlan plan;
        plan.nfe = n;
        plan.recompute = n;
        plan.cfg_strength = 0.0;
        plan.timeshift = 1.0;
        plan.seed = 5;
        auto res = sample(field, 6, 4, plan);
        double worst = 0;
        for (int64_t i = 0; i < res.latents.numel(); ++i) {
            const double expect = e1 * res.initial.data()[i];
            worst = std::max(worst, std::abs(res.latents.data()[i] - expect) / std::abs(expect));
        }
        INFO("n=" << n << " relative error " << worst);
        errors.push_back(worst);
    }
    CHECK(errors[2] < 0.02);
    CHECK(errors[0] / errors[1] > 1.7);
    CHECK(errors[0] / errors[1] < 2.3);
    CHECK(errors[1] / errors[2] > 1.7);
    CHECK(errors[1] / errors[2] < 2.3);
}

TEST_CASE("sampling is deterministic in the plan and seed") {
    ArchiTtsModel<float> model(tiny_model_config(), 82);
    randomize_zero_init_weights(model, 0x5ca1ab1e);
    RngStream rng(12);
    auto x_ref = Tensor<float>::randn({4, 6}, rng);
    auto z = Tensor<float>::randn({4, 16}, rng);
    auto speaker = unit_speaker<float>(13, 2);

    SamplerPlan plan;
    plan.nfe = 5;
    plan.recompute = 2;
    plan.seed = 99;

    ModelConditionProvider<float> provider(model, x_ref, z, speaker, UncondMode::kAllNull);
    auto a = sample(provider, 4, 6, plan);
    auto b = sample(provider, 4, 6, plan);
    CHECK(bit_equal(a.latents.data(), b.latents.data()));
    CHECK(bit_equal(a.initial.data(), b.initial.data()));

    plan.seed = 100;
    auto c = sample(provider, 4, 6, plan);
    CHECK_FALSE(bit_equal(a.latents.data(), c.latents.data()));
}

TEST_CASE("the unconditional branch mode changes the trajectory") {
    ArchiTtsModel<float> model(tiny_model_config(), 83);
    randomize_zero_init_weights(model, 0xdecafbad);
    RngStream rng(14);
    auto x_ref = Tensor<float>::randn({4, 6}, rng);
    auto z = Tensor<float>::randn({4, 16}, rng);
    auto speaker = unit_speaker<float>(15, 2);

    SamplerPlan plan;
    plan.nfe = 4;
    plan.cfg_strength = 2.0;
    plan.seed = 21;

    ModelConditionProvider<float> all_null(model, x_ref, z, speaker, UncondMode::kAllNull);
    ModelConditionProvider<float> joint(model, x_ref, z, speaker, UncondMode::kPromptSpeakerNull);
    auto a = sample(all_null, 4, 6, plan);
    auto b = sample(joint, 4, 6, plan);
    CHECK_FALSE(bit_equal(a.latents.data(), b.latents.data()));
}

TEST_CASE("non-finite trajectories abort with the failing step") {
    ExplodingField<float> field;
    SamplerPlan plan;
    plan.nfe = 4;
    plan.cfg_strength = 0.0;
    CHECK_THROWS_AS(sample(field, 3, 2, plan), NumericError);
    try {
        sample(field, 3, 2, plan);
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
}

TEST_CASE("sampling validates its arguments") {
    CountingField<float> field;
    SamplerPlan plan;
    CHECK_THROWS_AS(sample(field, 0, 3, plan), ValidationError);
    CHECK_THROWS_AS(sample(field, 3, 0, plan), ValidationError);
    plan.nfe = 0;
    CHECK_THROWS_AS(sample(field, 3, 3, plan), ValidationError);
    plan.nfe = 8;
    plan.recompute = 9;
    CHECK_THROWS_AS(sample(field, 3, 3, plan), ValidationError);
    plan.recompute = 0;
    plan.timeshift = 0.0;
    CHECK_THROWS_AS(sample(field, 3, 3, plan), ValidationError);
}

TEST_CASE("matching transcriptions reproduce the reference duration") {
    LatentCodec codec(tiny_codec_config());
    ArchiTtsModel<float> model(tiny_model_config(), 84);
    RngStream rng(16);
    auto ref_latents = Tensor<float>::randn({6, 6}, rng);
    auto speaker = unit_speaker<float>(17, 2);
    std::vector<int64_t> tokens = {1, 2, 3};

    SamplerPlan plan;
    plan.nfe = 3;
    plan.seed = 31;
    auto out = zero_shot_synthesize(model, codec, ref_latents, tokens, tokens, speaker, plan);
    CHECK(out.duration.d == 6);
    CHECK(out.total_frames == 12);
    CHECK(out.latents.dim(0) == 6);
    CHECK(out.latents.dim(1) == 6);
}

TEST_CASE("the generated slice always has the estimated length") {
    LatentCodec codec(tiny_codec_config());
    ArchiTtsModel<float> model(tiny_model_config(), 84);
    RngStream rng(18);
    auto ref_latents = Tensor<float>::randn({7, 6}, rng);
    auto speaker = unit_speaker<float>(19, 2);

    SamplerPlan plan;
    plan.nfe = 2;
    plan.seed = 32;
    auto out = zero_shot_synthesize(model, codec, ref_latents, {1, 2}, {0, 1, 2, 3, 4}, speaker,
                                    plan);
    CHECK(out.duration.d == (5 * 7) / 2);
    CHECK(out.latents.dim(0) == out.duration.d);
    CHECK(out.encoder_evals == 2 * plan.nfe);
    CHECK(out.decoder_evals == 2 * plan.nfe);
    // Decoded tokens exist and stay within the vocabulary.
    for (int64_t tok : out.decoded_tokens) {
        CHECK(tok >= 0);
        CHECK(tok < 5);
    }
}

TEST_CASE("synthesis rejects malformed inputs") {
    LatentCodec codec(tiny_codec_config());
    ArchiTtsModel<float> model(tiny_model_config(), 84);
    RngStream rng(20);
    auto ref_latents = Tensor<float>::randn({6, 6}, rng);
    auto speaker = unit_speaker<float>(21, 2);
    SamplerPlan plan;
    plan.nfe = 2;

    CHECK_THROWS_AS(zero_shot_synthesize(model, codec, ref_latents, {}, {1}, speaker, plan),
                    ValidationError);
    CHECK_THROWS_AS(zero_shot_synthesize(model, codec, ref_latents, {1}, {}, speaker, plan),
                    ValidationError);
    auto bad_latents = Tensor<float>::randn({6, 5}, rng);
    CHECK_THROWS_AS(zero_shot_synthesize(model, codec, bad_latents, {1}, {1}, speaker, plan),
                    ShapeError);
}

TEST_CASE("the synthesis report carries the plan and the counters") {
    SamplerPlan plan;
    plan.nfe = 32;
    plan.recompute = 8;
    plan.seed = 4;
    SynthesisResult result;
    result.duration = estimate_duration(10, 2, 4);
    result.total_frames = 30;
    result.encoder_evals = 16;
    result.decoder_evals = 64;
    result.decoded_tokens = {1, 2};

    auto j = synthesis_report(plan, result, 1.25);
    CHECK(j["nfe"] == 32);
    CHECK(j["recompute"] == 8);
    CHECK(j["sharing_ratio"] == Catch::Approx(0.75));
    CHECK(j["cfg_strength"] == Catch::Approx(4.0));
    CHECK(j["timeshift"] == Catch::Approx(3.0));
    CHECK(j["uncond_mode"] == "all_null");
    CHECK(j["duration_frames"] == 20);
    CHECK(j["encoder_evals"] == 16);
    CHECK(j["decoder_evals"] == 64);
    CHECK(j["wall_time"] == Catch::Approx(1.25));
    CHECK(j["token_error_rate"].is_null());

    auto with_ter = synthesis_report(plan, result, 1.25, 0.03);
    CHECK(with_ter["token_error_rate"] == Catch::Approx(0.03));
}

TEST_CASE("plan defaults and derived quantities") {
    SamplerPlan plan;
    CHECK(plan.nfe == 32);
    CHECK(plan.cfg_strength == 4.0);
    CHECK(plan.timeshift == 3.0);
    CHECK(plan.resolved_k() == 32);
    CHECK(plan.sharing_ratio() == 0.0);
    plan.recompute = 8;
    CHECK(plan.sharing_ratio() == Catch::Approx(0.75));
}
