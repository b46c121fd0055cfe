// Command-line front end: corpus generation, training, zero-shot synthesis,
// sharing-ratio benchmarking, and a self-contained verification suite.
// Exit codes: 0 success, 1 verification or numeric failure, 2 usage error,
// 3 I/O error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "architts/checkpoint.hpp"
#include "architts/config.hpp"
#include "architts/ctc.hpp"
#include "architts/dataset.hpp"
#include "architts/errors.hpp"
#include "architts/eval.hpp"
#include "architts/grad_check.hpp"
#include "architts/model.hpp"
#include "architts/sampler.hpp"
#include "architts/training.hpp"

using namespace architts;

namespace {

// ---------------------------------------------------------------------------
// shared plumbing

std::vector<int64_t> parse_int_list(const std::string& text, const char* what) {
    std::vector<int64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            size_t used = 0;
            out.push_back(std::stoll(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ValidationError(std::string(what) + ": cannot parse integer \"" + item + "\"");
        }
    }
    if (out.empty()) throw ValidationError(std::string(what) + ": empty list");
    return out;
}

std::vector<double> parse_double_list(const std::string& text, const char* what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ValidationError(std::string(what) + ": cannot parse number \"" + item + "\"");
        }
    }
    if (out.empty()) throw ValidationError(std::string(what) + ": empty list");
    return out;
}

// Config file if given, then the report-directory environment override.
// CLI flags are applied by each command after this, so the precedence is
// flag > file > default.
RunConfig effective_config(const std::string& config_path) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (const char* dir = std::getenv("ARCHITTS_REPORT_DIR"); dir && *dir) cfg.paths.reports = dir;
    return cfg;
}

std::string dataset_file(const std::string& dir, const char* split) {
    return (std::filesystem::path(dir) / (std::string(split) + ".attsdata")).string();
}

std::string sidecar_file(const std::string& dir) {
    return (std::filesystem::path(dir) / "codec.json").string();
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    detail::write_file(path, j.dump(2) + "\n");
}

// Latents on disk: magic, version, rows, cols, float32 data.
constexpr char kLatentsMagic[8] = {'A', 'T', 'T', 'S', 'L', 'A', 'T', 'S'};

void save_latents(const std::string& path, const Tensor<float>& latents) {
    if (latents.rank() != 2) throw ShapeError("save_latents: expected a rank-2 tensor");
    std::string buf;
    buf.append(kLatentsMagic, 8);
    detail::put_u32(buf, 1);
    detail::put_u32(buf, static_cast<uint32_t>(latents.dim(0)));
    detail::put_u32(buf, static_cast<uint32_t>(latents.dim(1)));
    for (float x : latents.data()) detail::put_f32(buf, x);
    detail::write_file(path, buf);
}

const Utterance& find_utterance(const Corpus& corpus, uint64_t id) {
    for (const auto& u : corpus.utterances)
        if (u.id == id) return u;
    throw ValidationError("no utterance with id " + std::to_string(id) + " in the split");
}

int64_t ratio_to_recompute(double ratio, int64_t nfe) {
    if (ratio < 0.0 || ratio >= 1.0)
        throw ValidationError("sharing ratio must lie in [0, 1)");
    return std::max<int64_t>(1, std::llround((1.0 - ratio) * static_cast<double>(nfe)));
}

// ---------------------------------------------------------------------------
// gen-corpus

struct GenCorpusArgs {
    std::string config_path;
    std::string out_dir;
    int64_t train_count = -1;
    int64_t test_count = -1;
    int64_t len_min = -1;
    int64_t len_max = -1;
    int64_t seed = -1;
};

int cmd_gen_corpus(const GenCorpusArgs& args) {
    RunConfig cfg = effective_config(args.config_path);
    if (!args.out_dir.empty()) cfg.paths.dataset = args.out_dir;
    if (args.train_count >= 0) cfg.corpus.train_count = args.train_count;
    if (args.test_count >= 0) cfg.corpus.test_count = args.test_count;
    if (args.len_min >= 0) cfg.corpus.len_min = args.len_min;
    if (args.len_max >= 0) cfg.corpus.len_max = args.len_max;
    if (args.seed >= 0) cfg.corpus.seed = static_cast<uint64_t>(args.seed);
    cfg.codec.validate();
    cfg.corpus.validate();

    LatentCodec codec(cfg.codec);
    Corpus all = generate_corpus(codec, cfg.corpus.train_count + cfg.corpus.test_count,
                                 cfg.corpus.len_min, cfg.corpus.len_max, cfg.corpus.seed);
    Corpus train{all.codec, {}}, test{all.codec, {}};
    for (size_t i = 0; i < all.utterances.size(); ++i) {
        auto& dst = static_cast<int64_t>(i) < cfg.corpus.train_count ? train : test;
        dst.utterances.push_back(std::move(all.utterances[i]));
    }

    save_dataset(dataset_file(cfg.paths.dataset, "train"), train);
    save_dataset(dataset_file(cfg.paths.dataset, "test"), test);
    save_codec_config(sidecar_file(cfg.paths.dataset), cfg.codec);

    int64_t frames = 0;
    for (const auto& u : train.utterances) frames += u.frame_count(cfg.codec.latent_dim);
    for (const auto& u : test.utterances) frames += u.frame_count(cfg.codec.latent_dim);
    std::cout << "wrote " << train.utterances.size() << " train / " << test.utterances.size()
              << " test utterances, " << frames << " frames, " << cfg.codec.speaker_count
              << " speakers to " << cfg.paths.dataset << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string config_path;
    std::string dataset_dir;
    std::string out_dir;
    std::string metrics_path;
    std::string resume_path;
    int64_t steps = -1;
    int64_t batch_size = -1;
    int64_t seed = -1;
    int64_t checkpoint_interval = -1;
};

nlohmann::json metrics_line(const StepRecord& rec, double wall_time_s) {
    return nlohmann::json{{"step", rec.step},          {"lr", rec.lr},
                          {"cfm", rec.losses.cfm},     {"dir", rec.losses.dir},
                          {"ctc", rec.losses.ctc},     {"vq", rec.losses.vq},
                          {"total", rec.losses.total}, {"grad_norm", rec.grad_norm},
                          {"wall_time", wall_time_s}};
}

int cmd_train(const TrainArgs& args) {
    RunConfig cfg = effective_config(args.config_path);
    if (!args.dataset_dir.empty()) cfg.paths.dataset = args.dataset_dir;
    if (!args.out_dir.empty()) cfg.paths.checkpoints = args.out_dir;
    if (args.steps >= 0) cfg.train.total_steps = args.steps;
    if (args.batch_size >= 0) cfg.train.batch_size = args.batch_size;
    if (args.seed >= 0) cfg.train_seed = static_cast<uint64_t>(args.seed);
    if (args.checkpoint_interval >= 0) cfg.checkpoint_interval = args.checkpoint_interval;

    const CodecConfig codec_cfg = load_codec_config(sidecar_file(cfg.paths.dataset));
    LatentCodec codec(codec_cfg);
    Corpus corpus = load_dataset(dataset_file(cfg.paths.dataset, "train"), codec_cfg);
    if (corpus.utterances.empty()) throw ValidationError("train: the training split is empty");

    std::unique_ptr<ArchiTtsModel<float>> model;
    std::unique_ptr<Trainer<float>> trainer;
    int64_t start_step = 1;
    if (!args.resume_path.empty()) {
        auto ck = load_checkpoint(args.resume_path);
        model = build_model(ck);
        TrainConfig tc = ck.train_cfg;
        if (args.steps >= 0) tc.total_steps = args.steps;
        trainer = std::make_unique<Trainer<float>>(*model, codec, corpus, tc, ck.train_seed);
        resume_trainer(*trainer, ck);
        start_step = ck.step + 1;
        std::cout << "resumed from " << args.resume_path << " at step " << ck.step << "\n";
    } else {
        if (cfg.model.vocab_size != codec_cfg.vocab_size ||
            cfg.model.latent_dim != codec_cfg.latent_dim ||
            cfg.model.speaker_dim != codec_cfg.speaker_dim)
            throw ValidationError("train: model config does not match the dataset codec");
        model = std::make_unique<ArchiTtsModel<float>>(cfg.model, cfg.init_seed);
        trainer = std::make_unique<Trainer<float>>(*model, codec, corpus, cfg.train,
                                                   cfg.train_seed);
    }
    const TrainConfig& tc = trainer->config();
    std::cout << "model parameters: " << model->parameter_count() << "\n";

    const std::string metrics_path =
        args.metrics_path.empty()
            ? (std::filesystem::path(cfg.paths.reports) / "train_metrics.jsonl").string()
            : args.metrics_path;
    {
        std::filesystem::path mp(metrics_path);
        if (mp.has_parent_path()) {
            std::error_code ec;
            std::filesystem::create_directories(mp.parent_path(), ec);
        }
    }
    std::ofstream metrics(metrics_path,
                          start_step > 1 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot open metrics file " + metrics_path);

    std::filesystem::create_directories(cfg.paths.checkpoints);
    const auto t0 = std::chrono::steady_clock::now();
    for (int64_t s = start_step; s <= tc.total_steps; ++s) {
        StepRecord rec;
        try {
            rec = trainer->train_step(s);
        } catch (const NumericError& e) {
            std::cerr << "training aborted: " << e.what()
                      << " (last good checkpoint kept)\n";
            return 1;
        }
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                                .count();
        if (s % tc.log_interval == 0 || s == 1 || s == tc.total_steps) {
            metrics << metrics_line(rec, wall).dump() << "\n";
            metrics.flush();
            std::cout << "step " << s << " total " << rec.losses.total << " cfm "
                      << rec.losses.cfm << " dir " << rec.losses.dir << " ctc " << rec.losses.ctc
                      << " lr " << rec.lr << "\n";
        }
        if (s % cfg.checkpoint_interval == 0 && s != tc.total_steps) {
            const std::string path =
                (std::filesystem::path(cfg.paths.checkpoints) / ("step_" + std::to_string(s) +
                                                                 ".ckpt"))
                    .string();
            save_checkpoint(path, *trainer, s);
            std::cout << "checkpoint: " << path << "\n";
        }
    }
    const std::string final_path =
        (std::filesystem::path(cfg.paths.checkpoints) / "final.ckpt").string();
    save_checkpoint(final_path, *trainer, tc.total_steps);
    std::cout << "final checkpoint (ema weights included): " << final_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
    std::string config_path;
    std::string checkpoint_path;
    std::string dataset_dir;
    std::string split = "test";
    std::string tokens_text;
    std::string uncond_mode_text;
    std::string out_path;
    std::string report_path;
    int64_t ref_id = 0;
    int64_t nfe = -1;
    int64_t recompute = -1;
    double cfg_strength = -1;
    double timeshift = -1;
    double sharing_ratio = -1;
    int64_t seed = -1;
};

int cmd_synth(const SynthArgs& args) {
    RunConfig cfg = effective_config(args.config_path);
    if (!args.dataset_dir.empty()) cfg.paths.dataset = args.dataset_dir;

    SamplerPlan plan = cfg.sampler;
    if (args.nfe >= 0) plan.nfe = args.nfe;
    if (args.cfg_strength >= 0) plan.cfg_strength = args.cfg_strength;
    if (args.timeshift >= 0) plan.timeshift = args.timeshift;
    if (args.seed >= 0) plan.seed = static_cast<uint64_t>(args.seed);
    if (args.sharing_ratio >= 0) plan.recompute = ratio_to_recompute(args.sharing_ratio, plan.nfe);
    if (args.recompute >= 0) plan.recompute = args.recompute;  // explicit K wins
    if (!args.uncond_mode_text.empty())
        plan.uncond_mode = uncond_mode_from_name(args.uncond_mode_text);
    plan.validate();

    if (args.split != "train" && args.split != "test")
        throw ValidationError("synth: --split must be train or test");
    const CodecConfig codec_cfg = load_codec_config(sidecar_file(cfg.paths.dataset));
    LatentCodec codec(codec_cfg);
    Corpus split = load_dataset(dataset_file(cfg.paths.dataset, args.split.c_str()), codec_cfg);

    auto ck = load_checkpoint(args.checkpoint_path);
    auto model = build_ema_model(ck);

    const Utterance& ref = find_utterance(split, static_cast<uint64_t>(args.ref_id));
    std::vector<int64_t> gen_tokens = parse_int_list(args.tokens_text, "--tokens");
    for (int64_t t : gen_tokens)
        if (t < 0 || t >= codec_cfg.vocab_size)
            throw ValidationError("synth: token " + std::to_string(t) + " outside the vocabulary");

    const int64_t d_lat = codec_cfg.latent_dim;
    Tensor<float> ref_latents = Tensor<float>::from_data(
        {ref.frame_count(d_lat), d_lat}, std::vector<float>(ref.frames.begin(), ref.frames.end()));
    auto spk = codec.estimate_speaker(ref.frames);
    Tensor<float> speaker = Tensor<float>::from_data(
        {codec_cfg.speaker_dim}, std::vector<float>(spk.begin(), spk.end()));

    const auto t0 = std::chrono::steady_clock::now();
    auto out = zero_shot_synthesize(*model, codec, ref_latents, ref.tokens, gen_tokens, speaker,
                                    plan);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count();
    const double ter = token_error_rate(gen_tokens, out.decoded_tokens);

    std::filesystem::create_directories(cfg.paths.reports);
    const std::string latents_path =
        args.out_path.empty()
            ? (std::filesystem::path(cfg.paths.reports) / "synth_latents.bin").string()
            : args.out_path;
    save_latents(latents_path, out.latents);
    auto report = synthesis_report(plan, out, wall, ter);
    report["latents_file"] = latents_path;
    report["ref_id"] = args.ref_id;
    const std::string report_path =
        args.report_path.empty()
            ? (std::filesystem::path(cfg.paths.reports) / "synth_report.json").string()
            : args.report_path;
    write_json_file(report_path, report);
    std::cout << report.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// bench-sharing

struct BenchArgs {
    std::string config_path;
    std::string checkpoint_path;
    std::string dataset_dir;
    std::string ratios_text = "0,0.5,0.75";
    std::string nfe_text = "16,32";
    std::string out_json;
    std::string out_csv;
    int64_t limit = 50;
    double cfg_strength = -1;
    double timeshift = -1;
    int64_t seed = -1;
};

int cmd_bench_sharing(const BenchArgs& args) {
    RunConfig cfg = effective_config(args.config_path);
    if (!args.dataset_dir.empty()) cfg.paths.dataset = args.dataset_dir;
    const auto ratios = parse_double_list(args.ratios_text, "--ratios");
    const auto nfe_list = parse_int_list(args.nfe_text, "--nfe-list");

    const CodecConfig codec_cfg = load_codec_config(sidecar_file(cfg.paths.dataset));
    LatentCodec codec(codec_cfg);
    Corpus split = load_dataset(dataset_file(cfg.paths.dataset, "test"), codec_cfg);
    if (split.utterances.empty()) throw ValidationError("bench-sharing: empty test split");

    auto ck = load_checkpoint(args.checkpoint_path);
    auto model = build_ema_model(ck);

    SamplerPlan base = cfg.sampler;
    if (args.cfg_strength >= 0) base.cfg_strength = args.cfg_strength;
    if (args.timeshift >= 0) base.timeshift = args.timeshift;
    if (args.seed >= 0) base.seed = static_cast<uint64_t>(args.seed);

    nlohmann::json rows = nlohmann::json::array();
    std::ostringstream csv;
    csv << "sharing_ratio,nfe,recompute,token_error_rate,speaker_cosine,encoder_evals,"
           "decoder_evals,wall_time\n";
    // wall_time per (nfe, ratio) cell, for the trend check at fixed nfe
    std::vector<std::vector<double>> cell_times(nfe_list.size());

    for (size_t ni = 0; ni < nfe_list.size(); ++ni) {
        for (double ratio : ratios) {
            SamplerPlan plan = base;
            plan.nfe = nfe_list[ni];
            plan.recompute = ratio_to_recompute(ratio, plan.nfe);
            auto ev = evaluate_split(*model, codec, split, plan, args.limit);
            nlohmann::json row{{"sharing_ratio", ratio},
                               {"nfe", plan.nfe},
                               {"recompute", plan.recompute},
                               {"token_error_rate", ev.mean_token_error_rate},
                               {"speaker_cosine", ev.mean_speaker_cosine},
                               {"encoder_evals", ev.encoder_evals},
                               {"decoder_evals", ev.decoder_evals},
                               {"wall_time", ev.wall_time_s}};
            rows.push_back(row);
            csv << ratio << "," << plan.nfe << "," << plan.recompute << ","
                << ev.mean_token_error_rate << "," << ev.mean_speaker_cosine << ","
                << ev.encoder_evals << "," << ev.decoder_evals << "," << ev.wall_time_s << "\n";
            cell_times[ni].push_back(ev.wall_time_s);
            std::cout << "ratio " << ratio << " nfe " << plan.nfe << " K " << plan.recompute
                      << " ter " << ev.mean_token_error_rate << " spk "
                      << ev.mean_speaker_cosine << " enc " << ev.encoder_evals << " wall "
                      << ev.wall_time_s << "s\n";
        }
    }

    // Trend over the grid: at fixed nfe, the highest sharing ratio must be
    // faster than the lowest (encoder work scales with K).
    bool trend_ok = true;
    for (size_t ni = 0; ni < nfe_list.size(); ++ni) {
        if (cell_times[ni].size() < 2) continue;
        size_t lo = 0, hi = 0;
        for (size_t ri = 1; ri < ratios.size(); ++ri) {
            if (ratios[ri] < ratios[lo]) lo = ri;
            if (ratios[ri] > ratios[hi]) hi = ri;
        }
        if (ratios[hi] > ratios[lo] && cell_times[ni][hi] >= cell_times[ni][lo]) {
            trend_ok = false;
            std::cerr << "wall-time trend violated at nfe " << nfe_list[ni] << ": ratio "
                      << ratios[hi] << " took " << cell_times[ni][hi] << "s vs " << ratios[lo]
                      << " at " << cell_times[ni][lo] << "s\n";
        }
    }

    std::filesystem::create_directories(cfg.paths.reports);
    const std::string json_path =
        args.out_json.empty()
            ? (std::filesystem::path(cfg.paths.reports) / "bench_sharing.json").string()
            : args.out_json;
    const std::string csv_path =
        args.out_csv.empty()
            ? (std::filesystem::path(cfg.paths.reports) / "bench_sharing.csv").string()
            : args.out_csv;
    write_json_file(json_path, nlohmann::json{{"rows", rows}, {"wall_time_trend_ok", trend_ok}});
    detail::write_file(csv_path, csv.str());
    std::cout << "table: " << json_path << " and " << csv_path << "\n";
    if (!trend_ok) return 1;
    return 0;
}

// ---------------------------------------------------------------------------
// verify

class Verifier {
public:
    void check(const std::string& name, bool ok, const std::string& detail = "") {
        if (ok) {
            std::cout << "[ok]   " << name << "\n";
        } else {
            std::cout << "[FAIL] " << name << (detail.empty() ? "" : ": " + detail) << "\n";
            ++failures_;
        }
    }
    int failures() const { return failures_; }

private:
    int failures_ = 0;
};

// Random normalized log-distribution rows, plus a feasible blank-free target.
struct VerifyCtcInstance {
    std::vector<double> lp;
    int64_t t_len, v;
    std::vector<int64_t> target;
};

VerifyCtcInstance make_ctc_instance(RootRng& root, uint64_t i, bool force_repeat) {
    auto rng = root.stream("ctc", i);
    VerifyCtcInstance inst;
    inst.t_len = 2 + static_cast<int64_t>(rng.uniform_int(5));  // 2..6
    inst.v = 2 + static_cast<int64_t>(rng.uniform_int(2));      // 2..3
    for (;;) {
        const int64_t len = 1 + static_cast<int64_t>(rng.uniform_int(3));
        inst.target.resize(len);
        for (auto& l : inst.target) l = 1 + static_cast<int64_t>(rng.uniform_int(
                                             static_cast<uint64_t>(inst.v - 1)));
        if (force_repeat && len >= 2) inst.target[1] = inst.target[0];
        if (ctc_min_frames(inst.target) <= inst.t_len) break;
    }
    inst.lp.resize(inst.t_len * inst.v);
    for (int64_t t = 0; t < inst.t_len; ++t) {
        double mx = -1e30;
        for (int64_t k = 0; k < inst.v; ++k) {
            inst.lp[t * inst.v + k] = 1.5 * rng.normal();
            mx = std::max(mx, inst.lp[t * inst.v + k]);
        }
        double lse = 0;
        for (int64_t k = 0; k < inst.v; ++k) lse += std::exp(inst.lp[t * inst.v + k] - mx);
        lse = mx + std::log(lse);
        for (int64_t k = 0; k < inst.v; ++k) inst.lp[t * inst.v + k] -= lse;
    }
    return inst;
}

// Deliberately broken forward recursion: the skip guard is off by one
// (ext[s-1] instead of ext[s-2]), which lets paths hop the mandatory blank
// between repeated labels. The oracle check must catch this mutant.
double ctc_forward_mutant(const std::vector<double>& lp, int64_t t_len, int64_t v,
                          const std::vector<int64_t>& target) {
    using ctc_detail::neg_inf;
    const auto ext = ctc_detail::extend_labels(target);
    const int64_t n = static_cast<int64_t>(ext.size());
    std::vector<double> alpha(static_cast<size_t>(t_len) * n, neg_inf<double>());
    alpha[0] = lp[ext[0]];
    if (n > 1) alpha[1] = lp[ext[1]];
    for (int64_t ti = 1; ti < t_len; ++ti) {
        const double* prev = alpha.data() + (ti - 1) * n;
        double* cur = alpha.data() + ti * n;
        for (int64_t s = 0; s < n; ++s) {
            double best = prev[s];
            if (s >= 1) best = ctc_detail::lse2(best, prev[s - 1]);
            if (s >= 2 && ext[s] != 0 && ext[s] != ext[s - 1])  // mutant: s-1, not s-2
                best = ctc_detail::lse2(best, prev[s - 2]);
            cur[s] = best == neg_inf<double>() ? neg_inf<double>() : best + lp[ti * v + ext[s]];
        }
    }
    double log_z = alpha[(t_len - 1) * n + (n - 1)];
    if (n > 1) log_z = ctc_detail::lse2(log_z, alpha[(t_len - 1) * n + (n - 2)]);
    return -log_z;
}

template <typename Build>
double op_grad_error(Build&& build, Shape in_shape, uint64_t seed) {
    RootRng root(seed);
    auto in_rng = root.stream("input");
    Tensor<double> x = Tensor<double>::randn(in_shape, in_rng);
    x.set_requires_grad(true);
    Tensor<double> out = build(x);
    auto w_rng = root.stream("weights");
    Tensor<double> w = Tensor<double>::randn(out.shape(), w_rng);
    backward(total_sum(mul(out, w)));
    const std::vector<double> analytic = x.grad();

    std::function<double(const std::vector<double>&)> scalar_fn =
        [&](const std::vector<double>& vals) {
            NoGradGuard ng;
            Tensor<double> xv = Tensor<double>::from_data(in_shape, vals);
            Tensor<double> o = build(xv);
            double acc = 0;
            for (int64_t i = 0; i < o.numel(); ++i) acc += o.data()[i] * w.data()[i];
            return acc;
        };
    const auto numeric = finite_difference_grad<double>(scalar_fn, x.data());
    return grad_rel_error(analytic, numeric);
}

// Minimal fields for the solver checks.
struct LinearProbeField : ConditionProvider<double> {
    Tensor<double> encode(const Tensor<double>&, double, bool) override {
        return Tensor<double>::zeros({1});
    }
    Tensor<double> velocity(const Tensor<double>& x, double, const Tensor<double>&,
                            bool) override {
        return x;
    }
};

struct CountingProbeField : ConditionProvider<float> {
    int64_t encodes = 0;
    Tensor<float> encode(const Tensor<float>&, double, bool) override {
        ++encodes;
        return Tensor<float>::zeros({1});
    }
    Tensor<float> velocity(const Tensor<float>& x, double, const Tensor<float>&, bool) override {
        return Tensor<float>::zeros(x.shape());
    }
};

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

int cmd_verify() {
    Verifier v;
    const auto t0 = std::chrono::steady_clock::now();

    {  // codec round trips
        CodecConfig cc;  // defaults: vocab 16, latent 16, speaker 4, noise 0.3
        LatentCodec codec(cc);
        v.check("codec: codeword gap exceeds four times the noise radius",
                codec.min_codeword_gap() > 4.0 * cc.noise_scale,
                "gap " + std::to_string(codec.min_codeword_gap()));
        RootRng root(0x10de0);
        bool all_exact = true;
        std::string detail;
        for (uint64_t i = 0; i < 100 && all_exact; ++i) {
            auto rng = root.stream("utt", i);
            std::vector<int64_t> tokens(3 + rng.uniform_int(6));
            for (size_t k = 0; k < tokens.size(); ++k) {
                int64_t draw = static_cast<int64_t>(rng.uniform_int(
                    static_cast<uint64_t>(cc.vocab_size - (k > 0 ? 1 : 0))));
                tokens[k] = (k > 0 && draw >= tokens[k - 1]) ? draw + 1 : draw;
            }
            std::vector<int64_t> durations(tokens.size());
            for (auto& d : durations)
                d = cc.frames_min + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(
                        cc.frames_max - cc.frames_min + 1)));
            auto frames = codec.encode(tokens, static_cast<int64_t>(i % cc.speaker_count),
                                       durations, root.stream_seed("noise", i));
            if (codec.decode(frames) != tokens) {
                all_exact = false;
                detail = "mismatch at utterance seed index " + std::to_string(i);
            }
        }
        v.check("codec: 100 encode/decode round trips are exact", all_exact, detail);
    }

    {  // ctc oracle equivalence and gradient
        RootRng root(0xc7c0);
        bool ok = true;
        std::string detail;
        for (uint64_t i = 0; i < 100 && ok; ++i) {
            auto inst = make_ctc_instance(root, i, false);
            NoGradGuard ng;
            auto lp = Tensor<double>::from_data({inst.t_len, inst.v}, inst.lp);
            const double loss = ctc_loss(lp, inst.target).item();
            const double brute = ctc_brute_force(inst.lp, inst.t_len, inst.v, inst.target);
            if (std::abs(loss - brute) >= 1e-6) {
                ok = false;
                detail = "instance " + std::to_string(i) + ": forward " + std::to_string(loss) +
                         " vs oracle " + std::to_string(brute) + " (root seed 0xc7c0)";
            }
        }
        v.check("ctc: forward matches the enumeration oracle on 100 instances", ok, detail);

        bool mutant_caught = false;
        for (uint64_t i = 0; i < 20 && !mutant_caught; ++i) {
            auto inst = make_ctc_instance(root, 1000 + i, true);
            const double brute = ctc_brute_force(inst.lp, inst.t_len, inst.v, inst.target);
            const double mutant = ctc_forward_mutant(inst.lp, inst.t_len, inst.v, inst.target);
            if (std::abs(mutant - brute) > 1e-6) mutant_caught = true;
        }
        v.check("ctc: the oracle catches an off-by-one skip-rule mutant", mutant_caught,
                "mutant agreed with the oracle on every probe (root seed 0xc7c0)");

        bool grad_ok = true;
        std::string grad_detail;
        for (uint64_t i = 0; i < 5 && grad_ok; ++i) {
            auto inst = make_ctc_instance(root, 2000 + i, false);
            auto lp = Tensor<double>::from_data({inst.t_len, inst.v}, inst.lp);
            lp.set_requires_grad(true);
            backward(ctc_loss(lp, inst.target));
            std::function<double(const std::vector<double>&)> fn =
                [&](const std::vector<double>& vals) {
                    NoGradGuard ng;
                    auto t = Tensor<double>::from_data({inst.t_len, inst.v}, vals);
                    return ctc_loss(t, inst.target).item();
                };
            const auto numeric = finite_difference_grad<double>(fn, lp.data());
            const double err = grad_rel_error(lp.grad(), numeric);
            if (err >= 1e-4) {
                grad_ok = false;
                grad_detail = "instance " + std::to_string(2000 + i) + " relative error " +
                              std::to_string(err);
            }
        }
        v.check("ctc: analytic gradient matches finite differences", grad_ok, grad_detail);
    }

    {  // primitive gradients
        struct Probe {
            const char* name;
            Shape shape;
            std::function<Tensor<double>(const Tensor<double>&)> build;
        };
        RootRng root(0x96ad);
        (void)root;
        const std::vector<Probe> probes = {
            {"layer_norm", {5, 7}, [](const Tensor<double>& x) { return layer_norm_rows(x, 1e-5); }},
            {"softmax", {4, 6}, [](const Tensor<double>& x) { return softmax_rows(x); }},
            {"gelu", {3, 8}, [](const Tensor<double>& x) { return gelu(x); }},
            {"matmul", {4, 4}, [](const Tensor<double>& x) { return matmul(x, x); }},
            {"attention", {6, 8},
             [](const Tensor<double>& x) { return attention(x, x, x, false); }},
        };
        for (const auto& p : probes) {
            double worst = 0;
            for (uint64_t seed = 1; seed <= 3; ++seed)
                worst = std::max(worst, op_grad_error(p.build, p.shape, seed));
            v.check(std::string("gradients: ") + p.name + " within 1e-5 of finite differences",
                    worst < 1e-5, "worst relative error " + std::to_string(worst));
        }
    }

    {  // guidance identities
        RngStream rng(0xcf9);
        auto v_cond = Tensor<float>::randn({4, 5}, rng);
        auto v_uncond = Tensor<float>::randn({4, 5}, rng);
        auto at0 = cfg_velocity(v_cond, v_uncond, 0.0);
        bool bitwise = true;
        for (int64_t i = 0; i < at0.numel(); ++i)
            if (std::memcmp(&at0.data()[i], &v_cond.data()[i], 4) != 0) bitwise = false;
        v.check("guidance: zero strength returns the conditional branch bitwise", bitwise);

        bool collapse = true;
        for (double omega : {0.0, 1.0, 4.0}) {
            auto same = cfg_velocity(v_cond, v_cond, omega);
            for (int64_t i = 0; i < same.numel(); ++i)
                if (std::abs(same.data()[i] - v_cond.data()[i]) > 1e-5) collapse = false;
        }
        v.check("guidance: equal branches collapse at strengths 0, 1, 4", collapse);

        auto two = Tensor<float>::filled({1}, 2.0f);
        auto one = Tensor<float>::filled({1}, 1.0f);
        v.check("guidance: scalar example (1+4)*2 - 4*1 = 6",
                cfg_velocity(two, one, 4.0).data()[0] == 6.0f);
    }

    {  // schedule and duration
        auto uniform = build_schedule(16, 1.0);
        bool uni_ok = true;
        for (int i = 0; i <= 16; ++i)
            if (uniform[i] != static_cast<double>(i) / 16.0) uni_ok = false;
        v.check("solver: unit timeshift keeps the grid uniform", uni_ok);
        auto warped = build_schedule(2, 3.0);
        v.check("solver: timeshift 3 maps the midpoint to 0.75",
                warped[1] == 0.75 && warped[0] == 0.0 && warped[2] == 1.0);
        bool mono = true;
        for (double s : {0.5, 3.0}) {
            auto t = build_schedule(32, s);
            for (size_t i = 1; i < t.size(); ++i)
                if (!(t[i] > t[i - 1])) mono = false;
            if (t.front() != 0.0 || t.back() != 1.0) mono = false;
        }
        v.check("solver: schedules increase strictly with exact endpoints", mono);
        v.check("solver: duration examples (50, 10, 11)",
                estimate_duration(100, 50, 25).d == 50 && estimate_duration(10, 3, 3).d == 10 &&
                    estimate_duration(7, 3, 5).d == 11);
    }

    {  // sharing plan and eval counts
        v.check("sharing: 32 steps at k=8 recompute at multiples of four",
                plan_sharing(32, 8) == std::vector<int64_t>{0, 4, 8, 12, 16, 20, 24, 28});
        bool counts_ok = true;
        std::string detail;
        for (auto [n, k] : std::vector<std::pair<int64_t, int64_t>>{{32, 32}, {32, 8}, {16, 1}}) {
            CountingProbeField field;
            SamplerPlan plan;
            plan.nfe = n;
            plan.recompute = k;
            plan.cfg_strength = 0.0;
            auto res = sample(field, 3, 2, plan);
            if (res.encoder_evals != 2 * k || res.decoder_evals != 2 * n ||
                field.encodes != 2 * k) {
                counts_ok = false;
                detail = "n=" + std::to_string(n) + " k=" + std::to_string(k);
            }
        }
        v.check("sharing: encoder forwards 2k and decoder forwards 2n", counts_ok, detail);
    }

    {  // euler convergence on the linear field
        LinearProbeField field;
        std::vector<double> errors;
        for (int64_t n : {16, 32, 64}) {
            SamplerPlan plan;
            plan.nfe = n;
            plan.cfg_strength = 0.0;
            plan.timeshift = 1.0;
            plan.seed = 17;
            auto res = sample(field, 5, 3, plan);
            double worst = 0;
            for (int64_t i = 0; i < res.latents.numel(); ++i) {
                const double expect = std::exp(1.0) * res.initial.data()[i];
                worst = std::max(worst,
                                 std::abs(res.latents.data()[i] - expect) / std::abs(expect));
            }
            errors.push_back(worst);
        }
        const double r1 = errors[0] / errors[1], r2 = errors[1] / errors[2];
        v.check("solver: euler error halves when steps double",
                errors[2] < 0.02 && r1 > 1.7 && r1 < 2.3 && r2 > 1.7 && r2 < 2.3,
                "errors " + std::to_string(errors[0]) + ", " + std::to_string(errors[1]) + ", " +
                    std::to_string(errors[2]));
    }

    {  // logit-normal statistics
        RngStream rng(0x10917);
        const int n = 10000;
        std::vector<double> draws(n);
        bool in_range = true;
        for (auto& t : draws) {
            t = sample_timestep(rng);
            if (t <= 0.0 || t >= 1.0) in_range = false;
        }
        std::sort(draws.begin(), draws.end());
        double ks = 0;
        for (int i = 0; i < n; ++i) {
            const double f = normal_cdf(std::log(draws[i] / (1.0 - draws[i])));
            ks = std::max(ks, std::abs(f - static_cast<double>(i) / n));
            ks = std::max(ks, std::abs(f - static_cast<double>(i + 1) / n));
        }
        v.check("timesteps: 10k logit-normal draws in (0,1) with ks below 0.02",
                in_range && ks < 0.02, "ks " + std::to_string(ks) + " (seed 0x109i7)");
    }

    {  // interpolation, masks, dropout
        RngStream rng(0x0113);
        auto x0 = Tensor<float>::randn({5, 4}, rng);
        auto x1 = Tensor<float>::randn({5, 4}, rng);
        auto [a0, va] = interpolate(x0, x1, 0.0);
        auto [a1, vb] = interpolate(x0, x1, 1.0);
        bool endpoint_ok = true;
        for (int64_t i = 0; i < a0.numel(); ++i) {
            if (std::memcmp(&a0.data()[i], &x0.data()[i], 4) != 0) endpoint_ok = false;
            if (std::memcmp(&a1.data()[i], &x1.data()[i], 4) != 0) endpoint_ok = false;
        }
        v.check("interpolation: endpoints are exact", endpoint_ok);

        RootRng root(0x3a5c);
        bool mask_ok = true;
        for (int trial = 0; trial < 500 && mask_ok; ++trial) {
            auto mrng = root.stream("mask", trial);
            const int64_t frames = 1 + static_cast<int64_t>(mrng.uniform_int(40));
            auto mask = sample_mask(frames, mrng);
            int64_t count = 0, first = -1, last = -1;
            for (int64_t i = 0; i < frames; ++i)
                if (mask[i]) {
                    ++count;
                    if (first < 0) first = i;
                    last = i;
                }
            if (count < 1 || last - first + 1 != count ||
                static_cast<double>(count) < 0.7 * static_cast<double>(frames) - 1e-9)
                mask_ok = false;
        }
        v.check("masks: 500 draws are contiguous with fraction at least 0.7", mask_ok,
                "root seed 0x3a5c");

        RngStream drng(0xd20b);
        const int n = 100000;
        int all_null = 0, joint = 0;
        for (int i = 0; i < n; ++i) {
            auto f = sample_condition_dropout(drng);
            if (f.ref && f.z && f.speaker) ++all_null;
            else if (f.ref && f.speaker) ++joint;
        }
        const double ra = static_cast<double>(all_null) / n;
        const double rj = static_cast<double>(joint) / n;
        v.check("dropout: all-null rate 0.20 and joint rate 0.24 within 0.01",
                std::abs(ra - 0.20) < 0.01 && std::abs(rj - 0.24) < 0.01,
                "rates " + std::to_string(ra) + ", " + std::to_string(rj) + " (seed 0xd20b)");
    }

    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (v.failures() == 0 ? "all checks passed" : "FAILURES: " +
                  std::to_string(v.failures()))
              << " (" << elapsed << "s)\n";
    return v.failures() == 0 ? 0 : 1;
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{"desk-scale non-autoregressive tts pipeline"};
    app.require_subcommand(1);

    GenCorpusArgs gen_args;
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic train/test corpus");
    gen->add_option("--config", gen_args.config_path, "run config json");
    gen->add_option("--out", gen_args.out_dir, "dataset directory");
    gen->add_option("--train-count", gen_args.train_count, "train utterances");
    gen->add_option("--test-count", gen_args.test_count, "test utterances");
    gen->add_option("--len-min", gen_args.len_min, "min tokens per utterance");
    gen->add_option("--len-max", gen_args.len_max, "max tokens per utterance");
    gen->add_option("--seed", gen_args.seed, "corpus seed");

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "train a model on a generated corpus");
    train->add_option("--config", train_args.config_path, "run config json");
    train->add_option("--dataset", train_args.dataset_dir, "dataset directory");
    train->add_option("--out", train_args.out_dir, "checkpoint directory");
    train->add_option("--metrics", train_args.metrics_path, "metrics jsonl path");
    train->add_option("--resume", train_args.resume_path, "checkpoint to resume from");
    train->add_option("--steps", train_args.steps, "total training steps");
    train->add_option("--batch-size", train_args.batch_size, "items per step");
    train->add_option("--seed", train_args.seed, "training seed");
    train->add_option("--checkpoint-interval", train_args.checkpoint_interval,
                      "steps between checkpoints");

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "zero-shot synthesis from a reference utterance");
    synth->add_option("--config", synth_args.config_path, "run config json");
    synth->add_option("--checkpoint", synth_args.checkpoint_path, "trained checkpoint")
        ->required();
    synth->add_option("--dataset", synth_args.dataset_dir, "dataset directory");
    synth->add_option("--split", synth_args.split, "reference split (train|test)");
    synth->add_option("--ref-id", synth_args.ref_id, "reference utterance id");
    synth->add_option("--tokens", synth_args.tokens_text, "target tokens, comma separated")
        ->required();
    synth->add_option("--nfe", synth_args.nfe, "ode steps");
    synth->add_option("--cfg", synth_args.cfg_strength, "guidance strength");
    synth->add_option("--timeshift", synth_args.timeshift, "schedule timeshift");
    synth->add_option("--sharing-ratio", synth_args.sharing_ratio, "encoder sharing ratio");
    synth->add_option("--recompute", synth_args.recompute, "encoder recompute steps k");
    synth->add_option("--seed", synth_args.seed, "sampling seed");
    synth->add_option("--uncond-mode", synth_args.uncond_mode_text,
                      "unconditional branch: all_null|prompt_speaker_null");
    synth->add_option("--out", synth_args.out_path, "latents output file");
    synth->add_option("--report", synth_args.report_path, "report json path");

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench-sharing", "token error rate across sharing ratios");
    bench->add_option("--config", bench_args.config_path, "run config json");
    bench->add_option("--checkpoint", bench_args.checkpoint_path, "trained checkpoint")
        ->required();
    bench->add_option("--dataset", bench_args.dataset_dir, "dataset directory");
    bench->add_option("--ratios", bench_args.ratios_text, "sharing ratios, comma separated");
    bench->add_option("--nfe-list", bench_args.nfe_text, "ode step counts, comma separated");
    bench->add_option("--limit", bench_args.limit, "utterances per cell");
    bench->add_option("--cfg", bench_args.cfg_strength, "guidance strength");
    bench->add_option("--timeshift", bench_args.timeshift, "schedule timeshift");
    bench->add_option("--seed", bench_args.seed, "sampling seed");
    bench->add_option("--out-json", bench_args.out_json, "table json path");
    bench->add_option("--out-csv", bench_args.out_csv, "table csv path");

    auto* verify = app.add_subcommand("verify", "run the self-contained property checks");
    (void)verify;

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_corpus(gen_args);
        if (train->parsed()) return cmd_train(train_args);
        if (synth->parsed()) return cmd_synth(synth_args);
        if (bench->parsed()) return cmd_bench_sharing(bench_args);
        if (verify->parsed()) return cmd_verify();
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "invalid arguments: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
