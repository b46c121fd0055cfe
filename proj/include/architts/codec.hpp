#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "architts/errors.hpp"
#include "architts/rng.hpp"

// Synthetic invertible latent codec. Token content lives in the leading
// content dimensions as well-separated codewords; the speaker offset lives in
// a dedicated trailing subspace, so decoding can project it out exactly.
// Decoding is nearest-codeword classification plus run-length collapse,
// which gives a desk-scale content-recovery metric in place of ASR.

namespace architts {

struct CodecConfig {
    int64_t vocab_size = 16;
    int64_t latent_dim = 16;    // content dims + speaker dims
    int64_t speaker_dim = 4;    // trailing subspace carrying the speaker offset
    int64_t frames_min = 2;     // per-token duration range, inclusive
    int64_t frames_max = 4;
    int64_t speaker_count = 8;
    double speaker_scale = 1.0;
    double noise_scale = 0.3;
    uint64_t seed = 1;

    int64_t content_dim() const { return latent_dim - speaker_dim; }

    void validate() const {
        if (vocab_size < 2) throw ValidationError("codec: vocab_size must be >= 2");
        if (speaker_dim < 1) throw ValidationError("codec: speaker_dim must be >= 1");
        if (latent_dim <= speaker_dim)
            throw ValidationError("codec: latent_dim must exceed speaker_dim");
        if (frames_min < 1 || frames_max < frames_min)
            throw ValidationError("codec: frames_per_token range must satisfy 1 <= min <= max");
        if (speaker_count < 1) throw ValidationError("codec: speaker_count must be >= 1");
        if (speaker_scale < 0 || noise_scale < 0)
            throw ValidationError("codec: scales must be >= 0");
    }
};

// Edit distance between two id sequences.
inline int64_t levenshtein(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    const size_t n = b.size();
    std::vector<int64_t> prev(n + 1), cur(n + 1);
    for (size_t j = 0; j <= n; ++j) prev[j] = static_cast<int64_t>(j);
    for (size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<int64_t>(i);
        for (size_t j = 1; j <= n; ++j) {
            int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[n];
}

inline double token_error_rate(const std::vector<int64_t>& reference,
                               const std::vector<int64_t>& hypothesis) {
    if (reference.empty()) throw ValidationError("token_error_rate: empty reference");
    return static_cast<double>(levenshtein(reference, hypothesis)) /
           static_cast<double>(reference.size());
}

class LatentCodec {
public:
    explicit LatentCodec(CodecConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        RootRng root(cfg_.seed);
        build_codewords(root);
        build_speakers(root);
    }

    const CodecConfig& config() const { return cfg_; }

    // Row-major [vocab x content_dim].
    const std::vector<double>& codewords() const { return codewords_; }
    // Row-major [speaker_count x speaker_dim], unit rows.
    const std::vector<double>& speaker_vectors() const { return speakers_; }

    double min_codeword_gap() const { return min_gap_; }

    // Frames for one utterance: durations[i] copies of codeword(tokens[i]),
    // plus the speaker offset in the trailing dims, plus bounded noise with
    // ||eta|| < 1 so nearest-codeword decoding is exact by construction.
    std::vector<float> encode(const std::vector<int64_t>& tokens, int64_t speaker,
                              const std::vector<int64_t>& durations, uint64_t noise_seed) const {
        if (tokens.empty()) throw ValidationError("encode: empty token sequence");
        if (tokens.size() != durations.size())
            throw ValidationError("encode: tokens and durations length mismatch");
        if (speaker < 0 || speaker >= cfg_.speaker_count)
            throw ValidationError("encode: speaker id " + std::to_string(speaker) + " outside [0, " +
                                  std::to_string(cfg_.speaker_count) + ")");
        int64_t total = 0;
        for (size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] < 0 || tokens[i] >= cfg_.vocab_size)
                throw ValidationError("encode: token id " + std::to_string(tokens[i]) + " out of range");
            if (durations[i] < cfg_.frames_min || durations[i] > cfg_.frames_max)
                throw ValidationError("encode: duration " + std::to_string(durations[i]) +
                                      " outside [" + std::to_string(cfg_.frames_min) + ", " +
                                      std::to_string(cfg_.frames_max) + "]");
            total += durations[i];
        }
        const int64_t d = cfg_.latent_dim, dc = cfg_.content_dim(), ds = cfg_.speaker_dim;
        RngStream rng(noise_seed);
        std::vector<float> frames(static_cast<size_t>(total) * d);
        std::vector<double> eta(d);
        int64_t row = 0;
        for (size_t i = 0; i < tokens.size(); ++i) {
            const double* cw = codewords_.data() + tokens[i] * dc;
            const double* sv = speakers_.data() + speaker * ds;
            for (int64_t r = 0; r < durations[i]; ++r, ++row) {
                sample_unit_ball(rng, eta);
                float* f = frames.data() + row * d;
                for (int64_t j = 0; j < dc; ++j)
                    f[j] = static_cast<float>(cw[j] + cfg_.noise_scale * eta[j]);
                for (int64_t j = 0; j < ds; ++j)
                    f[dc + j] = static_cast<float>(cfg_.speaker_scale * sv[j] +
                                                   cfg_.noise_scale * eta[dc + j]);
            }
        }
        return frames;
    }

    // Nearest codeword per frame on the content dims, then run-length collapse.
    std::vector<int64_t> decode(const std::vector<float>& frames) const {
        const int64_t d = cfg_.latent_dim, dc = cfg_.content_dim();
        if (frames.size() % d != 0) throw ShapeError("decode: frame buffer not a multiple of latent_dim");
        const int64_t t = static_cast<int64_t>(frames.size()) / d;
        std::vector<int64_t> out;
        int64_t prev = -1;
        for (int64_t i = 0; i < t; ++i) {
            const float* f = frames.data() + i * d;
            int64_t best = 0;
            double best_d2 = 0;
            for (int64_t v = 0; v < cfg_.vocab_size; ++v) {
                const double* cw = codewords_.data() + v * dc;
                double d2 = 0;
                for (int64_t j = 0; j < dc; ++j) {
                    double diff = static_cast<double>(f[j]) - cw[j];
                    d2 += diff * diff;
                }
                if (v == 0 || d2 < best_d2) {
                    best = v;
                    best_d2 = d2;
                }
            }
            if (best != prev) {
                out.push_back(best);
                prev = best;
            }
        }
        return out;
    }

    // Unit-norm speaker estimate from latents: mean of the speaker-subspace
    // components. Stands in for a speaker encoder, so zero-shot synthesis
    // derives s from the prompt audio alone.
    std::vector<double> estimate_speaker(const std::vector<float>& frames) const {
        const int64_t d = cfg_.latent_dim, dc = cfg_.content_dim(), ds = cfg_.speaker_dim;
        if (frames.size() % d != 0 || frames.empty())
            throw ShapeError("estimate_speaker: frame buffer not a positive multiple of latent_dim");
        const int64_t t = static_cast<int64_t>(frames.size()) / d;
        std::vector<double> s(ds, 0.0);
        for (int64_t i = 0; i < t; ++i)
            for (int64_t j = 0; j < ds; ++j) s[j] += frames[i * d + dc + j];
        double norm = 0;
        for (double v : s) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-9)
            throw NumericError("estimate_speaker: speaker component vanished (norm < 1e-9)");
        for (double& v : s) v /= norm;
        return s;
    }

    // Mean cosine between per-frame speaker components and a speaker vector.
    double speaker_similarity(const std::vector<float>& frames, int64_t speaker) const {
        if (speaker < 0 || speaker >= cfg_.speaker_count)
            throw ValidationError("speaker_similarity: speaker id out of range");
        const int64_t d = cfg_.latent_dim, dc = cfg_.content_dim(), ds = cfg_.speaker_dim;
        if (frames.size() % d != 0)
            throw ShapeError("speaker_similarity: frame buffer not a multiple of latent_dim");
        const int64_t t = static_cast<int64_t>(frames.size()) / d;
        if (t == 0) throw ValidationError("speaker_similarity: empty latents");
        const double* sv = speakers_.data() + speaker * ds;
        double acc = 0;
        for (int64_t i = 0; i < t; ++i) {
            const float* f = frames.data() + i * d + dc;
            double dot = 0, norm2 = 0;
            for (int64_t j = 0; j < ds; ++j) {
                dot += static_cast<double>(f[j]) * sv[j];
                norm2 += static_cast<double>(f[j]) * f[j];
            }
            acc += dot / std::max(std::sqrt(norm2), 1e-12);
        }
        return acc / static_cast<double>(t);
    }

private:
    void build_codewords(RootRng& root) {
        const int64_t dc = cfg_.content_dim();
        // Separation floor keeps decoding exact: noise displaces a frame by
        // less than noise_scale, so any gap > 4 * noise_scale suffices, with
        // an absolute floor so zero-noise configs still get distinct rows.
        const double required = std::max(4.0 * cfg_.noise_scale, 1e-3);
        const double target = std::max(required * 1.25, 3.0);
        auto rng = root.stream("codewords");
        codewords_.assign(cfg_.vocab_size * dc, 0.0);
        const int max_attempts = 10000;
        for (int64_t v = 0; v < cfg_.vocab_size; ++v) {
            int attempt = 0;
            for (;;) {
                if (++attempt > max_attempts)
                    throw ConfigError("codec: cannot place " + std::to_string(cfg_.vocab_size) +
                                      " codewords with separation " + std::to_string(target) +
                                      " in " + std::to_string(dc) + " content dims");
                double* row = codewords_.data() + v * dc;
                for (int64_t j = 0; j < dc; ++j) row[j] = rng.normal();
                bool ok = true;
                for (int64_t u = 0; u < v && ok; ++u) {
                    const double* other = codewords_.data() + u * dc;
                    double d2 = 0;
                    for (int64_t j = 0; j < dc; ++j) d2 += (row[j] - other[j]) * (row[j] - other[j]);
                    ok = std::sqrt(d2) >= target;
                }
                if (ok) break;
            }
        }
        min_gap_ = 1e300;
        for (int64_t v = 0; v < cfg_.vocab_size; ++v)
            for (int64_t u = v + 1; u < cfg_.vocab_size; ++u) {
                double d2 = 0;
                for (int64_t j = 0; j < dc; ++j) {
                    double diff = codewords_[v * dc + j] - codewords_[u * dc + j];
                    d2 += diff * diff;
                }
                min_gap_ = std::min(min_gap_, std::sqrt(d2));
            }
        if (!(min_gap_ > 4.0 * cfg_.noise_scale))
            throw ConfigError("codec: codeword separation violated");
    }

    void build_speakers(RootRng& root) {
        const int64_t ds = cfg_.speaker_dim;
        auto rng = root.stream("speakers");
        speakers_.assign(cfg_.speaker_count * ds, 0.0);
        for (int64_t s = 0; s < cfg_.speaker_count; ++s) {
            double* row = speakers_.data() + s * ds;
            double norm = 0;
            do {
                norm = 0;
                for (int64_t j = 0; j < ds; ++j) {
                    row[j] = rng.normal();
                    norm += row[j] * row[j];
                }
                norm = std::sqrt(norm);
            } while (norm < 1e-6);
            for (int64_t j = 0; j < ds; ++j) row[j] /= norm;
        }
    }

    // eta uniform in the open unit ball: unit direction times radius < 1.
    static void sample_unit_ball(RngStream& rng, std::vector<double>& eta) {
        double norm = 0;
        do {
            norm = 0;
            for (auto& e : eta) {
                e = rng.normal();
                norm += e * e;
            }
            norm = std::sqrt(norm);
        } while (norm < 1e-12);
        const double radius = rng.uniform();
        for (auto& e : eta) e *= radius / norm;
    }

    CodecConfig cfg_;
    std::vector<double> codewords_;
    std::vector<double> speakers_;
    double min_gap_ = 0;
};

}  // namespace architts
