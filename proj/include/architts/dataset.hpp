#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "architts/codec.hpp"
#include "architts/errors.hpp"
#include "architts/rng.hpp"

// Corpus generation plus the on-disk dataset format: a binary record file
// (header, token ids, float32 frames per utterance) with a JSON sidecar
// holding the codec configuration. Round trips are bit-exact.

namespace architts {

struct Utterance {
    uint64_t id = 0;
    int64_t speaker = 0;
    std::vector<int64_t> tokens;
    std::vector<float> frames;  // row-major [T x latent_dim]
    int64_t frame_count(int64_t latent_dim) const {
        return static_cast<int64_t>(frames.size()) / latent_dim;
    }
};

struct Corpus {
    CodecConfig codec;
    std::vector<Utterance> utterances;
};

// Random token sequences without immediate repeats (run-length collapse on
// decode makes repeats unrecoverable), uniform speaker, uniform durations.
inline Corpus generate_corpus(const LatentCodec& codec, int64_t utterance_count, int64_t len_min,
                              int64_t len_max, uint64_t seed) {
    if (utterance_count < 0) throw ValidationError("generate_corpus: negative utterance count");
    if (len_min < 1 || len_max < len_min)
        throw ValidationError("generate_corpus: length range must satisfy 1 <= min <= max");
    const CodecConfig& cfg = codec.config();
    RootRng root(seed);
    Corpus out;
    out.codec = cfg;
    out.utterances.reserve(utterance_count);
    for (int64_t i = 0; i < utterance_count; ++i) {
        auto rng = root.stream("utterance", static_cast<uint64_t>(i));
        Utterance u;
        u.id = static_cast<uint64_t>(i);
        u.speaker = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(cfg.speaker_count)));
        const int64_t len = len_min + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(
                                          len_max - len_min + 1)));
        u.tokens.resize(len);
        std::vector<int64_t> durations(len);
        for (int64_t t = 0; t < len; ++t) {
            if (t == 0) {
                u.tokens[t] = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(cfg.vocab_size)));
            } else {
                // Uniform over vocab minus the previous token.
                int64_t draw = static_cast<int64_t>(
                    rng.uniform_int(static_cast<uint64_t>(cfg.vocab_size - 1)));
                u.tokens[t] = draw >= u.tokens[t - 1] ? draw + 1 : draw;
            }
            durations[t] = cfg.frames_min + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(
                                                cfg.frames_max - cfg.frames_min + 1)));
        }
        u.frames = codec.encode(u.tokens, u.speaker, durations,
                                root.stream_seed("utterance-noise", static_cast<uint64_t>(i)));
        out.utterances.push_back(std::move(u));
    }
    return out;
}

// --------------------------------------------------------------------------
// binary serialization, explicitly little-endian

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    buf.append(b, 4);
}

inline void put_u64(std::string& buf, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    buf.append(b, 8);
}

inline void put_f32(std::string& buf, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

struct ByteReader {
    const std::string& buf;
    size_t pos = 0;
    explicit ByteReader(const std::string& b) : buf(b) {}

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size()) throw IoError(std::string("dataset: truncated ") + what);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32(const char* what) {
        uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path);
    return data;
}

inline void write_file(const std::string& path, const std::string& data) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace detail

constexpr char kDatasetMagic[8] = {'A', 'T', 'T', 'S', 'D', 'A', 'T', 'A'};
constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::string& path, const Corpus& corpus) {
    std::string buf;
    buf.append(kDatasetMagic, 8);
    detail::put_u32(buf, kDatasetVersion);
    detail::put_u32(buf, static_cast<uint32_t>(corpus.codec.latent_dim));
    detail::put_u64(buf, static_cast<uint64_t>(corpus.utterances.size()));
    for (const auto& u : corpus.utterances) {
        detail::put_u64(buf, u.id);
        detail::put_u32(buf, static_cast<uint32_t>(u.speaker));
        detail::put_u32(buf, static_cast<uint32_t>(u.tokens.size()));
        detail::put_u32(buf, static_cast<uint32_t>(u.frame_count(corpus.codec.latent_dim)));
        for (int64_t t : u.tokens) detail::put_u32(buf, static_cast<uint32_t>(t));
        for (float f : u.frames) detail::put_f32(buf, f);
    }
    detail::write_file(path, buf);
}

inline Corpus load_dataset(const std::string& path, const CodecConfig& codec) {
    const std::string buf = detail::read_file(path);
    detail::ByteReader r(buf);
    r.need(8, "magic");
    if (std::memcmp(buf.data(), kDatasetMagic, 8) != 0)
        throw IoError("dataset: bad magic in " + path);
    r.pos = 8;
    const uint32_t version = r.u32("version");
    if (version != kDatasetVersion)
        throw IoError("dataset: unsupported version " + std::to_string(version) + " in " + path);
    const uint32_t latent_dim = r.u32("latent_dim");
    if (latent_dim != static_cast<uint32_t>(codec.latent_dim))
        throw IoError("dataset: latent_dim " + std::to_string(latent_dim) + " does not match codec config");
    const uint64_t count = r.u64("utterance count");
    Corpus out;
    out.codec = codec;
    out.utterances.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        Utterance u;
        u.id = r.u64("utterance id");
        u.speaker = r.u32("speaker");
        const uint32_t n_tok = r.u32("token count");
        const uint32_t n_frames = r.u32("frame count");
        u.tokens.resize(n_tok);
        for (uint32_t t = 0; t < n_tok; ++t) u.tokens[t] = r.u32("token id");
        u.frames.resize(static_cast<size_t>(n_frames) * latent_dim);
        for (auto& f : u.frames) f = r.f32("frame value");
        out.utterances.push_back(std::move(u));
    }
    if (r.pos != buf.size()) throw IoError("dataset: trailing bytes in " + path);
    return out;
}

// --------------------------------------------------------------------------
// codec config sidecar

inline nlohmann::json codec_config_to_json(const CodecConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size},
                          {"latent_dim", c.latent_dim},
                          {"speaker_dim", c.speaker_dim},
                          {"frames_min", c.frames_min},
                          {"frames_max", c.frames_max},
                          {"speaker_count", c.speaker_count},
                          {"speaker_scale", c.speaker_scale},
                          {"noise_scale", c.noise_scale},
                          {"seed", c.seed}};
}

inline CodecConfig codec_config_from_json(const nlohmann::json& j) {
    CodecConfig c;
    const nlohmann::json ref = codec_config_to_json(c);
    for (const auto& [key, value] : j.items()) {
        if (!ref.contains(key)) throw ConfigError("codec config: unknown key \"" + key + "\"");
        (void)value;
    }
    try {
        c.vocab_size = j.at("vocab_size").get<int64_t>();
        c.latent_dim = j.at("latent_dim").get<int64_t>();
        c.speaker_dim = j.at("speaker_dim").get<int64_t>();
        c.frames_min = j.at("frames_min").get<int64_t>();
        c.frames_max = j.at("frames_max").get<int64_t>();
        c.speaker_count = j.at("speaker_count").get<int64_t>();
        c.speaker_scale = j.at("speaker_scale").get<double>();
        c.noise_scale = j.at("noise_scale").get<double>();
        c.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("codec config: ") + e.what());
    }
    c.validate();
    return c;
}

inline void save_codec_config(const std::string& path, const CodecConfig& c) {
    detail::write_file(path, codec_config_to_json(c).dump(2) + "\n");
}

inline CodecConfig load_codec_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("codec config: cannot parse " + path + ": " + e.what());
    }
    return codec_config_from_json(j);
}

}  // namespace architts
