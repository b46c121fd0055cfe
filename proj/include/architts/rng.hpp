#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace architts {

namespace detail {

// SplitMix64 step, used to mix seed material into stream seeds.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace detail

// One independent random stream. All randomness in the project flows
// through streams derived from a single root seed, so any run is fully
// reproducible from that one number.
//
// mt19937_64 is specified exactly by the standard; the normal and uniform
// transforms below are implemented here (rather than via <random>
// distributions) because distribution output sequences are
// implementation-defined and the project makes bit-reproducibility claims.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1): 53-bit mantissa construction.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be >= 1.
    uint64_t uniform_int(uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    // Standard normal via Box-Muller. Pairs are cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    std::vector<double> normals(size_t n) {
        std::vector<double> out(n);
        for (auto& v : out) v = normal();
        return out;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Derives named child streams from a root seed. Streams are independent of
// the order in which they are requested: the seed of stream (tag, a, b)
// depends only on the root seed, the tag and the indices.
class RootRng {
public:
    explicit RootRng(uint64_t root_seed) : root_(root_seed) {}

    uint64_t root_seed() const { return root_; }

    uint64_t stream_seed(std::string_view tag, uint64_t a = 0, uint64_t b = 0) const {
        uint64_t s = root_ ^ detail::fnv1a(tag);
        uint64_t mixed = detail::splitmix64(s);
        s ^= a * 0x9e3779b97f4a7c15ull;
        mixed ^= detail::splitmix64(s);
        s ^= b * 0xc2b2ae3d27d4eb4full;
        mixed ^= detail::splitmix64(s);
        return mixed;
    }

    RngStream stream(std::string_view tag, uint64_t a = 0, uint64_t b = 0) const {
        return RngStream(stream_seed(tag, a, b));
    }

private:
    uint64_t root_;
};

}  // namespace architts
