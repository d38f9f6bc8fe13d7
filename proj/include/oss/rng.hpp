#pragma once

#include <cstdint>

namespace oss {

/// xoshiro256++ generator seeded through splitmix64. Self-contained so that
/// seeded runs reproduce bit-for-bit across standard libraries and platforms
/// (std::uniform_real_distribution makes no such promise).
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n). n must be > 0.
    uint64_t uniform_int(uint64_t n) {
        // Rejection sampling keeps the draw exactly uniform.
        const uint64_t threshold = -n % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    bool bernoulli(double p) { return uniform01() < p; }

    /// Derive a decorrelated child seed from (seed, stream ids).
    static uint64_t mix(uint64_t a, uint64_t b, uint64_t c = 0) {
        uint64_t x = a;
        x = splitmix64(x) ^ b;
        x = splitmix64(x) ^ c;
        return splitmix64(x);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t splitmix64(uint64_t& state) {
        uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t s_[4];
};

} // namespace oss
