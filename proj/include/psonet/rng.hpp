#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace psonet {

// xoshiro256++ with splitmix64 seeding. The state is four plain u64 words,
// which keeps checkpoint/resume serialization trivial and the stream
// identical across platforms (std distributions are not portable).
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : state_) w = splitmix64(x);
    }

    uint64_t next() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [lo, hi], inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(bounded(span));
    }

    // Box-Muller without a cached second value; stateless apart from the
    // two underlying draws, so resume never depends on a hidden spare.
    double normal() {
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Independent substream; salting keeps per-entity draws stable even if
    // generation order around them changes.
    Rng fork(uint64_t salt) const {
        uint64_t x = state_[0] ^ (salt * 0x9e3779b97f4a7c15ULL);
        Rng r;
        for (auto& w : r.state_) w = splitmix64(x);
        return r;
    }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t bounded(uint64_t span) {
        // Lemire's multiply-shift; unbiased enough for simulation use.
        unsigned __int128 m = static_cast<unsigned __int128>(next()) * span;
        return static_cast<uint64_t>(m >> 64);
    }

    std::array<uint64_t, 4> state_{};
};

} // namespace psonet
