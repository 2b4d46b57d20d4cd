#pragma once

#include <cstdint>
#include <string_view>

namespace spin {

// SplitMix64 (Steele, Lea, Flood). Every random draw in the project goes
// through this generator so that runs reproduce across platforms and across
// reimplementations in other languages.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t operator()() { return next(); }

    // Top 24 bits scaled into [0, 1); exact in f32.
    float uniform_float() {
        return static_cast<float>(next() >> 40) * 0x1.0p-24f;
    }

    // Top 53 bits scaled into [0, 1); exact in f64.
    double uniform_double() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n) by multiply-shift (Lemire, without rejection).
    std::uint64_t uniform_index(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

// One SplitMix64 output for a given input; used to derive sub-seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    SplitMix64 g(x);
    return g.next();
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Per-record seed: hash(run seed, record id).
inline std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view id) {
    return mix64(run_seed ^ mix64(fnv1a64(id)));
}

}  // namespace spin
