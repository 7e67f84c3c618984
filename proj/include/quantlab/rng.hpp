#pragma once

#include <cstdint>
#include <vector>

#include "quantlab/common.hpp"

namespace quantlab {

// Counter-based generator: value(i) = splitmix64 finalizer applied to
// seed + i * golden-ratio increment. Stateless per draw, so any element of a
// stream can be computed independently and results do not depend on call
// order, thread count, or platform. All floating-point derivations below use
// only IEEE-754 arithmetic plus libm sqrt/log/cos.
struct CounterRng {
    uint64_t seed = 0;

    explicit CounterRng(uint64_t s) : seed(s) {}

    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t bits(uint64_t counter) const {
        return mix(seed + counter * 0x9e3779b97f4a7c15ull);
    }

    // Uniform in (0, 1]; never 0 so it is safe under log().
    double uniform(uint64_t counter) const {
        return static_cast<double>((bits(counter) >> 11) + 1) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller on counters (2k, 2k+1).
    double normal(uint64_t counter) const;

    // Uniform integer in [0, n); n >= 1. Uses 64-bit multiply-shift reduction.
    uint64_t below(uint64_t counter, uint64_t n) const;
};

// Derives an independent stream for a named sub-component of a seeded object.
inline uint64_t sub_seed(uint64_t seed, const std::string& name) {
    return CounterRng::mix(seed ^ fnv1a64(name));
}

inline uint64_t sub_seed(uint64_t seed, uint64_t salt) {
    return CounterRng::mix(seed ^ CounterRng::mix(salt + 0x9e3779b97f4a7c15ull));
}

// Seeded Fisher-Yates; deterministic for a fixed (seed, n).
std::vector<size_t> seeded_permutation(uint64_t seed, size_t n);

}  // namespace quantlab
