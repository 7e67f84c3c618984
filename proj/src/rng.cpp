#include "quantlab/rng.hpp"

#include <cmath>

namespace quantlab {

double CounterRng::normal(uint64_t counter) const {
    const uint64_t pair = counter >> 1;
    const double u1 = uniform(2 * pair);
    const double u2 = uniform(2 * pair + 1);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.141592653589793238462643383279502884 * u2;
    return (counter & 1) ? radius * std::sin(angle) : radius * std::cos(angle);
}

uint64_t CounterRng::below(uint64_t counter, uint64_t n) const {
    const uint64_t r = bits(counter);
    // multiply-shift: floor(r * n / 2^64) via 128-bit product
    return static_cast<uint64_t>((static_cast<__uint128_t>(r) * n) >> 64);
}

std::vector<size_t> seeded_permutation(uint64_t seed, size_t n) {
    CounterRng rng(seed);
    std::vector<size_t> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = i;
    for (size_t i = n; i > 1; --i) {
        const size_t j = static_cast<size_t>(rng.below(i, i));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace quantlab
