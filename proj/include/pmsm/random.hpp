#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace pmsm {

using Rng = std::mt19937_64;

/// Uniform integer in [0, n). Rejection sampling keeps it unbiased and, unlike
/// std::uniform_int_distribution, identical across standard libraries.
inline std::uint64_t rand_below(Rng& rng, std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = Rng::max() - (Rng::max() % n + 1) % n;
    std::uint64_t v;
    do {
        v = rng();
    } while (v > limit);
    return v % n;
}

/// Uniform real in [0, 1) from the top 53 bits.
inline double rand_unit(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Standard normal via Box-Muller.
inline double rand_normal(Rng& rng) {
    double u1 = rand_unit(rng);
    while (u1 <= 0.0) u1 = rand_unit(rng);
    const double u2 = rand_unit(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = rand_below(rng, i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace pmsm
