#pragma once

#include <cstdint>
#include <random>

namespace fewflow {

using Rng = std::mt19937_64;

// splitmix64; used to derive well-mixed child seeds from (seed, stream, index)
// tuples so episode/batch streams are reproducible and order-independent.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return mix64(mix64(seed ^ 0x5851f42d4c957f2dULL) + mix64(a) + 3 * mix64(b));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
    return Rng(derive_seed(seed, a, b));
}

}  // namespace fewflow
