#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "wcmorph/tensor.hpp"

namespace wcm {

using Rng = std::mt19937_64;

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Derive an independent stream seed from one master seed and a stage tag,
// so every stage draws from its own deterministic stream.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = seed ^ fnv1a64(tag);
    // splitmix64 finalizer
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

inline void fill_gaussian(Tensor& t, double mean, double sigma, Rng& rng) {
    std::normal_distribution<double> dist(mean, sigma);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
}

inline double uniform_in(Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(rng);
}

} // namespace wcm
