#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cmtr {

// splitmix64 finalizer; used to derive independent seeds from (seed, tag) pairs
// so that adding a consumer never shifts another consumer's stream.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_str(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
    return mix64(root ^ hash_str(tag));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t a) {
    return mix64(derive_seed(root, tag) ^ mix64(a));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t a,
                                 std::uint64_t b) {
    return mix64(derive_seed(root, tag, a) ^ mix64(b ^ 0x5851f42d4c957f2dULL));
}

using Rng = std::mt19937_64;

// Normal(0, sigma) resampled until within +/-2 sigma.
inline double truncated_normal(Rng& rng, double sigma) {
    std::normal_distribution<double> dist(0.0, sigma);
    for (;;) {
        double x = dist(rng);
        if (x >= -2.0 * sigma && x <= 2.0 * sigma) return x;
    }
}

}  // namespace cmtr
