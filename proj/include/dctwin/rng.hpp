#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dctwin {

// Counter-based generator: the value depends only on (seed, counter), so
// state snapshots stay plain values and replays are bit-identical.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix(std::uint64_t seed, std::uint64_t counter, std::uint64_t stream = 0) {
    return splitmix64(splitmix64(seed ^ (stream * 0xD1B54A32D192ED03ULL)) ^ counter);
}

/// Uniform in the open interval (0,1).
inline double unit_uniform(std::uint64_t bits) {
    return (static_cast<double>(bits >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

inline double counter_gaussian(std::uint64_t seed, std::uint64_t counter, std::uint64_t stream = 0) {
    const double u1 = unit_uniform(mix(seed, 2 * counter, stream));
    const double u2 = unit_uniform(mix(seed, 2 * counter + 1, stream));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace dctwin
