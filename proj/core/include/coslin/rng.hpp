#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace coslin {

// Deterministic draws on top of std::mt19937_64 (the engine itself is fully
// specified by the standard). We avoid std::uniform_real_distribution and
// std::normal_distribution because their output is implementation-defined;
// these mappings produce identical streams on every platform.

/// Uniform double in [0, 1) with 53 random mantissa bits.
inline double uniform_unit(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

/// Uniform double in [lo, hi).
inline double uniform(std::mt19937_64& gen, double lo, double hi) {
    return lo + (hi - lo) * uniform_unit(gen);
}

/// Standard normal via Box-Muller; consumes two draws per call.
inline double normal(std::mt19937_64& gen) {
    const double u1 = (static_cast<double>(gen() >> 11) + 1.0) * 0x1.0p-53; // (0, 1]
    const double u2 = uniform_unit(gen);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

} // namespace coslin
