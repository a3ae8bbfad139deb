// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace laserkv {

/// SplitMix64 output function (Steele, Lea, Flood 2014).
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Derives an independent seed from a parent seed and a salt.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
    return mix64(mix64(seed) ^ mix64(salt + 0xD1B54A32D192ED03ULL));
}

/**
 * @brief Counter-based generator.
 *
 * Draw i of stream s under seed k is mix64(derive_seed(k, s) + i * 0x9E3779B97F4A7C15).
 * Uniforms take the top 53 bits; normals use Box-Muller on two consecutive draws and
 * keep only the cosine branch, so every normal consumes exactly two counters.
 */
class CounterRng {
public:
    constexpr CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
        : m_key(derive_seed(seed, stream)) {}

    constexpr std::uint64_t at(std::uint64_t counter) const noexcept {
        return mix64(m_key + counter * 0x9E3779B97F4A7C15ULL);
    }

    constexpr std::uint64_t next_u64() noexcept {
        return at(m_counter++);
    }

    /// Uniform in [0, 1).
    double next_uniform() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_normal() noexcept {
        const double u1 = 1.0 - next_uniform();  // (0, 1]
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer in [0, bound) by rejection.
    std::uint64_t next_below(std::uint64_t bound) noexcept {
        if (bound <= 1) {
            return 0;
        }
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
        std::uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return x % bound;
    }

    std::uint64_t counter() const noexcept {
        return m_counter;
    }

private:
    std::uint64_t m_key;
    std::uint64_t m_counter = 0;
};

}  // namespace laserkv
