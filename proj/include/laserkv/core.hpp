// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "laserkv/error.hpp"

namespace laserkv {

/**
 * @brief Model geometry: number of layers, heads per layer and head dimension.
 */
struct ModelShape {
    std::size_t num_layers = 1;
    std::size_t num_heads = 1;
    std::size_t head_dim = 1;

    std::size_t slots() const noexcept {
        return num_layers * num_heads;
    }
    bool valid() const noexcept {
        return num_layers >= 1 && num_heads >= 1 && head_dim >= 1;
    }
    friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/**
 * @brief Non-negative exact rational used for the compression ratio and the hybrid ratio.
 *
 * Token counts derived from a Ratio are computed with integer arithmetic only, so
 * floor(r * x) is exact for decimal inputs such as 0.3 that have no binary representation.
 */
class Ratio {
public:
    constexpr Ratio() = default;
    constexpr Ratio(std::uint64_t num, std::uint64_t den) : m_num(num), m_den(den) {
        if (den == 0) {
            throw Error(ErrorCode::InvalidArgument, "Ratio denominator must be non-zero");
        }
        const auto g = std::gcd(m_num, m_den);
        if (g > 1) {
            m_num /= g;
            m_den /= g;
        }
    }

    /// Nearest point on a 1e-9 grid; callers that need exact decimals should use parse().
    static Ratio from_double(double value) {
        if (!(value >= 0.0) || !std::isfinite(value) || value > 1.0e9) {
            throw Error(ErrorCode::InvalidArgument, "ratio must be a finite non-negative number");
        }
        constexpr std::uint64_t grid = 1'000'000'000ULL;
        return Ratio(static_cast<std::uint64_t>(std::llround(value * static_cast<double>(grid))), grid);
    }

    /// Parses a plain decimal ("0.25", "1", ".5"). Exponents are not accepted.
    static std::optional<Ratio> parse(std::string_view text) {
        if (text.empty()) {
            return std::nullopt;
        }
        std::uint64_t num = 0;
        std::uint64_t den = 1;
        bool seen_dot = false;
        bool seen_digit = false;
        for (char ch : text) {
            if (ch == '.') {
                if (seen_dot) {
                    return std::nullopt;
                }
                seen_dot = true;
                continue;
            }
            if (ch < '0' || ch > '9') {
                return std::nullopt;
            }
            seen_digit = true;
            if (num > 100'000'000'000'000'000ULL || (seen_dot && den >= 1'000'000'000'000'000'000ULL)) {
                return std::nullopt;
            }
            num = num * 10 + static_cast<std::uint64_t>(ch - '0');
            if (seen_dot) {
                den *= 10;
            }
        }
        if (!seen_digit) {
            return std::nullopt;
        }
        return Ratio(num, den);
    }

    constexpr std::uint64_t num() const noexcept {
        return m_num;
    }
    constexpr std::uint64_t den() const noexcept {
        return m_den;
    }
    double to_double() const noexcept {
        return static_cast<double>(m_num) / static_cast<double>(m_den);
    }

    /// floor(this * value), exact.
    std::size_t floor_mul(std::size_t value) const noexcept {
        const unsigned __int128 prod = static_cast<unsigned __int128>(m_num) * value;
        return static_cast<std::size_t>(prod / m_den);
    }

    std::string to_string() const {
        char buf[64];
        auto res = std::to_chars(buf, buf + sizeof(buf), to_double());
        return std::string(buf, res.ptr);
    }

    friend bool operator==(const Ratio& a, const Ratio& b) noexcept {
        return a.m_num == b.m_num && a.m_den == b.m_den;
    }
    friend std::strong_ordering operator<=>(const Ratio& a, const Ratio& b) noexcept {
        const unsigned __int128 lhs = static_cast<unsigned __int128>(a.m_num) * b.m_den;
        const unsigned __int128 rhs = static_cast<unsigned __int128>(b.m_num) * a.m_den;
        return lhs <=> rhs;
    }

private:
    std::uint64_t m_num = 0;
    std::uint64_t m_den = 1;
};

/**
 * @brief Tunables of the block-wise compressor.
 *
 * lookback defaults to the local-window share floor(B/n) when unset.
 */
struct CompressionConfig {
    std::size_t block_size = 4096;
    Ratio compression_ratio{1, 4};
    std::size_t protection_divisor = 4;
    Ratio alpha{3, 4};
    std::size_t hash_rounds = 64;
    std::size_t hash_bits = 8;
    std::optional<std::size_t> lookback;
    std::size_t scoring_window = 32;
    std::uint64_t rng_seed = 0;
    /// Ablation: reserve the anchor share at the start of every block instead of once per sequence.
    bool per_block_anchors = false;
};

/**
 * @brief Partition of a per-block budget into anchor, local-window and recall shares.
 */
struct BudgetPlan {
    std::size_t total = 0;
    std::size_t anchor = 0;
    std::size_t local = 0;
    std::size_t recall = 0;

    friend bool operator==(const BudgetPlan&, const BudgetPlan&) = default;
};

enum class SelectionReason : std::uint8_t { Anchor, LocalWindow, ExactTopK, LshTopK, SecondChance };

inline std::string_view to_string(SelectionReason reason) {
    switch (reason) {
    case SelectionReason::Anchor: return "anchor";
    case SelectionReason::LocalWindow: return "local";
    case SelectionReason::ExactTopK: return "exact";
    case SelectionReason::LshTopK: return "lsh";
    case SelectionReason::SecondChance: return "second_chance";
    }
    return "unknown";
}

/**
 * @brief One cached token: its key/value rows for every (layer, head) slot plus provenance.
 *
 * key and value are laid out (layer, head, dim), i.e. slot-major with head_dim contiguous.
 */
struct TokenEntry {
    std::size_t position = 0;
    std::vector<float> key;
    std::vector<float> value;
    std::size_t block_id = 0;
    SelectionReason reason = SelectionReason::Anchor;

    friend bool operator==(const TokenEntry&, const TokenEntry&) = default;
};

/// B = floor(2 r S L / (S + L)): the compression ratio applied to the harmonic mean of
/// block size and context length.
inline std::size_t effective_budget(Ratio r, std::size_t s_block, std::size_t l_total) {
    LASERKV_CHECK(s_block >= 1 && l_total >= 1, ErrorCode::InvalidArgument,
                  "block size and context length must be positive");
    using u128 = unsigned __int128;
    const u128 numerator = u128{2} * r.num() * s_block * l_total;
    const u128 denominator = static_cast<u128>(r.den()) * (static_cast<u128>(s_block) + l_total);
    return static_cast<std::size_t>(numerator / denominator);
}

inline BudgetPlan partition_budget(std::size_t b, std::size_t n) {
    LASERKV_CHECK(n >= 2, ErrorCode::InvalidArgument, "protection divisor must be >= 2");
    const std::size_t share = b / n;
    return BudgetPlan{b, share, share, b - 2 * share};
}

enum class ConfigErrorCode {
    InvalidShape,
    EmptyContext,
    ZeroBlockSize,
    DivisorTooSmall,
    BlockSmallerThanDivisor,
    RatioOutOfRange,
    AlphaOutOfRange,
    ZeroHashRounds,
    HashBitsOutOfRange,
    ZeroScoringWindow,
};

inline std::string_view to_string(ConfigErrorCode code) {
    switch (code) {
    case ConfigErrorCode::InvalidShape: return "InvalidShape";
    case ConfigErrorCode::EmptyContext: return "EmptyContext";
    case ConfigErrorCode::ZeroBlockSize: return "ZeroBlockSize";
    case ConfigErrorCode::DivisorTooSmall: return "DivisorTooSmall";
    case ConfigErrorCode::BlockSmallerThanDivisor: return "BlockSmallerThanDivisor";
    case ConfigErrorCode::RatioOutOfRange: return "RatioOutOfRange";
    case ConfigErrorCode::AlphaOutOfRange: return "AlphaOutOfRange";
    case ConfigErrorCode::ZeroHashRounds: return "ZeroHashRounds";
    case ConfigErrorCode::HashBitsOutOfRange: return "HashBitsOutOfRange";
    case ConfigErrorCode::ZeroScoringWindow: return "ZeroScoringWindow";
    }
    return "Unknown";
}

struct ConfigError {
    ConfigErrorCode code;
    std::string message;
};

/**
 * @brief A configuration that passed validation, with its derived budget attached.
 */
struct ValidatedConfig {
    CompressionConfig config;
    ModelShape shape;
    std::size_t total_tokens = 0;
    std::size_t budget = 0;
    BudgetPlan plan;
    std::size_t lookback = 0;
    std::vector<std::string> warnings;
};

struct ValidationResult {
    std::optional<ValidatedConfig> value;
    std::vector<ConfigError> errors;

    bool ok() const noexcept {
        return value.has_value();
    }
    bool has(ConfigErrorCode code) const noexcept {
        for (const auto& e : errors) {
            if (e.code == code) {
                return true;
            }
        }
        return false;
    }
};

/// Collects every violated constraint rather than stopping at the first.
inline ValidationResult validate_config(const CompressionConfig& cfg, const ModelShape& shape, std::size_t l_total) {
    ValidationResult result;
    auto fail = [&](ConfigErrorCode code, std::string msg) {
        result.errors.push_back(ConfigError{code, std::move(msg)});
    };
    if (!shape.valid()) {
        fail(ConfigErrorCode::InvalidShape, "num_layers, num_heads and head_dim must all be >= 1");
    }
    if (l_total == 0) {
        fail(ConfigErrorCode::EmptyContext, "context must contain at least one token");
    }
    if (cfg.block_size == 0) {
        fail(ConfigErrorCode::ZeroBlockSize, "block_size must be >= 1");
    }
    if (cfg.protection_divisor < 2) {
        fail(ConfigErrorCode::DivisorTooSmall, "divisor must be >= 2");
    } else if (cfg.block_size < cfg.protection_divisor) {
        fail(ConfigErrorCode::BlockSmallerThanDivisor, "block_size must be >= divisor");
    }
    if (cfg.compression_ratio.num() == 0 || cfg.compression_ratio > Ratio(1, 1)) {
        fail(ConfigErrorCode::RatioOutOfRange, "ratio must lie in (0, 1]");
    }
    if (cfg.alpha > Ratio(1, 1)) {
        fail(ConfigErrorCode::AlphaOutOfRange, "alpha must lie in [0, 1]");
    }
    if (cfg.hash_rounds == 0) {
        fail(ConfigErrorCode::ZeroHashRounds, "hash_rounds must be >= 1");
    }
    if (cfg.hash_bits == 0 || cfg.hash_bits > 64) {
        fail(ConfigErrorCode::HashBitsOutOfRange, "hash_bits must lie in [1, 64]");
    }
    if (cfg.scoring_window == 0) {
        fail(ConfigErrorCode::ZeroScoringWindow, "scoring_window must be >= 1");
    }
    if (!result.errors.empty()) {
        return result;
    }

    ValidatedConfig v;
    v.config = cfg;
    v.shape = shape;
    v.total_tokens = l_total;
    v.budget = effective_budget(cfg.compression_ratio, cfg.block_size, l_total);
    v.plan = partition_budget(v.budget, cfg.protection_divisor);
    v.lookback = cfg.lookback.value_or(v.plan.local);
    if (v.plan.recall == 0) {
        v.warnings.emplace_back("recall budget is zero: selection degenerates to anchors plus local window");
    }
    result.value = std::move(v);
    return result;
}

}  // namespace laserkv
