// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

#include "laserkv/core.hpp"
#include "laserkv/error.hpp"
#include "laserkv/rng.hpp"
#include "laserkv/trace.hpp"

namespace laserkv {

/**
 * @brief R SimHash functions of K sign bits each, independently drawn for every (layer, head).
 *
 * Projection j of round r in slot s occupies
 * projections[((s * R + r) * K + j) * d .. + d).
 */
class HashTableSet {
public:
    HashTableSet() = default;
    HashTableSet(const ModelShape& shape, std::size_t num_rounds, std::size_t bits_per_hash, std::uint64_t seed)
        : m_shape(shape), m_rounds(num_rounds), m_bits(bits_per_hash), m_seed(seed) {
        LASERKV_CHECK(shape.valid(), ErrorCode::ShapeMismatch, "invalid model shape");
        LASERKV_CHECK(num_rounds >= 1, ErrorCode::InvalidArgument, "hash rounds must be >= 1");
        LASERKV_CHECK(bits_per_hash >= 1 && bits_per_hash <= 64, ErrorCode::InvalidArgument,
                      "bits per hash must lie in [1, 64]");
        const std::size_t d = shape.head_dim;
        m_projections.resize(shape.slots() * num_rounds * bits_per_hash * d);
        CounterRng rng(seed, 0x5348'4153'4855ULL);
        for (std::size_t p = 0; p < shape.slots() * num_rounds * bits_per_hash; ++p) {
            double* row = m_projections.data() + p * d;
            double norm2 = 0.0;
            do {
                norm2 = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    row[i] = rng.next_normal();
                    norm2 += row[i] * row[i];
                }
            } while (norm2 == 0.0);
            const double norm = std::sqrt(norm2);
            for (std::size_t i = 0; i < d; ++i) {
                row[i] /= norm;
            }
        }
    }

    const ModelShape& shape() const noexcept {
        return m_shape;
    }
    std::size_t num_rounds() const noexcept {
        return m_rounds;
    }
    std::size_t bits_per_hash() const noexcept {
        return m_bits;
    }
    std::uint64_t seed() const noexcept {
        return m_seed;
    }
    std::size_t projections_per_slot() const noexcept {
        return m_rounds * m_bits;
    }

    std::span<const double> projection(std::size_t layer, std::size_t head, std::size_t round,
                                       std::size_t bit) const noexcept {
        const std::size_t slot = layer * m_shape.num_heads + head;
        const std::size_t d = m_shape.head_dim;
        return {m_projections.data() + ((slot * m_rounds + round) * m_bits + bit) * d, d};
    }

    friend bool operator==(const HashTableSet&, const HashTableSet&) = default;

private:
    ModelShape m_shape;
    std::size_t m_rounds = 0;
    std::size_t m_bits = 0;
    std::uint64_t m_seed = 0;
    std::vector<double> m_projections;
};

inline HashTableSet build_tables(const ModelShape& shape, std::size_t num_rounds, std::size_t bits_per_hash,
                                 std::uint64_t seed) {
    return HashTableSet(shape, num_rounds, bits_per_hash, seed);
}

/// K-bit SimHash code; bit j is set iff dot(vector, projection_j) >= 0 (zero counts as positive).
template <std::floating_point T>
std::uint64_t hash_code(const HashTableSet& tables, std::span<const T> vector, std::size_t layer, std::size_t head,
                        std::size_t round) {
    LASERKV_CHECK(round < tables.num_rounds(), ErrorCode::OutOfRange, "hash round out of range");
    LASERKV_CHECK(vector.size() == tables.shape().head_dim, ErrorCode::ShapeMismatch, "vector length != head_dim");
    std::uint64_t code = 0;
    for (std::size_t j = 0; j < tables.bits_per_hash(); ++j) {
        const auto proj = tables.projection(layer, head, round, j);
        double acc = 0.0;
        for (std::size_t i = 0; i < vector.size(); ++i) {
            acc += static_cast<double>(vector[i]) * proj[i];
        }
        if (acc >= 0.0) {
            code |= std::uint64_t{1} << j;
        }
    }
    return code;
}

/// One d-vector per (layer, head) slot, in slot-major order.
struct QueryRepresentative {
    ModelShape shape;
    std::vector<double> data;

    std::span<const double> at(std::size_t layer, std::size_t head) const noexcept {
        return {data.data() + (layer * shape.num_heads + head) * shape.head_dim, shape.head_dim};
    }
};

/// Mean of the given query rows per slot, scaled to unit length (left at zero if the mean vanishes).
inline QueryRepresentative query_representative(const KvTrace& trace, std::span<const std::size_t> query_rows) {
    LASERKV_CHECK(!query_rows.empty(), ErrorCode::MalformedWindow, "no query rows");
    const auto& shape = trace.shape();
    QueryRepresentative rep{shape, std::vector<double>(shape.slots() * shape.head_dim, 0.0)};
    for (std::size_t l = 0; l < shape.num_layers; ++l) {
        for (std::size_t h = 0; h < shape.num_heads; ++h) {
            double* out = rep.data.data() + (l * shape.num_heads + h) * shape.head_dim;
            for (auto q : query_rows) {
                LASERKV_CHECK(q < trace.num_tokens(), ErrorCode::OutOfRange, "query row out of range");
                const auto row = trace.query(q, l, h);
                for (std::size_t i = 0; i < shape.head_dim; ++i) {
                    out[i] += row[i];
                }
            }
            double norm2 = 0.0;
            for (std::size_t i = 0; i < shape.head_dim; ++i) {
                norm2 += out[i] * out[i];
            }
            if (norm2 > 0.0) {
                const double norm = std::sqrt(norm2);
                for (std::size_t i = 0; i < shape.head_dim; ++i) {
                    out[i] /= norm;
                }
            }
        }
    }
    return rep;
}

/**
 * @brief Hash codes of every candidate key: R codes per candidate per slot.
 *
 * Storage is exactly |C| * R codes per slot.
 */
struct CandidateCodes {
    std::size_t num_candidates = 0;
    std::size_t num_rounds = 0;
    std::size_t num_slots = 0;
    std::vector<std::uint64_t> codes;  // [slot][candidate][round]

    std::size_t codes_per_slot() const noexcept {
        return num_candidates * num_rounds;
    }
    std::uint64_t at(std::size_t slot, std::size_t candidate, std::size_t round) const noexcept {
        return codes[(slot * num_candidates + candidate) * num_rounds + round];
    }
};

inline CandidateCodes hash_candidates(const HashTableSet& tables, const KvTrace& trace,
                                      std::span<const std::size_t> candidates) {
    const auto& shape = trace.shape();
    LASERKV_CHECK(shape == tables.shape(), ErrorCode::ShapeMismatch, "hash tables built for a different shape");
    CandidateCodes out{candidates.size(), tables.num_rounds(), shape.slots(), {}};
    out.codes.resize(shape.slots() * candidates.size() * tables.num_rounds());
    std::size_t idx = 0;
    for (std::size_t l = 0; l < shape.num_layers; ++l) {
        for (std::size_t h = 0; h < shape.num_heads; ++h) {
            for (auto c : candidates) {
                LASERKV_CHECK(c < trace.num_tokens(), ErrorCode::OutOfRange, "candidate position out of range");
                const auto key = trace.key(c, l, h);
                for (std::size_t r = 0; r < tables.num_rounds(); ++r) {
                    out.codes[idx++] = hash_code(tables, key, l, h, r);
                }
            }
        }
    }
    return out;
}

/// Per-candidate collision fraction with the query representative, averaged over slots.
struct CollisionScoreVector {
    std::vector<double> scores;
    std::vector<std::size_t> candidate_positions;
};

inline CollisionScoreVector collision_scores(const HashTableSet& tables, const KvTrace& trace,
                                             std::span<const std::size_t> candidates,
                                             const QueryRepresentative& query) {
    LASERKV_CHECK(!candidates.empty(), ErrorCode::EmptyCandidates, "collision_scores needs candidates");
    LASERKV_CHECK(query.shape == trace.shape(), ErrorCode::ShapeMismatch, "query representative shape mismatch");
    const auto& shape = trace.shape();
    const std::size_t R = tables.num_rounds();
    const auto codes = hash_candidates(tables, trace, candidates);

    CollisionScoreVector out;
    out.candidate_positions.assign(candidates.begin(), candidates.end());
    out.scores.assign(candidates.size(), 0.0);
    std::vector<std::uint64_t> query_codes(R);
    for (std::size_t l = 0; l < shape.num_layers; ++l) {
        for (std::size_t h = 0; h < shape.num_heads; ++h) {
            const std::size_t slot = l * shape.num_heads + h;
            for (std::size_t r = 0; r < R; ++r) {
                query_codes[r] = hash_code(tables, query.at(l, h), l, h, r);
            }
            for (std::size_t c = 0; c < candidates.size(); ++c) {
                std::size_t hits = 0;
                for (std::size_t r = 0; r < R; ++r) {
                    hits += codes.at(slot, c, r) == query_codes[r] ? 1 : 0;
                }
                out.scores[c] += static_cast<double>(hits) / static_cast<double>(R);
            }
        }
    }
    for (auto& s : out.scores) {
        s /= static_cast<double>(shape.slots());
    }
    return out;
}

}  // namespace laserkv
