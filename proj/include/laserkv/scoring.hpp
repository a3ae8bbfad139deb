// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "laserkv/error.hpp"
#include "laserkv/trace.hpp"

namespace laserkv {

/// Aggregate attention mass per candidate, aligned with candidate_positions.
struct ScoreVector {
    std::vector<double> scores;
    std::vector<std::size_t> candidate_positions;
};

inline double dot(std::span<const float> a, std::span<const float> b) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return acc;
}

/**
 * @brief Post-softmax attention mass summed over query rows, heads and layers.
 *
 * For every (layer, head, query row) the scaled dot products query . key / sqrt(d) are
 * softmax-normalized over the candidates at or before the query position (later candidates are
 * masked), then accumulated. Reduction order is fixed: layers, then heads, then query rows, so the
 * result is bitwise reproducible.
 */
inline ScoreVector exact_scores(const KvTrace& trace, std::span<const std::size_t> candidates,
                                std::span<const std::size_t> query_rows) {
    LASERKV_CHECK(!candidates.empty(), ErrorCode::EmptyCandidates, "exact_scores needs candidates");
    LASERKV_CHECK(!query_rows.empty(), ErrorCode::MalformedWindow, "exact_scores needs query rows");
    const std::size_t T = trace.num_tokens();
    for (auto c : candidates) {
        LASERKV_CHECK(c < T, ErrorCode::OutOfRange, "candidate position out of range");
    }
    for (auto q : query_rows) {
        LASERKV_CHECK(q < T, ErrorCode::OutOfRange, "query row out of range");
        const bool any_visible = std::any_of(candidates.begin(), candidates.end(), [q](auto c) { return c <= q; });
        LASERKV_CHECK(any_visible, ErrorCode::MalformedWindow, "query row sees no unmasked candidate");
    }

    const auto& shape = trace.shape();
    const double scale = 1.0 / std::sqrt(static_cast<double>(shape.head_dim));
    const std::size_t n = candidates.size();

    ScoreVector out;
    out.candidate_positions.assign(candidates.begin(), candidates.end());
    out.scores.assign(n, 0.0);
    std::vector<double> logits(n);
    for (std::size_t l = 0; l < shape.num_layers; ++l) {
        for (std::size_t h = 0; h < shape.num_heads; ++h) {
            for (auto q : query_rows) {
                const auto query = trace.query(q, l, h);
                double row_max = -std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < n; ++i) {
                    if (candidates[i] > q) {
                        logits[i] = -std::numeric_limits<double>::infinity();
                        continue;
                    }
                    logits[i] = dot(query, trace.key(candidates[i], l, h)) * scale;
                    row_max = std::max(row_max, logits[i]);
                }
                double denom = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    logits[i] = candidates[i] > q ? 0.0 : std::exp(logits[i] - row_max);
                    denom += logits[i];
                }
                for (std::size_t i = 0; i < n; ++i) {
                    out.scores[i] += logits[i] / denom;
                }
            }
        }
    }
    return out;
}

}  // namespace laserkv
