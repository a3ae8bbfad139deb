// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <unordered_set>
#include <vector>

#include "laserkv/core.hpp"
#include "laserkv/error.hpp"
#include "laserkv/lsh.hpp"
#include "laserkv/scoring.hpp"

namespace laserkv {

/**
 * @brief Positions admitted for one block, split by the reason they were kept.
 *
 * Lists are ascending and pairwise disjoint. second_chance holds recall picks that came from
 * the previous block's tail; they are not repeated in exact_picks or lsh_picks.
 */
struct SelectionResult {
    std::vector<std::size_t> anchors;
    std::vector<std::size_t> local_window;
    std::vector<std::size_t> exact_picks;
    std::vector<std::size_t> lsh_picks;
    std::vector<std::size_t> second_chance;
    /// Every available candidate fit in the budget, so nothing was dropped.
    bool uncompressed = false;

    std::size_t size() const noexcept {
        return anchors.size() + local_window.size() + exact_picks.size() + lsh_picks.size() + second_chance.size();
    }
};

struct RecallPicks {
    std::vector<std::size_t> exact_picks;
    std::vector<std::size_t> lsh_picks;
};

/// Indices into `scores` of the k best entries; higher score first, ties to the lower position.
inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::span<const std::size_t> positions,
                                              std::span<const std::size_t> eligible, std::size_t k) {
    std::vector<std::size_t> idx(eligible.begin(), eligible.end());
    k = std::min(k, idx.size());
    auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) {
            return scores[a] > scores[b];
        }
        return positions[a] < positions[b];
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    return idx;
}

/**
 * @brief Hybrid recall selection.
 *
 * The top floor(alpha * b_long) candidates by exact score are taken first; the remaining
 * b_long - floor(alpha * b_long) slots go to the best residual candidates by collision score.
 * With fewer candidates than budget, all of them are kept.
 */
inline RecallPicks exact_lsh_select(const ScoreVector& exact, const CollisionScoreVector& lsh, std::size_t b_long,
                                    Ratio alpha) {
    LASERKV_CHECK(exact.scores.size() == exact.candidate_positions.size() &&
                      lsh.scores.size() == lsh.candidate_positions.size() &&
                      exact.candidate_positions == lsh.candidate_positions,
                  ErrorCode::MisalignedScores, "exact and collision scores are not aligned");
    LASERKV_CHECK(alpha <= Ratio(1, 1), ErrorCode::InvalidArgument, "alpha must lie in [0, 1]");
    const auto& positions = exact.candidate_positions;
    const std::size_t n = positions.size();
    const std::size_t k_exact = alpha.floor_mul(b_long);
    const std::size_t k_lsh = b_long - k_exact;

    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto exact_idx = top_k_indices(exact.scores, positions, all, k_exact);

    std::vector<char> taken(n, 0);
    for (auto i : exact_idx) {
        taken[i] = 1;
    }
    std::vector<std::size_t> residual;
    residual.reserve(n - exact_idx.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i]) {
            residual.push_back(i);
        }
    }
    const auto lsh_idx = top_k_indices(lsh.scores, positions, residual, k_lsh);

    RecallPicks out;
    for (auto i : exact_idx) {
        out.exact_picks.push_back(positions[i]);
    }
    for (auto i : lsh_idx) {
        out.lsh_picks.push_back(positions[i]);
    }
    std::sort(out.exact_picks.begin(), out.exact_picks.end());
    std::sort(out.lsh_picks.begin(), out.lsh_picks.end());
    return out;
}

/**
 * @brief Candidates visible while processing one block.
 *
 * block_positions are the current block's tokens not yet cached; tail_positions are look-back
 * tokens from the previous block that were not admitted there. Both ascending.
 */
struct BlockInput {
    std::size_t block_id = 0;
    std::vector<std::size_t> block_positions;
    std::vector<std::size_t> tail_positions;
    /// Whether this block reserves the anchor share (block 0 only, unless per-block anchors are on).
    bool reserve_anchors = true;
    /// Positions already cached; candidates must not appear here.
    const std::unordered_set<std::size_t>* pool = nullptr;

    /// Tail then block positions: the order scores are aligned to.
    std::vector<std::size_t> candidates() const {
        std::vector<std::size_t> all(tail_positions);
        all.insert(all.end(), block_positions.begin(), block_positions.end());
        return all;
    }
};

struct RecallScores {
    ScoreVector exact;
    CollisionScoreVector lsh;
};

namespace detail {

inline void check_block_input(const BlockInput& in) {
    auto ascending = [](const std::vector<std::size_t>& v) {
        return std::adjacent_find(v.begin(), v.end(), std::greater_equal<>()) == v.end();
    };
    LASERKV_CHECK(ascending(in.block_positions) && ascending(in.tail_positions), ErrorCode::InvalidArgument,
                  "candidate lists must be strictly ascending");
    LASERKV_CHECK(in.tail_positions.empty() || in.block_positions.empty() ||
                      in.tail_positions.back() < in.block_positions.front(),
                  ErrorCode::DuplicatePosition, "look-back tail overlaps the current block");
    if (in.pool != nullptr) {
        for (const auto* list : {&in.block_positions, &in.tail_positions}) {
            for (auto p : *list) {
                LASERKV_CHECK(!in.pool->contains(p), ErrorCode::DuplicatePosition,
                              "candidate " + std::to_string(p) + " is already cached");
            }
        }
    }
}

// Anchors then local window; everything else is returned as the recall candidate set.
inline void take_syntactic(const BlockInput& in, const BudgetPlan& plan, SelectionResult& out,
                           std::vector<std::size_t>& rest) {
    const auto& block = in.block_positions;
    const std::size_t n_anchor = in.reserve_anchors ? std::min(plan.anchor, block.size()) : 0;
    const std::size_t n_local = std::min(plan.local, block.size() - n_anchor);
    out.anchors.assign(block.begin(), block.begin() + static_cast<std::ptrdiff_t>(n_anchor));
    out.local_window.assign(block.end() - static_cast<std::ptrdiff_t>(n_local), block.end());
    rest = in.tail_positions;
    rest.insert(rest.end(), block.begin() + static_cast<std::ptrdiff_t>(n_anchor),
                block.end() - static_cast<std::ptrdiff_t>(n_local));
}

}  // namespace detail

/**
 * @brief Builds one block's selection: anchors, local window, then hybrid recall over the rest.
 *
 * The recall budget is whatever the syntactic set left of plan.total, so a block without an anchor
 * reservation (any block after the first, with global anchors) hands that share to recall. Scores
 * must be aligned to in.candidates().
 */
inline SelectionResult assemble_block_selection(const BlockInput& in, const BudgetPlan& plan,
                                                const RecallScores& scores, Ratio alpha) {
    detail::check_block_input(in);
    const auto candidates = in.candidates();
    LASERKV_CHECK(scores.exact.candidate_positions == candidates && scores.lsh.candidate_positions == candidates,
                  ErrorCode::MisalignedScores, "scores are not aligned to the block candidates");

    SelectionResult out;
    std::vector<std::size_t> rest;
    detail::take_syntactic(in, plan, out, rest);
    out.uncompressed = candidates.size() <= plan.total;
    const std::size_t recall_budget = plan.total - std::min(plan.total, out.anchors.size() + out.local_window.size());

    // Restrict the aligned score vectors to the recall candidates.
    std::unordered_set<std::size_t> rest_set(rest.begin(), rest.end());
    ScoreVector exact;
    CollisionScoreVector lsh;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (rest_set.contains(candidates[i])) {
            exact.candidate_positions.push_back(candidates[i]);
            exact.scores.push_back(scores.exact.scores[i]);
            lsh.candidate_positions.push_back(candidates[i]);
            lsh.scores.push_back(scores.lsh.scores[i]);
        }
    }
    auto picks = exact_lsh_select(exact, lsh, recall_budget, alpha);

    const std::unordered_set<std::size_t> tail(in.tail_positions.begin(), in.tail_positions.end());
    for (auto* list : {&picks.exact_picks, &picks.lsh_picks}) {
        std::vector<std::size_t> kept;
        for (auto p : *list) {
            (tail.contains(p) ? out.second_chance : kept).push_back(p);
        }
        *list = std::move(kept);
    }
    std::sort(out.second_chance.begin(), out.second_chance.end());
    out.exact_picks = std::move(picks.exact_picks);
    out.lsh_picks = std::move(picks.lsh_picks);
    return out;
}

}  // namespace laserkv
