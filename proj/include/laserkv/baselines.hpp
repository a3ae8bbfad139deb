// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "laserkv/core.hpp"
#include "laserkv/error.hpp"
#include "laserkv/selection.hpp"

namespace laserkv {

enum class PolicyKind { LaserKv, ExactOnly, LshOnly, SlidingWindow, RecursiveSummary };

inline std::string_view to_string(PolicyKind kind) {
    switch (kind) {
    case PolicyKind::LaserKv: return "laser";
    case PolicyKind::ExactOnly: return "exact";
    case PolicyKind::LshOnly: return "lsh";
    case PolicyKind::SlidingWindow: return "window";
    case PolicyKind::RecursiveSummary: return "recursive";
    }
    return "unknown";
}

inline std::optional<PolicyKind> parse_policy(std::string_view name) {
    for (auto kind : {PolicyKind::LaserKv, PolicyKind::ExactOnly, PolicyKind::LshOnly, PolicyKind::SlidingWindow,
                      PolicyKind::RecursiveSummary}) {
        if (name == to_string(kind)) {
            return kind;
        }
    }
    return std::nullopt;
}

/**
 * @brief Which selection policy a pipeline run uses, plus its policy-specific knobs.
 *
 * summary_size only applies to RecursiveSummary; when unset the pipeline sizes the summary to the
 * accumulative policy's final budget (B times the number of blocks) so runs stay iso-memory.
 */
struct PolicyHandle {
    PolicyKind kind = PolicyKind::LaserKv;
    std::optional<std::size_t> summary_size;

    static PolicyHandle laser() {
        return {PolicyKind::LaserKv, std::nullopt};
    }
    static PolicyHandle exact_only() {
        return {PolicyKind::ExactOnly, std::nullopt};
    }
    static PolicyHandle lsh_only() {
        return {PolicyKind::LshOnly, std::nullopt};
    }
    static PolicyHandle sliding_window() {
        return {PolicyKind::SlidingWindow, std::nullopt};
    }
    static PolicyHandle recursive(std::optional<std::size_t> size = std::nullopt) {
        return {PolicyKind::RecursiveSummary, size};
    }

    /// Hybrid ratio this policy applies to the recall budget.
    Ratio alpha(Ratio configured) const noexcept {
        switch (kind) {
        case PolicyKind::ExactOnly: return Ratio(1, 1);
        case PolicyKind::LshOnly: return Ratio(0, 1);
        default: return configured;
        }
    }
    bool needs_exact(Ratio configured) const noexcept {
        return kind == PolicyKind::RecursiveSummary ||
               ((kind == PolicyKind::LaserKv || kind == PolicyKind::ExactOnly) && alpha(configured).num() != 0);
    }
    bool needs_lsh(Ratio configured) const noexcept {
        return (kind == PolicyKind::LaserKv || kind == PolicyKind::LshOnly) && alpha(configured) < Ratio(1, 1);
    }
};

namespace detail {

inline SelectionResult as_selection(RecallPicks picks) {
    SelectionResult out;
    out.exact_picks = std::move(picks.exact_picks);
    out.lsh_picks = std::move(picks.lsh_picks);
    return out;
}

}  // namespace detail

/// Greedy heavy-hitter Top-K: the hybrid policy with alpha = 1.
inline SelectionResult exact_only_select(const ScoreVector& exact, const CollisionScoreVector& lsh,
                                         std::size_t b_long) {
    return detail::as_selection(exact_lsh_select(exact, lsh, b_long, Ratio(1, 1)));
}

/// Pure collision-probability ranking: the hybrid policy with alpha = 0.
inline SelectionResult lsh_only_select(const ScoreVector& exact, const CollisionScoreVector& lsh,
                                       std::size_t b_long) {
    return detail::as_selection(exact_lsh_select(exact, lsh, b_long, Ratio(0, 1)));
}

/// Attention sinks plus the most recent tokens of the block; the recall share stays unused.
inline SelectionResult sliding_window_select(const BudgetPlan& plan, const BlockInput& in) {
    detail::check_block_input(in);
    SelectionResult out;
    std::vector<std::size_t> rest;
    detail::take_syntactic(in, plan, out, rest);
    if (in.tail_positions.size() + in.block_positions.size() <= plan.total) {
        // Everything fits: keep the whole block, the remainder counted as window.
        out.uncompressed = true;
        out.local_window.clear();
        for (auto p : in.block_positions) {
            if (!std::binary_search(out.anchors.begin(), out.anchors.end(), p)) {
                out.local_window.push_back(p);
            }
        }
        out.second_chance = in.tail_positions;
    }
    return out;
}

using SummaryState = std::vector<std::size_t>;

struct RecursiveStep {
    /// Block tokens that entered the summary (as exact_picks).
    SelectionResult admitted;
    /// Previously summarized positions dropped in this step.
    std::vector<std::size_t> evicted;
    SummaryState next;
};

/**
 * @brief One step of a recursive fixed-size summary: keep the top fixed_size of (summary + block).
 *
 * Unlike the accumulative pool, earlier survivors compete again every block and can be evicted.
 * Scores must be aligned to summary followed by block.
 */
inline RecursiveStep recursive_summary_select(const SummaryState& summary, std::span<const std::size_t> block,
                                              const ScoreVector& scores, std::size_t fixed_size) {
    std::vector<std::size_t> expected(summary.begin(), summary.end());
    expected.insert(expected.end(), block.begin(), block.end());
    LASERKV_CHECK(scores.candidate_positions == expected && scores.scores.size() == expected.size(),
                  ErrorCode::MisalignedScores, "scores must be aligned to summary + block");

    std::vector<std::size_t> all(expected.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto keep = top_k_indices(scores.scores, scores.candidate_positions, all, fixed_size);

    RecursiveStep step;
    for (auto i : keep) {
        step.next.push_back(expected[i]);
    }
    std::sort(step.next.begin(), step.next.end());
    for (auto p : summary) {
        if (!std::binary_search(step.next.begin(), step.next.end(), p)) {
            step.evicted.push_back(p);
        }
    }
    for (auto p : block) {
        if (std::binary_search(step.next.begin(), step.next.end(), p)) {
            step.admitted.exact_picks.push_back(p);
        }
    }
    step.admitted.uncompressed = expected.size() <= fixed_size;
    return step;
}

}  // namespace laserkv
