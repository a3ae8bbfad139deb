// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "laserkv/baselines.hpp"
#include "laserkv/core.hpp"
#include "laserkv/error.hpp"
#include "laserkv/lsh.hpp"
#include "laserkv/scoring.hpp"
#include "laserkv/selection.hpp"
#include "laserkv/trace.hpp"

namespace laserkv {

/**
 * @brief Append-only compressed cache.
 *
 * Entries are only ever appended; block ids along the list are non-decreasing and no position
 * appears twice.
 */
class MemoryPool {
public:
    void append(TokenEntry entry) {
        LASERKV_CHECK(!m_positions.contains(entry.position), ErrorCode::DuplicatePosition,
                      "position " + std::to_string(entry.position) + " already cached");
        LASERKV_CHECK(m_entries.empty() || m_entries.back().block_id <= entry.block_id, ErrorCode::PolicyViolation,
                      "block ids must be non-decreasing");
        if (m_entries.empty() || m_entries.back().block_id != entry.block_id) {
            ++m_admitted_blocks;
        }
        m_positions.insert(entry.position);
        m_entries.push_back(std::move(entry));
    }

    /// Appends one block's selection in reason order: anchors, window, exact, lsh, second chance.
    void admit(std::size_t block_id, const SelectionResult& sel, const KvTrace& trace) {
        auto add = [&](const std::vector<std::size_t>& list, SelectionReason reason) {
            for (auto p : list) {
                const auto k = trace.token_keys(p);
                const auto v = trace.token_values(p);
                append(TokenEntry{p, {k.begin(), k.end()}, {v.begin(), v.end()}, block_id, reason});
            }
        };
        add(sel.anchors, SelectionReason::Anchor);
        add(sel.local_window, SelectionReason::LocalWindow);
        add(sel.exact_picks, SelectionReason::ExactTopK);
        add(sel.lsh_picks, SelectionReason::LshTopK);
        add(sel.second_chance, SelectionReason::SecondChance);
    }

    const std::vector<TokenEntry>& entries() const noexcept {
        return m_entries;
    }
    std::size_t size() const noexcept {
        return m_entries.size();
    }
    bool contains(std::size_t position) const noexcept {
        return m_positions.contains(position);
    }
    const std::unordered_set<std::size_t>& positions() const noexcept {
        return m_positions;
    }
    std::size_t admitted_blocks() const noexcept {
        return m_admitted_blocks;
    }

private:
    std::vector<TokenEntry> m_entries;
    std::size_t m_admitted_blocks = 0;
    std::unordered_set<std::size_t> m_positions;
};

struct BlockReport {
    std::size_t block_id = 0;
    std::size_t candidates = 0;
    std::size_t admitted_anchor = 0;
    std::size_t admitted_local = 0;
    std::size_t admitted_exact = 0;
    std::size_t admitted_lsh = 0;
    std::size_t admitted_second_chance = 0;
    /// Only the recursive summary evicts.
    std::size_t evicted = 0;
    std::size_t pool_size = 0;
    std::int64_t elapsed_us = 0;
    bool uncompressed = false;

    std::size_t admitted() const noexcept {
        return admitted_anchor + admitted_local + admitted_exact + admitted_lsh + admitted_second_chance;
    }
};

inline nlohmann::ordered_json to_json(const BlockReport& r) {
    return nlohmann::ordered_json{
        {"block_id", r.block_id},
        {"candidates", r.candidates},
        {"admitted_anchor", r.admitted_anchor},
        {"admitted_local", r.admitted_local},
        {"admitted_exact", r.admitted_exact},
        {"admitted_lsh", r.admitted_lsh},
        {"admitted_second_chance", r.admitted_second_chance},
        {"pool_size", r.pool_size},
        {"elapsed_us", r.elapsed_us},
        {"uncompressed", r.uncompressed},
        {"evicted", r.evicted},
    };
}

inline void write_block_reports(std::ostream& out, const std::vector<BlockReport>& reports) {
    for (const auto& r : reports) {
        out << to_json(r).dump() << '\n';
    }
}

struct PipelineResult {
    MemoryPool pool;
    std::vector<BlockReport> reports;
    /// Per-block admissions; replaying them in order reproduces the pool.
    std::vector<SelectionResult> selections;
    std::size_t budget = 0;
    BudgetPlan plan;
    std::size_t num_blocks = 0;
};

namespace detail {

inline void check_selection(const SelectionResult& sel, const std::vector<std::size_t>& candidates,
                            const std::unordered_set<std::size_t>& pool) {
    std::unordered_set<std::size_t> allowed(candidates.begin(), candidates.end());
    std::unordered_set<std::size_t> seen;
    for (const auto* list : {&sel.anchors, &sel.local_window, &sel.exact_picks, &sel.lsh_picks, &sel.second_chance}) {
        for (auto p : *list) {
            LASERKV_CHECK(allowed.contains(p), ErrorCode::PolicyViolation,
                          "policy selected non-candidate position " + std::to_string(p));
            LASERKV_CHECK(!pool.contains(p) && seen.insert(p).second, ErrorCode::PolicyViolation,
                          "policy selected position " + std::to_string(p) + " twice");
        }
    }
}

inline std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> v;
    v.reserve(end - begin);
    for (std::size_t p = begin; p < end; ++p) {
        v.push_back(p);
    }
    return v;
}

inline ValidatedConfig validated_or_throw(const CompressionConfig& cfg, const ModelShape& shape, std::size_t T) {
    auto res = validate_config(cfg, shape, T);
    if (!res.ok()) {
        std::string msg;
        for (const auto& e : res.errors) {
            msg += std::string(msg.empty() ? "" : "; ") + std::string(to_string(e.code)) + " (" + e.message + ")";
        }
        throw Error(ErrorCode::InvalidConfig, msg);
    }
    return std::move(*res.value);
}

inline PipelineResult run_recursive(const KvTrace& trace, const ValidatedConfig& v, const PolicyHandle& policy) {
    const std::size_t T = trace.num_tokens();
    const std::size_t S = v.config.block_size;
    PipelineResult result;
    result.budget = v.budget;
    result.plan = v.plan;
    result.num_blocks = (T + S - 1) / S;
    const std::size_t fixed_size = policy.summary_size.value_or(v.budget * result.num_blocks);

    SummaryState summary;
    std::unordered_map<std::size_t, std::size_t> admitted_in;
    for (std::size_t t = 0; t < result.num_blocks; ++t) {
        const auto started = std::chrono::steady_clock::now();
        const std::size_t start = t * S;
        const std::size_t end = std::min(T, start + S);
        const auto block = iota_range(start, end);
        std::vector<std::size_t> candidates(summary);
        candidates.insert(candidates.end(), block.begin(), block.end());
        const std::size_t rows = std::min(v.config.scoring_window, end - start);
        const auto query_rows = iota_range(end - rows, end);
        const auto scores = exact_scores(trace, candidates, query_rows);
        auto step = recursive_summary_select(summary, block, scores, fixed_size);
        for (auto p : step.admitted.exact_picks) {
            admitted_in[p] = t;
        }
        BlockReport report;
        report.block_id = t;
        report.candidates = candidates.size();
        report.admitted_exact = step.admitted.exact_picks.size();
        report.evicted = step.evicted.size();
        report.pool_size = step.next.size();
        report.uncompressed = step.admitted.uncompressed;
        report.elapsed_us = std::chrono::duration_cast<std::chrono::microseconds>(
                                std::chrono::steady_clock::now() - started)
                                .count();
        result.reports.push_back(report);
        result.selections.push_back(std::move(step.admitted));
        summary = std::move(step.next);
    }

    // The surviving summary becomes the cache, ordered by admission block then position.
    std::vector<std::size_t> order(summary);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return admitted_in.at(a) < admitted_in.at(b); });
    for (auto p : order) {
        const auto k = trace.token_keys(p);
        const auto val = trace.token_values(p);
        result.pool.append(TokenEntry{p, {k.begin(), k.end()}, {val.begin(), val.end()}, admitted_in.at(p),
                                      SelectionReason::ExactTopK});
    }
    return result;
}

}  // namespace detail

/**
 * @brief Runs block-wise compression over a trace.
 *
 * Blocks are consecutive block_size slices (the last may be short) and all share the budget
 * B = effective_budget(r, block_size, T). Block t is scored over its own tokens plus the uncached
 * look-back tail of block t-1; query rows are the block's last scoring_window positions. Selected
 * tokens are appended to the pool and never revisited, except under RecursiveSummary, which keeps a
 * re-pruned summary and returns it as the final pool.
 */
inline PipelineResult run_pipeline(const KvTrace& trace, const ValidatedConfig& v, const PolicyHandle& policy) {
    LASERKV_CHECK(v.shape == trace.shape() && v.total_tokens == trace.num_tokens(), ErrorCode::ShapeMismatch,
                  "config was validated for a different trace shape");
    if (policy.kind == PolicyKind::RecursiveSummary) {
        return detail::run_recursive(trace, v, policy);
    }
    const auto& cfg = v.config;
    const std::size_t T = trace.num_tokens();
    const std::size_t S = cfg.block_size;
    const Ratio alpha = policy.alpha(cfg.alpha);
    const bool need_exact = policy.kind != PolicyKind::SlidingWindow && policy.needs_exact(cfg.alpha);
    const bool need_lsh = policy.kind != PolicyKind::SlidingWindow && policy.needs_lsh(cfg.alpha);

    PipelineResult result;
    result.budget = v.budget;
    result.plan = v.plan;
    result.num_blocks = (T + S - 1) / S;
    std::optional<HashTableSet> tables;
    if (need_lsh) {
        tables.emplace(trace.shape(), cfg.hash_rounds, cfg.hash_bits, cfg.rng_seed);
    }

    for (std::size_t t = 0; t < result.num_blocks; ++t) {
        const auto started = std::chrono::steady_clock::now();
        const std::size_t start = t * S;
        const std::size_t end = std::min(T, start + S);

        BlockInput in;
        in.block_id = t;
        in.block_positions = detail::iota_range(start, end);
        if (t > 0) {
            const std::size_t tail_begin = start - std::min(v.lookback, S);
            for (std::size_t p = tail_begin; p < start; ++p) {
                if (!result.pool.contains(p)) {
                    in.tail_positions.push_back(p);
                }
            }
        }
        in.reserve_anchors = t == 0 || cfg.per_block_anchors;
        in.pool = &result.pool.positions();
        const auto candidates = in.candidates();
        const std::size_t rows = std::min(cfg.scoring_window, end - start);
        const auto query_rows = detail::iota_range(end - rows, end);

        SelectionResult sel;
        if (policy.kind == PolicyKind::SlidingWindow) {
            sel = sliding_window_select(v.plan, in);
        } else {
            RecallScores scores;
            if (need_exact) {
                scores.exact = exact_scores(trace, candidates, query_rows);
            } else {
                scores.exact = ScoreVector{std::vector<double>(candidates.size(), 0.0), candidates};
            }
            if (need_lsh) {
                scores.lsh = collision_scores(*tables, trace, candidates, query_representative(trace, query_rows));
            } else {
                scores.lsh = CollisionScoreVector{std::vector<double>(candidates.size(), 0.0), candidates};
            }
            sel = assemble_block_selection(in, v.plan, scores, alpha);
        }
        detail::check_selection(sel, candidates, result.pool.positions());
        result.pool.admit(t, sel, trace);

        BlockReport report;
        report.block_id = t;
        report.candidates = candidates.size();
        report.admitted_anchor = sel.anchors.size();
        report.admitted_local = sel.local_window.size();
        report.admitted_exact = sel.exact_picks.size();
        report.admitted_lsh = sel.lsh_picks.size();
        report.admitted_second_chance = sel.second_chance.size();
        report.pool_size = result.pool.size();
        report.uncompressed = sel.uncompressed;
        report.elapsed_us = std::chrono::duration_cast<std::chrono::microseconds>(
                                std::chrono::steady_clock::now() - started)
                                .count();
        result.reports.push_back(report);
        result.selections.push_back(std::move(sel));
    }
    return result;
}

inline PipelineResult run_pipeline(const KvTrace& trace, const CompressionConfig& cfg, const PolicyHandle& policy) {
    return run_pipeline(trace, detail::validated_or_throw(cfg, trace.shape(), trace.num_tokens()), policy);
}

/// The compressed cache keyed and ordered by absolute position.
inline std::map<std::size_t, TokenEntry> final_cache_view(const MemoryPool& pool) {
    std::map<std::size_t, TokenEntry> view;
    for (const auto& e : pool.entries()) {
        view.emplace(e.position, e);
    }
    return view;
}

}  // namespace laserkv
