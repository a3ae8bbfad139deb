// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "laserkv/baselines.hpp"
#include "laserkv/core.hpp"
#include "laserkv/error.hpp"
#include "laserkv/pipeline.hpp"
#include "laserkv/rng.hpp"
#include "laserkv/scoring.hpp"
#include "laserkv/selection.hpp"
#include "laserkv/trace.hpp"

namespace laserkv {

// ---------------------------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------------------------

/// Every position ranked by full-context attention from the probe (final) query, best first.
inline std::vector<std::size_t> oracle_ranking(const KvTrace& trace) {
    const std::size_t T = trace.num_tokens();
    std::vector<std::size_t> all(T);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const std::size_t probe[] = {T - 1};
    const auto scores = exact_scores(trace, all, probe);
    std::vector<std::size_t> idx(all);
    return top_k_indices(scores.scores, scores.candidate_positions, idx, T);
}

/// |pool ∩ top-|pool| oracle tokens| / |pool|; 0 for an empty pool.
inline double oracle_overlap_from_ranking(std::span<const std::size_t> pool_positions,
                                          std::span<const std::size_t> ranking) {
    if (pool_positions.empty()) {
        return 0.0;
    }
    const std::size_t m = std::min(pool_positions.size(), ranking.size());
    std::unordered_set<std::size_t> top(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(m));
    std::size_t hits = 0;
    for (auto p : pool_positions) {
        hits += top.contains(p) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(pool_positions.size());
}

inline double compute_oracle_overlap(std::span<const std::size_t> pool_positions, const KvTrace& trace) {
    return oracle_overlap_from_ranking(pool_positions, oracle_ranking(trace));
}

inline std::vector<std::size_t> pool_positions(const MemoryPool& pool) {
    std::vector<std::size_t> out;
    out.reserve(pool.size());
    for (const auto& e : pool.entries()) {
        out.push_back(e.position);
    }
    return out;
}

inline double compute_oracle_overlap(const MemoryPool& pool, const KvTrace& trace) {
    return compute_oracle_overlap(pool_positions(pool), trace);
}

/// Fraction of planted needles still cached; 1 when the trace has no needles.
inline double needle_retention(const MemoryPool& pool, const KvTrace& trace) {
    if (trace.needles().empty()) {
        return 1.0;
    }
    std::size_t kept = 0;
    for (const auto& n : trace.needles()) {
        kept += pool.contains(n.position) ? 1 : 0;
    }
    return static_cast<double>(kept) / static_cast<double>(trace.needles().size());
}

// ---------------------------------------------------------------------------------------------
// Experiment description
// ---------------------------------------------------------------------------------------------

struct TraceParams {
    ModelShape shape{2, 4, 16};
    std::size_t tokens = 4096;
    std::vector<NeedleSpec> needles;
    std::uint64_t seed = 0;
};

/// Lists are crossed in the order block_size, ratio, divisor, alpha, hash_rounds, hash_bits.
struct SweepAxes {
    std::vector<std::size_t> block_sizes{4096};
    std::vector<Ratio> ratios{Ratio(1, 4)};
    std::vector<std::size_t> divisors{4};
    std::vector<Ratio> alphas{Ratio(3, 4)};
    std::vector<std::size_t> hash_rounds{64};
    std::vector<std::size_t> hash_bits{8};
    std::optional<std::size_t> lookback;
    std::size_t scoring_window = 32;
    bool per_block_anchors = false;
    std::optional<std::size_t> summary_size;
};

struct ExperimentSpec {
    TraceParams trace;
    SweepAxes sweep;
    std::vector<PolicyKind> policies{PolicyKind::LaserKv};
    std::size_t repetitions = 1;
    std::string csv_path;
    std::string json_path;
    std::size_t jobs = 1;
    bool include_timings = false;
};

inline std::vector<CompressionConfig> expand_sweep(const SweepAxes& axes) {
    std::vector<CompressionConfig> out;
    for (auto s : axes.block_sizes) {
        for (auto r : axes.ratios) {
            for (auto n : axes.divisors) {
                for (auto a : axes.alphas) {
                    for (auto rounds : axes.hash_rounds) {
                        for (auto bits : axes.hash_bits) {
                            CompressionConfig c;
                            c.block_size = s;
                            c.compression_ratio = r;
                            c.protection_divisor = n;
                            c.alpha = a;
                            c.hash_rounds = rounds;
                            c.hash_bits = bits;
                            c.lookback = axes.lookback;
                            c.scoring_window = axes.scoring_window;
                            c.per_block_anchors = axes.per_block_anchors;
                            out.push_back(c);
                        }
                    }
                }
            }
        }
    }
    return out;
}

/// Seed of the trace used by repetition `rep`.
inline std::uint64_t repetition_trace_seed(std::uint64_t spec_seed, std::size_t rep) {
    return derive_seed(spec_seed, 2 * rep);
}
/// Seed of the hash tables used by repetition `rep`.
inline std::uint64_t repetition_hash_seed(std::uint64_t spec_seed, std::size_t rep) {
    return derive_seed(spec_seed, 2 * rep + 1);
}

// ---------------------------------------------------------------------------------------------
// Rows and serialization
// ---------------------------------------------------------------------------------------------

inline constexpr int kMetricsSchemaVersion = 1;

struct MetricsRow {
    PolicyKind policy = PolicyKind::LaserKv;
    std::size_t config_index = 0;
    std::size_t repetition = 0;
    std::size_t tokens = 0;
    CompressionConfig config;
    std::size_t lookback = 0;
    std::size_t budget = 0;
    std::size_t pool_size = 0;
    double needle_retention = 0.0;
    double oracle_overlap = 0.0;
    double achieved_compression = 0.0;
    std::vector<std::int64_t> block_elapsed_us;
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(sep, start);
        out.emplace_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return out;
}

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
    T v{};
    const auto* end = s.data() + s.size();
    auto res = std::from_chars(s.data(), end, v);
    if (res.ec != std::errc() || res.ptr != end) {
        return std::nullopt;
    }
    return v;
}

}  // namespace detail

inline const std::vector<std::string>& metrics_csv_columns() {
    static const std::vector<std::string> cols{
        "schema_version", "policy",         "config_index",  "repetition",       "tokens",
        "block_size",     "ratio",          "divisor",       "alpha",            "hash_rounds",
        "hash_bits",      "lookback",       "scoring_window", "per_block_anchors", "rng_seed",
        "budget",         "pool_size",      "needle_retention", "oracle_overlap", "achieved_compression"};
    return cols;
}

inline constexpr std::string_view kMetricsNote =
    "needle_retention and oracle_overlap are mechanism-level proxies, not task accuracy; "
    "recursive is a simplified fixed-size-summary contrast arm";

inline std::vector<std::string> metrics_fields(const MetricsRow& r) {
    const auto& c = r.config;
    return {std::to_string(kMetricsSchemaVersion),
            std::string(to_string(r.policy)),
            std::to_string(r.config_index),
            std::to_string(r.repetition),
            std::to_string(r.tokens),
            std::to_string(c.block_size),
            detail::format_double(c.compression_ratio.to_double()),
            std::to_string(c.protection_divisor),
            detail::format_double(c.alpha.to_double()),
            std::to_string(c.hash_rounds),
            std::to_string(c.hash_bits),
            std::to_string(r.lookback),
            std::to_string(c.scoring_window),
            c.per_block_anchors ? "1" : "0",
            std::to_string(c.rng_seed),
            std::to_string(r.budget),
            std::to_string(r.pool_size),
            detail::format_double(r.needle_retention),
            detail::format_double(r.oracle_overlap),
            detail::format_double(r.achieved_compression)};
}

inline std::int64_t total_elapsed_us(const MetricsRow& r) {
    return std::accumulate(r.block_elapsed_us.begin(), r.block_elapsed_us.end(), std::int64_t{0});
}

/// Wall time is machine dependent, so it is only emitted when asked for.
inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows, bool include_timings = false) {
    out << "# laserkv metrics v" << kMetricsSchemaVersion << "; " << kMetricsNote << '\n';
    const auto& cols = metrics_csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        out << (i ? "," : "") << cols[i];
    }
    out << (include_timings ? ",elapsed_us\n" : "\n");
    for (const auto& r : rows) {
        const auto fields = metrics_fields(r);
        for (std::size_t i = 0; i < fields.size(); ++i) {
            out << (i ? "," : "") << fields[i];
        }
        if (include_timings) {
            out << ',' << total_elapsed_us(r);
        }
        out << '\n';
    }
}

inline nlohmann::ordered_json metrics_json(const std::vector<MetricsRow>& rows, bool include_timings = false) {
    nlohmann::ordered_json doc;
    doc["schema_version"] = kMetricsSchemaVersion;
    doc["note"] = kMetricsNote;
    doc["rows"] = nlohmann::ordered_json::array();
    const auto& cols = metrics_csv_columns();
    for (const auto& r : rows) {
        nlohmann::ordered_json obj;
        const auto fields = metrics_fields(r);
        for (std::size_t i = 0; i < cols.size(); ++i) {
            obj[cols[i]] = fields[i];
        }
        // Numeric columns as numbers; the CSV text is the canonical form.
        obj["schema_version"] = kMetricsSchemaVersion;
        obj["config_index"] = r.config_index;
        obj["repetition"] = r.repetition;
        obj["tokens"] = r.tokens;
        obj["block_size"] = r.config.block_size;
        obj["ratio"] = r.config.compression_ratio.to_double();
        obj["divisor"] = r.config.protection_divisor;
        obj["alpha"] = r.config.alpha.to_double();
        obj["hash_rounds"] = r.config.hash_rounds;
        obj["hash_bits"] = r.config.hash_bits;
        obj["lookback"] = r.lookback;
        obj["scoring_window"] = r.config.scoring_window;
        obj["per_block_anchors"] = r.config.per_block_anchors;
        obj["rng_seed"] = r.config.rng_seed;
        obj["budget"] = r.budget;
        obj["pool_size"] = r.pool_size;
        obj["needle_retention"] = r.needle_retention;
        obj["oracle_overlap"] = r.oracle_overlap;
        obj["achieved_compression"] = r.achieved_compression;
        if (include_timings) {
            obj["elapsed_us"] = total_elapsed_us(r);
            obj["block_elapsed_us"] = r.block_elapsed_us;
        }
        doc["rows"].push_back(std::move(obj));
    }
    return doc;
}

/// Parses a metrics CSV written by write_metrics_csv. Timings, if present, are ignored.
inline std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
    std::vector<MetricsRow> rows;
    std::string line;
    std::vector<std::string> header;
    std::size_t line_no = 0;
    auto bad = [&](const std::string& what) {
        return Error(ErrorCode::InvalidArgument, "metrics CSV line " + std::to_string(line_no) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        auto fields = detail::split(line, ',');
        if (header.empty()) {
            header = std::move(fields);
            const auto& cols = metrics_csv_columns();
            if (header.size() < cols.size() || !std::equal(cols.begin(), cols.end(), header.begin())) {
                throw bad("unexpected header");
            }
            continue;
        }
        if (fields.size() != header.size()) {
            throw bad("field count mismatch");
        }
        auto num = [&](std::size_t i) {
            auto v = detail::parse_number<std::uint64_t>(fields[i]);
            if (!v) {
                throw bad("bad integer in column " + header[i]);
            }
            return *v;
        };
        auto real = [&](std::size_t i) {
            auto v = detail::parse_number<double>(fields[i]);
            if (!v) {
                throw bad("bad real in column " + header[i]);
            }
            return *v;
        };
        auto ratio = [&](std::size_t i) {
            auto v = Ratio::parse(fields[i]);
            return v ? *v : Ratio::from_double(real(i));
        };
        if (num(0) != static_cast<std::uint64_t>(kMetricsSchemaVersion)) {
            throw bad("unsupported schema version");
        }
        MetricsRow r;
        auto policy = parse_policy(fields[1]);
        if (!policy) {
            throw bad("unknown policy " + fields[1]);
        }
        r.policy = *policy;
        r.config_index = num(2);
        r.repetition = num(3);
        r.tokens = num(4);
        r.config.block_size = num(5);
        r.config.compression_ratio = ratio(6);
        r.config.protection_divisor = num(7);
        r.config.alpha = ratio(8);
        r.config.hash_rounds = num(9);
        r.config.hash_bits = num(10);
        r.lookback = num(11);
        r.config.lookback = r.lookback;
        r.config.scoring_window = num(12);
        r.config.per_block_anchors = num(13) != 0;
        r.config.rng_seed = num(14);
        r.budget = num(15);
        r.pool_size = num(16);
        r.needle_retention = real(17);
        r.oracle_overlap = real(18);
        r.achieved_compression = real(19);
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------------------------------------
// Flat key=value configuration
// ---------------------------------------------------------------------------------------------

/// key = value lines; '#' starts a comment. Later keys override earlier ones.
inline std::map<std::string, std::string> parse_kv_text(std::istream& in) {
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        const auto t = detail::trim(line);
        if (t.empty()) {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(line_no) + ": expected key=value");
        }
        auto key = detail::trim(std::string_view(t).substr(0, eq));
        std::replace(key.begin(), key.end(), '-', '_');
        out[key] = detail::trim(std::string_view(t).substr(eq + 1));
    }
    return out;
}

inline std::map<std::string, std::string> parse_kv_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    LASERKV_CHECK(in.good(), ErrorCode::Io, "cannot open " + path.string());
    return parse_kv_text(in);
}

namespace detail {

inline std::size_t to_size(const std::string& key, const std::string& v) {
    auto n = parse_number<std::uint64_t>(trim(v));
    LASERKV_CHECK(n.has_value(), ErrorCode::InvalidConfig, key + ": expected a non-negative integer, got '" + v + "'");
    return static_cast<std::size_t>(*n);
}

inline Ratio to_ratio(const std::string& key, const std::string& v) {
    auto r = Ratio::parse(trim(v));
    LASERKV_CHECK(r.has_value(), ErrorCode::InvalidConfig, key + ": expected a decimal number, got '" + v + "'");
    return *r;
}

inline double to_real(const std::string& key, const std::string& v) {
    const auto t = trim(v);
    auto r = parse_number<double>(t);
    LASERKV_CHECK(r.has_value(), ErrorCode::InvalidConfig, key + ": expected a number, got '" + v + "'");
    return *r;
}

inline bool to_bool(const std::string& key, const std::string& v) {
    const auto t = trim(v);
    if (t == "1" || t == "true" || t == "yes" || t == "on") {
        return true;
    }
    if (t == "0" || t == "false" || t == "no" || t == "off") {
        return false;
    }
    throw Error(ErrorCode::InvalidConfig, key + ": expected a boolean, got '" + v + "'");
}

template <typename F>
auto to_list(const std::string& key, const std::string& v, F convert) {
    std::vector<decltype(convert(key, v))> out;
    for (const auto& item : split(v, ',')) {
        out.push_back(convert(key, item));
    }
    return out;
}

}  // namespace detail

/**
 * @brief Applies one CompressionConfig field by its flag name (dashes or underscores).
 *
 * Returns false when the key is not a config field.
 */
inline bool apply_config_value(CompressionConfig& cfg, std::string key, const std::string& value) {
    std::replace(key.begin(), key.end(), '-', '_');
    using namespace detail;
    if (key == "block_size") {
        cfg.block_size = to_size(key, value);
    } else if (key == "ratio") {
        cfg.compression_ratio = to_ratio(key, value);
    } else if (key == "divisor") {
        cfg.protection_divisor = to_size(key, value);
    } else if (key == "alpha") {
        cfg.alpha = to_ratio(key, value);
    } else if (key == "hash_rounds") {
        cfg.hash_rounds = to_size(key, value);
    } else if (key == "hash_bits") {
        cfg.hash_bits = to_size(key, value);
    } else if (key == "lookback") {
        if (trim(value) == "auto") {
            cfg.lookback.reset();
        } else {
            cfg.lookback = to_size(key, value);
        }
    } else if (key == "scoring_window") {
        cfg.scoring_window = to_size(key, value);
    } else if (key == "seed") {
        cfg.rng_seed = to_size(key, value);
    } else if (key == "per_block_anchors") {
        cfg.per_block_anchors = to_bool(key, value);
    } else {
        return false;
    }
    return true;
}

/// Evenly spaced needles strictly inside the context: position T*(i+1)/(count+1).
inline std::vector<NeedleSpec> mid_context_needles(std::size_t tokens, std::size_t count, double cosine) {
    std::vector<NeedleSpec> out;
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(NeedleSpec{tokens * (i + 1) / (count + 1), cosine, "mid-" + std::to_string(i)});
    }
    return out;
}

inline std::vector<NeedleSpec> parse_needles(const std::string& text) {
    std::vector<NeedleSpec> out;
    for (const auto& item : detail::split(text, ',')) {
        const auto t = detail::trim(item);
        if (t.empty()) {
            continue;
        }
        const auto colon = t.find(':');
        LASERKV_CHECK(colon != std::string::npos, ErrorCode::InvalidConfig, "needle '" + t + "' must be position:cosine");
        out.push_back(NeedleSpec{detail::to_size("needles", t.substr(0, colon)),
                                 detail::to_real("needles", t.substr(colon + 1)), ""});
    }
    return out;
}

/**
 * @brief Builds an ExperimentSpec from flat keys.
 *
 * Sweep keys (block_size, ratio, divisor, alpha, hash_rounds, hash_bits) accept comma lists.
 * Needles come from `needles = pos:cos, ...` or `mid_needles = count` with `needle_cosine`.
 */
inline ExperimentSpec experiment_from_kv(const std::map<std::string, std::string>& kv) {
    using namespace detail;
    ExperimentSpec spec;
    std::optional<std::size_t> mid_needles;
    double needle_cosine = 0.9;
    for (const auto& [key, value] : kv) {
        if (key == "layers") {
            spec.trace.shape.num_layers = to_size(key, value);
        } else if (key == "heads") {
            spec.trace.shape.num_heads = to_size(key, value);
        } else if (key == "head_dim") {
            spec.trace.shape.head_dim = to_size(key, value);
        } else if (key == "tokens") {
            spec.trace.tokens = to_size(key, value);
        } else if (key == "seed") {
            spec.trace.seed = to_size(key, value);
        } else if (key == "needles") {
            spec.trace.needles = parse_needles(value);
        } else if (key == "mid_needles") {
            mid_needles = to_size(key, value);
        } else if (key == "needle_cosine") {
            needle_cosine = to_real(key, value);
        } else if (key == "block_size") {
            spec.sweep.block_sizes = to_list(key, value, to_size);
        } else if (key == "ratio") {
            spec.sweep.ratios = to_list(key, value, to_ratio);
        } else if (key == "divisor") {
            spec.sweep.divisors = to_list(key, value, to_size);
        } else if (key == "alpha") {
            spec.sweep.alphas = to_list(key, value, to_ratio);
        } else if (key == "hash_rounds") {
            spec.sweep.hash_rounds = to_list(key, value, to_size);
        } else if (key == "hash_bits") {
            spec.sweep.hash_bits = to_list(key, value, to_size);
        } else if (key == "lookback") {
            spec.sweep.lookback = trim(value) == "auto" ? std::nullopt : std::optional(to_size(key, value));
        } else if (key == "scoring_window") {
            spec.sweep.scoring_window = to_size(key, value);
        } else if (key == "per_block_anchors") {
            spec.sweep.per_block_anchors = to_bool(key, value);
        } else if (key == "summary_size") {
            spec.sweep.summary_size = to_size(key, value);
        } else if (key == "policies" || key == "policy") {
            spec.policies.clear();
            for (const auto& name : split(value, ',')) {
                auto p = parse_policy(trim(name));
                LASERKV_CHECK(p.has_value(), ErrorCode::InvalidConfig, "unknown policy '" + trim(name) + "'");
                spec.policies.push_back(*p);
            }
        } else if (key == "repetitions") {
            spec.repetitions = to_size(key, value);
        } else if (key == "csv") {
            spec.csv_path = value;
        } else if (key == "json") {
            spec.json_path = value;
        } else if (key == "jobs") {
            spec.jobs = to_size(key, value);
        } else if (key == "timings") {
            spec.include_timings = to_bool(key, value);
        } else {
            throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "'");
        }
    }
    if (mid_needles) {
        spec.trace.needles = mid_context_needles(spec.trace.tokens, *mid_needles, needle_cosine);
    }
    return spec;
}

/// Spec-level constraints; per-configuration checks happen in validate_config.
inline std::vector<std::string> validate_experiment(const ExperimentSpec& spec) {
    std::vector<std::string> problems;
    const auto& s = spec.sweep;
    if (s.block_sizes.empty() || s.ratios.empty() || s.divisors.empty() || s.alphas.empty() ||
        s.hash_rounds.empty() || s.hash_bits.empty()) {
        problems.emplace_back("every sweep list must be non-empty");
    }
    if (spec.policies.empty()) {
        problems.emplace_back("at least one policy is required");
    }
    if (spec.repetitions < 1) {
        problems.emplace_back("repetitions must be >= 1");
    }
    if (!spec.trace.shape.valid()) {
        problems.emplace_back("layers, heads and head_dim must be >= 1");
    }
    if (spec.trace.tokens < 1) {
        problems.emplace_back("tokens must be >= 1");
    }
    for (const auto& n : spec.trace.needles) {
        if (n.position >= spec.trace.tokens) {
            problems.emplace_back("needle position " + std::to_string(n.position) + " out of range");
        }
    }
    for (const auto& cfg : expand_sweep(s)) {
        auto res = validate_config(cfg, spec.trace.shape, std::max<std::size_t>(spec.trace.tokens, 1));
        for (const auto& e : res.errors) {
            problems.push_back(std::string(to_string(e.code)) + ": " + e.message);
        }
    }
    return problems;
}

// ---------------------------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------------------------

struct RunFailure {
    PolicyKind policy = PolicyKind::LaserKv;
    std::size_t config_index = 0;
    std::size_t repetition = 0;
    std::string message;
};

struct ExperimentOutcome {
    std::vector<MetricsRow> rows;
    std::vector<RunFailure> failures;
};

/// One policy on one trace: the metrics of the final cache.
inline MetricsRow evaluate_run(const KvTrace& trace, const std::vector<std::size_t>& ranking,
                               const ValidatedConfig& v, const PolicyHandle& policy) {
    const auto result = run_pipeline(trace, v, policy);
    MetricsRow row;
    row.policy = policy.kind;
    row.tokens = trace.num_tokens();
    row.config = v.config;
    row.lookback = v.lookback;
    row.budget = v.budget;
    row.pool_size = result.pool.size();
    row.needle_retention = needle_retention(result.pool, trace);
    row.oracle_overlap = oracle_overlap_from_ranking(pool_positions(result.pool), ranking);
    row.achieved_compression = static_cast<double>(result.pool.size()) / static_cast<double>(trace.num_tokens());
    for (const auto& r : result.reports) {
        row.block_elapsed_us.push_back(r.elapsed_us);
    }
    return row;
}

/**
 * @brief Runs the cross product policies x sweep x repetitions.
 *
 * Rows are ordered by (policy, config index, repetition) whatever the job count. A failing run
 * is recorded and the sweep continues. Rows are written to spec.csv_path / spec.json_path when set.
 */
inline ExperimentOutcome run_experiment(const ExperimentSpec& spec) {
    const auto problems = validate_experiment(spec);
    if (!problems.empty()) {
        std::string msg;
        for (const auto& p : problems) {
            msg += (msg.empty() ? "" : "; ") + p;
        }
        throw Error(ErrorCode::InvalidConfig, msg);
    }
    const auto configs = expand_sweep(spec.sweep);

    std::vector<KvTrace> traces;
    std::vector<std::vector<std::size_t>> rankings;
    for (std::size_t rep = 0; rep < spec.repetitions; ++rep) {
        traces.push_back(generate_trace(spec.trace.shape, spec.trace.tokens, spec.trace.needles,
                                        repetition_trace_seed(spec.trace.seed, rep)));
        rankings.push_back(oracle_ranking(traces.back()));
    }

    struct Job {
        PolicyKind policy;
        std::size_t config_index;
        std::size_t repetition;
    };
    std::vector<Job> jobs;
    for (auto p : spec.policies) {
        for (std::size_t c = 0; c < configs.size(); ++c) {
            for (std::size_t rep = 0; rep < spec.repetitions; ++rep) {
                jobs.push_back(Job{p, c, rep});
            }
        }
    }

    struct Slot {
        std::optional<MetricsRow> row;
        std::optional<std::string> error;
    };
    std::vector<Slot> slots(jobs.size());
    auto execute = [&](std::size_t i) {
        const auto& job = jobs[i];
        try {
            auto cfg = configs[job.config_index];
            cfg.rng_seed = repetition_hash_seed(spec.trace.seed, job.repetition);
            const auto& trace = traces[job.repetition];
            const auto v = detail::validated_or_throw(cfg, trace.shape(), trace.num_tokens());
            PolicyHandle policy{job.policy, spec.sweep.summary_size};
            auto row = evaluate_run(trace, rankings[job.repetition], v, policy);
            row.config_index = job.config_index;
            row.repetition = job.repetition;
            slots[i].row = std::move(row);
        } catch (const std::exception& e) {
            slots[i].error = e.what();
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, spec.jobs);
    if (workers == 1) {
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            execute(i);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::future<void>> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.push_back(std::async(std::launch::async, [&] {
                for (std::size_t i = next++; i < jobs.size(); i = next++) {
                    execute(i);
                }
            }));
        }
        for (auto& f : pool) {
            f.get();
        }
    }

    ExperimentOutcome outcome;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (slots[i].row) {
            outcome.rows.push_back(std::move(*slots[i].row));
        } else {
            outcome.failures.push_back(
                RunFailure{jobs[i].policy, jobs[i].config_index, jobs[i].repetition, slots[i].error.value_or("")});
        }
    }
    if (!spec.csv_path.empty()) {
        std::ofstream out(spec.csv_path, std::ios::trunc);
        LASERKV_CHECK(out.good(), ErrorCode::Io, "cannot write " + spec.csv_path);
        write_metrics_csv(out, outcome.rows, spec.include_timings);
    }
    if (!spec.json_path.empty()) {
        std::ofstream out(spec.json_path, std::ios::trunc);
        LASERKV_CHECK(out.good(), ErrorCode::Io, "cannot write " + spec.json_path);
        out << metrics_json(outcome.rows, spec.include_timings).dump(2) << '\n';
    }
    return outcome;
}

// ---------------------------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------------------------

struct SummaryRow {
    PolicyKind policy = PolicyKind::LaserKv;
    std::size_t tokens = 0;
    CompressionConfig config;
    std::size_t runs = 0;
    double mean_retention = 0.0;
    double min_retention = 1.0;
    double mean_overlap = 0.0;
    double mean_compression = 0.0;
};

/// Means over repetitions, one row per (policy, tokens, configuration) in first-seen order.
inline std::vector<SummaryRow> summarize(const std::vector<MetricsRow>& rows) {
    std::vector<SummaryRow> out;
    std::map<std::string, std::size_t> index;
    for (const auto& r : rows) {
        auto fields = metrics_fields(r);
        // Key on everything that identifies the configuration, not the repetition or its seed.
        std::string key;
        for (std::size_t i : {1, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13}) {
            key += fields[i] + '|';
        }
        auto [it, inserted] = index.emplace(key, out.size());
        if (inserted) {
            SummaryRow s;
            s.policy = r.policy;
            s.tokens = r.tokens;
            s.config = r.config;
            out.push_back(s);
        }
        auto& s = out[it->second];
        ++s.runs;
        s.mean_retention += r.needle_retention;
        s.min_retention = std::min(s.min_retention, r.needle_retention);
        s.mean_overlap += r.oracle_overlap;
        s.mean_compression += r.achieved_compression;
    }
    for (auto& s : out) {
        s.mean_retention /= static_cast<double>(s.runs);
        s.mean_overlap /= static_cast<double>(s.runs);
        s.mean_compression /= static_cast<double>(s.runs);
    }
    return out;
}

inline void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
    out << "policy,tokens,block_size,ratio,divisor,alpha,hash_rounds,hash_bits,runs,"
           "mean_needle_retention,min_needle_retention,mean_oracle_overlap,mean_achieved_compression\n";
    for (const auto& s : rows) {
        out << to_string(s.policy) << ',' << s.tokens << ',' << s.config.block_size << ','
            << detail::format_double(s.config.compression_ratio.to_double()) << ',' << s.config.protection_divisor
            << ',' << detail::format_double(s.config.alpha.to_double()) << ',' << s.config.hash_rounds << ','
            << s.config.hash_bits << ',' << s.runs << ',' << detail::format_double(s.mean_retention) << ','
            << detail::format_double(s.min_retention) << ',' << detail::format_double(s.mean_overlap) << ','
            << detail::format_double(s.mean_compression) << '\n';
    }
}

}  // namespace laserkv
