// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

// laserkv command-line driver.
//
//   laserkv gen-trace --tokens 4096 --mid-needles 4 --out trace.lkvt
//   laserkv run --trace trace.lkvt --policy laser --ratio 0.25 --divisor 4 --report blocks.jsonl
//   laserkv sweep --spec sweep.cfg --csv rows.csv
//   laserkv report rows.csv [more.csv ...]
//
// Exit codes: 0 success, 1 run failure, 2 invalid configuration or usage.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "laserkv/laserkv.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRunFailure = 1;
constexpr int kExitInvalidConfig = 2;

struct TraceFlags {
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t head_dim = 16;
    std::size_t tokens = 4096;
    std::vector<std::string> needles;
    std::size_t mid_needles = 0;
    double needle_cosine = 0.9;
    std::uint64_t seed = 0;

    void add_to(CLI::App& cmd, const std::string& seed_flag) {
        cmd.add_option("--layers", layers, "Number of layers")->capture_default_str();
        cmd.add_option("--heads", heads, "Heads per layer")->capture_default_str();
        cmd.add_option("--head-dim", head_dim, "Head dimension")->capture_default_str();
        cmd.add_option("--tokens", tokens, "Context length T")->capture_default_str();
        cmd.add_option("--needle", needles, "Planted needle as position:cosine (repeatable)");
        cmd.add_option("--mid-needles", mid_needles, "Evenly spaced mid-context needles")->capture_default_str();
        cmd.add_option("--needle-cosine", needle_cosine, "Cosine for --mid-needles")->capture_default_str();
        cmd.add_option(seed_flag, seed, "Trace generation seed")->capture_default_str();
    }

    laserkv::KvTrace generate() const {
        std::vector<laserkv::NeedleSpec> specs;
        for (const auto& n : needles) {
            auto parsed = laserkv::parse_needles(n);
            specs.insert(specs.end(), parsed.begin(), parsed.end());
        }
        if (mid_needles > 0) {
            auto mid = laserkv::mid_context_needles(tokens, mid_needles, needle_cosine);
            specs.insert(specs.end(), mid.begin(), mid.end());
        }
        return laserkv::generate_trace(laserkv::ModelShape{layers, heads, head_dim}, tokens, specs, seed);
    }
};

// Config flags are kept as text and applied through the same parser as config files.
struct ConfigFlags {
    std::string config_file;
    std::map<std::string, std::string> values;

    void add_to(CLI::App& cmd) {
        cmd.add_option("--config", config_file, "Flat key=value config file (flags override it)");
        for (const char* name : {"block-size", "ratio", "divisor", "alpha", "hash-rounds", "hash-bits", "lookback",
                                 "scoring-window", "seed", "per-block-anchors"}) {
            cmd.add_option_function<std::string>(
                std::string("--") + name, [this, name](const std::string& v) { values[name] = v; },
                std::string("CompressionConfig field ") + name);
        }
    }

    laserkv::CompressionConfig resolve(std::string& policy, std::optional<std::size_t>& summary_size) const {
        laserkv::CompressionConfig cfg;
        if (!config_file.empty()) {
            for (const auto& [key, value] : laserkv::parse_kv_file(config_file)) {
                if (key == "policy") {
                    policy = value;
                } else if (key == "summary_size") {
                    summary_size = std::stoull(value);
                } else if (!laserkv::apply_config_value(cfg, key, value)) {
                    throw laserkv::Error(laserkv::ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
                }
            }
        }
        for (const auto& [key, value] : values) {
            laserkv::apply_config_value(cfg, key, value);
        }
        return cfg;
    }
};

void print_validation_errors(const laserkv::ValidationResult& res) {
    for (const auto& e : res.errors) {
        std::fprintf(stderr, "error: %s: %s\n", std::string(laserkv::to_string(e.code)).c_str(), e.message.c_str());
    }
}

int cmd_gen_trace(const TraceFlags& flags, const std::string& out) {
    const auto trace = flags.generate();
    laserkv::save_trace(trace, out);
    std::printf("wrote %s: T=%zu L=%zu H=%zu d=%zu needles=%zu\n", out.c_str(), trace.num_tokens(),
                trace.shape().num_layers, trace.shape().num_heads, trace.shape().head_dim, trace.needles().size());
    return kExitOk;
}

struct RunArgs {
    std::string trace_path;
    std::string policy = "laser";
    std::optional<std::size_t> summary_size;
    std::string report_path;
    std::string csv_path;
    std::string json_path;
};

int cmd_run(const TraceFlags& trace_flags, const ConfigFlags& config_flags, RunArgs args, bool policy_set) {
    std::string file_policy;
    std::optional<std::size_t> file_summary;
    const auto cfg = config_flags.resolve(file_policy, file_summary);
    if (!policy_set && !file_policy.empty()) {
        args.policy = file_policy;
    }
    if (!args.summary_size) {
        args.summary_size = file_summary;
    }
    const auto kind = laserkv::parse_policy(args.policy);
    if (!kind) {
        std::fprintf(stderr, "error: unknown policy '%s'\n", args.policy.c_str());
        return kExitInvalidConfig;
    }

    const auto trace = args.trace_path.empty() ? trace_flags.generate() : laserkv::load_trace(args.trace_path);
    const auto validation = laserkv::validate_config(cfg, trace.shape(), trace.num_tokens());
    if (!validation.ok()) {
        print_validation_errors(validation);
        return kExitInvalidConfig;
    }
    for (const auto& w : validation.value->warnings) {
        std::fprintf(stderr, "warning: %s\n", w.c_str());
    }
    const auto& v = *validation.value;
    const laserkv::PolicyHandle policy{*kind, args.summary_size};
    const auto result = laserkv::run_pipeline(trace, v, policy);

    if (!args.report_path.empty()) {
        std::ofstream out(args.report_path, std::ios::trunc);
        if (!out) {
            throw laserkv::Error(laserkv::ErrorCode::Io, "cannot write " + args.report_path);
        }
        laserkv::write_block_reports(out, result.reports);
    }

    laserkv::MetricsRow row;
    row.policy = *kind;
    row.tokens = trace.num_tokens();
    row.config = v.config;
    row.lookback = v.lookback;
    row.budget = v.budget;
    row.pool_size = result.pool.size();
    row.needle_retention = laserkv::needle_retention(result.pool, trace);
    row.oracle_overlap = laserkv::compute_oracle_overlap(result.pool, trace);
    row.achieved_compression = static_cast<double>(row.pool_size) / static_cast<double>(row.tokens);
    for (const auto& r : result.reports) {
        row.block_elapsed_us.push_back(r.elapsed_us);
    }
    if (!args.csv_path.empty()) {
        std::ofstream out(args.csv_path, std::ios::trunc);
        laserkv::write_metrics_csv(out, {row});
    }
    if (!args.json_path.empty()) {
        std::ofstream out(args.json_path, std::ios::trunc);
        out << laserkv::metrics_json({row}).dump(2) << '\n';
    }

    std::printf("policy=%s blocks=%zu budget=%zu plan=(anchor %zu, local %zu, recall %zu) lookback=%zu\n",
                args.policy.c_str(), result.num_blocks, v.budget, v.plan.anchor, v.plan.local, v.plan.recall,
                v.lookback);
    std::printf("pool_size=%zu achieved_compression=%.6f needle_retention=%.6f oracle_overlap=%.6f (proxies)\n",
                row.pool_size, row.achieved_compression, row.needle_retention, row.oracle_overlap);
    return kExitOk;
}

struct SweepArgs {
    std::string spec_path;
    std::string csv_path;
    std::string json_path;
    std::optional<std::size_t> jobs;
    bool timings = false;
};

int cmd_sweep(const SweepArgs& args) {
    auto spec = laserkv::experiment_from_kv(laserkv::parse_kv_file(args.spec_path));
    if (!args.csv_path.empty()) {
        spec.csv_path = args.csv_path;
    }
    if (!args.json_path.empty()) {
        spec.json_path = args.json_path;
    }
    if (args.jobs) {
        spec.jobs = *args.jobs;
    }
    spec.include_timings = spec.include_timings || args.timings;
    if (const auto problems = laserkv::validate_experiment(spec); !problems.empty()) {
        for (const auto& p : problems) {
            std::fprintf(stderr, "error: %s\n", p.c_str());
        }
        return kExitInvalidConfig;
    }
    const auto outcome = laserkv::run_experiment(spec);
    if (spec.csv_path.empty() && spec.json_path.empty()) {
        laserkv::write_metrics_csv(std::cout, outcome.rows, spec.include_timings);
    }
    for (const auto& f : outcome.failures) {
        std::fprintf(stderr, "run failed: policy=%s config=%zu rep=%zu: %s\n",
                     std::string(laserkv::to_string(f.policy)).c_str(), f.config_index, f.repetition,
                     f.message.c_str());
    }
    std::fprintf(stderr, "%zu runs ok, %zu failed\n", outcome.rows.size(), outcome.failures.size());
    return outcome.failures.empty() ? kExitOk : kExitRunFailure;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_path) {
    std::vector<laserkv::MetricsRow> rows;
    for (const auto& path : inputs) {
        std::ifstream in(path);
        if (!in) {
            throw laserkv::Error(laserkv::ErrorCode::Io, "cannot open " + path);
        }
        auto part = laserkv::read_metrics_csv(in);
        rows.insert(rows.end(), part.begin(), part.end());
    }
    const auto summary = laserkv::summarize(rows);
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::trunc);
        laserkv::write_summary_csv(out, summary);
    }
    std::printf("%-10s %7s %6s %6s %3s %6s %5s %9s %9s %9s\n", "policy", "T", "block", "ratio", "n", "alpha", "runs",
                "retention", "overlap", "kept");
    for (const auto& s : summary) {
        std::printf("%-10s %7zu %6zu %6.3f %3zu %6.3f %5zu %9.4f %9.4f %9.4f\n",
                    std::string(laserkv::to_string(s.policy)).c_str(), s.tokens, s.config.block_size,
                    s.config.compression_ratio.to_double(), s.config.protection_divisor, s.config.alpha.to_double(),
                    s.runs, s.mean_retention, s.mean_overlap, s.mean_compression);
    }
    std::printf("retention and overlap are mechanism-level proxies, not task accuracy\n");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"laserkv: block-wise accumulative KV cache compression on synthetic traces"};
    app.require_subcommand(1);

    TraceFlags gen_flags;
    std::string gen_out = "trace.lkvt";
    auto* gen = app.add_subcommand("gen-trace", "Generate a synthetic trace file");
    gen_flags.add_to(*gen, "--seed");
    gen->add_option("--out", gen_out, "Output trace path")->capture_default_str();

    TraceFlags run_trace_flags;
    ConfigFlags run_config;
    RunArgs run_args;
    auto* run = app.add_subcommand("run", "Run one policy with one configuration");
    run->add_option("--trace", run_args.trace_path, "Trace file (otherwise one is generated)");
    run_trace_flags.add_to(*run, "--trace-seed");
    run_config.add_to(*run);
    auto* policy_opt = run->add_option("--policy", run_args.policy, "laser|exact|lsh|window|recursive");
    run->add_option("--summary-size", run_args.summary_size, "Fixed summary size for the recursive policy");
    run->add_option("--report", run_args.report_path, "Per-block JSON-lines report");
    run->add_option("--csv", run_args.csv_path, "Metrics CSV output");
    run->add_option("--json", run_args.json_path, "Metrics JSON output");

    SweepArgs sweep_args;
    auto* sweep = app.add_subcommand("sweep", "Run an experiment sweep from a flat config file");
    sweep->add_option("--spec", sweep_args.spec_path, "Experiment spec file")->required();
    sweep->add_option("--csv", sweep_args.csv_path, "Metrics CSV output (overrides spec)");
    sweep->add_option("--json", sweep_args.json_path, "Metrics JSON output (overrides spec)");
    sweep->add_option("--jobs", sweep_args.jobs, "Concurrent runs");
    sweep->add_flag("--timings", sweep_args.timings, "Include wall time columns");

    std::vector<std::string> report_inputs;
    std::string report_out;
    auto* report = app.add_subcommand("report", "Aggregate metrics CSVs into a summary table");
    report->add_option("inputs", report_inputs, "Metrics CSV files")->required();
    report->add_option("--out", report_out, "Summary CSV output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitInvalidConfig;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_trace(gen_flags, gen_out);
        }
        if (run->parsed()) {
            return cmd_run(run_trace_flags, run_config, run_args, policy_opt->count() > 0);
        }
        if (sweep->parsed()) {
            return cmd_sweep(sweep_args);
        }
        if (report->parsed()) {
            return cmd_report(report_inputs, report_out);
        }
    } catch (const laserkv::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        const bool bad_input = e.code() == laserkv::ErrorCode::InvalidConfig || e.code() == laserkv::ErrorCode::InvalidArgument;
        return bad_input ? kExitInvalidConfig : kExitRunFailure;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRunFailure;
    }
    return kExitOk;
}
