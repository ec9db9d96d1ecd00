#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tokenlab/harness.hpp"

namespace tokenlab::cli {

inline int run_argv(int argc, const char* const* argv) {
    CLI::App app{"tokenlab: desk-scale token-level RL signal laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_dir, trace_path, checkpoint_path;
    std::optional<std::uint64_t> seed_override;
    std::vector<std::string> run_dirs;

    auto add_common = [&](CLI::App* cmd, bool need_config) {
        auto* opt = cmd->add_option("--config", config_path, "experiment config file");
        if (need_config) opt->required();
        cmd->add_option("--seed", seed_override, "override train.seed");
        cmd->add_option("--out", out_dir, "output directory")->required();
    };

    auto* gen = app.add_subcommand("gen-data", "generate a verifiable-arithmetic dataset");
    add_common(gen, true);
    auto* train = app.add_subcommand("train", "run RLVR training");
    add_common(train, true);
    auto* probe = app.add_subcommand("probe", "gradient/entropy probes on a frozen checkpoint");
    add_common(probe, true);
    probe->add_option("--checkpoint", checkpoint_path, "checkpoint file (overrides config)");
    auto* sparse = app.add_subcommand("sparse-check", "sparse-estimability Monte Carlo report");
    add_common(sparse, true);
    auto* analyze = app.add_subcommand("analyze", "entropy/quadrant/correlation report from a trace");
    analyze->add_option("--trace", trace_path, "traces.jsonl file")->required();
    analyze->add_option("--out", out_dir, "output directory");
    auto* report = app.add_subcommand("report", "aggregate metrics across run directories");
    report->add_option("dirs", run_dirs, "run directories")->required();
    report->add_option("--out", out_dir, "output directory for report.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        auto load = [&]() {
            auto cfg = harness::load_config(config_path);
            if (seed_override) cfg.seed = *seed_override;
            return cfg;
        };
        if (gen->parsed()) {
            const auto cfg = load();
            std::filesystem::create_directories(out_dir);
            std::vector<tasks::ProblemInstance> problems;
            problems.reserve(static_cast<std::size_t>(cfg.task_gen_count));
            for (int i = 0; i < cfg.task_gen_count; ++i) {
                problems.push_back(tasks::generate_problem(
                    cfg.task_difficulty, cfg.seed + static_cast<std::uint64_t>(i)));
            }
            const auto path = (std::filesystem::path(out_dir) / "problems.jsonl").string();
            tasks::dump_problems(problems, path);
            std::printf("wrote %zu problems to %s\n", problems.size(), path.c_str());
        } else if (train->parsed()) {
            const auto cfg = load();
            const auto result = harness::run_training(cfg, out_dir);
            const auto summary = harness::summarize_run(out_dir);
            std::printf("trained %d steps; step-0 reward %.4f, final-20 reward %.4f\n",
                        summary.steps, summary.step0_mean_reward, summary.final20_mean_reward);
            std::printf("metrics: %s\ncheckpoint: %s\n", result.metrics_path.string().c_str(),
                        result.checkpoint_path.string().c_str());
        } else if (probe->parsed()) {
            auto cfg = load();
            const std::string ckpt =
                !checkpoint_path.empty() ? checkpoint_path : cfg.probe_checkpoint;
            if (ckpt.empty()) {
                std::fprintf(stderr, "probe: no checkpoint given (--checkpoint or probe.checkpoint)\n");
                return 1;
            }
            const auto result = harness::run_probe(cfg, ckpt, out_dir);
            std::printf("probed %zu batches; reports in %s\n", result.batches.size(),
                        out_dir.c_str());
        } else if (sparse->parsed()) {
            const auto cfg = load();
            const auto report_data = harness::run_sparse_check(cfg, out_dir);
            std::printf("sparse check: T=%d p=%g trials=%d\n", report_data.n_tokens, report_data.p,
                        report_data.trials);
            std::printf("  max |mean err|/SE = %.4f\n", report_data.max_abs_z);
            std::printf("  empirical MSE %.6e vs formula %.6e (centered %.6e)\n",
                        report_data.empirical_mse, report_data.formula_mse,
                        report_data.centered_formula_mse);
            if (report_data.formula_cosine) {
                std::printf("  mean cosine %.6f vs formula %.6f\n",
                            report_data.empirical_mean_cosine, *report_data.formula_cosine);
            }
        } else if (analyze->parsed()) {
            const auto result = harness::analyze_trace(trace_path);
            std::printf("analyzed %d records, %d tokens\n", result.n_records, result.n_tokens);
            std::printf("  pearson(h_norm, h_pred) = %.6f\n", result.pearson_attn_pred);
            for (const auto& [label, count] : result.quadrant_counts) {
                std::printf("  quadrant %s: %d\n", label.c_str(), count);
            }
            if (!out_dir.empty()) {
                harness::write_analyze_report(result, out_dir);
            }
        } else if (report->parsed()) {
            std::string csv = "run,steps,step0_mean_reward,final20_mean_reward,"
                              "final20_mean_response_len\n";
            std::printf("%-28s %6s %12s %14s %14s\n", "run", "steps", "step0_reward",
                        "final20_reward", "final20_len");
            for (const auto& dir : run_dirs) {
                const auto summary = harness::summarize_run(dir);
                std::printf("%-28s %6d %12.4f %14.4f %14.2f\n", summary.dir.c_str(), summary.steps,
                            summary.step0_mean_reward, summary.final20_mean_reward,
                            summary.final20_mean_response_len);
                csv += summary.dir + "," + std::to_string(summary.steps) + "," +
                       harness::detail::fmt(summary.step0_mean_reward) + "," +
                       harness::detail::fmt(summary.final20_mean_reward) + "," +
                       harness::detail::fmt(summary.final20_mean_response_len) + "\n";
            }
            if (!out_dir.empty()) {
                std::filesystem::create_directories(out_dir);
                std::ofstream out(std::filesystem::path(out_dir) / "report.csv");
                out << csv;
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

inline int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("tokenlab");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_argv(static_cast<int>(argv.size()), argv.data());
}

}  // namespace tokenlab::cli
