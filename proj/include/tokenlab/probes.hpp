#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "tokenlab/errors.hpp"
#include "tokenlab/rng.hpp"
#include "tokenlab/selection.hpp"

namespace tokenlab::probes {

struct GeometryReport {
    double norm_ratio = 0.0;
    std::optional<double> cosine;  // empty when the subset gradient is zero
    double proj_ratio = 0.0;
    bool subset_zero = false;
};

// NormRatio = |g_S| / |g_full|, Cosine = <g_S, g_full> / (|g_S| |g_full|),
// ProjRatio = <g_S, g_full> / |g_full|^2.
inline GeometryReport gradient_geometry(std::span<const double> g_subset,
                                        std::span<const double> g_full) {
    if (g_subset.size() != g_full.size()) {
        throw input_error("gradient_geometry: length mismatch");
    }
    double nf2 = 0.0, ns2 = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < g_full.size(); ++i) {
        nf2 += g_full[i] * g_full[i];
        ns2 += g_subset[i] * g_subset[i];
        dot += g_subset[i] * g_full[i];
    }
    if (nf2 == 0.0) {
        throw geometry_error("gradient_geometry: zero full gradient");
    }
    GeometryReport report;
    if (ns2 == 0.0) {
        report.subset_zero = true;
        return report;
    }
    report.norm_ratio = std::sqrt(ns2 / nf2);
    report.cosine = dot / std::sqrt(ns2 * nf2);
    report.proj_ratio = dot / nf2;
    return report;
}

struct DecileReport {
    std::array<double, 10> proj_ratio{};
    // Band shares over D0-D2 / D3-D6 / D7-D9, normalized to sum 1.
    std::array<double, 3> band_share{};
    int excluded_responses = 0;
};

// Ten within-response entropy-decile masks, each turned into a gradient by
// the supplied oracle (which must apply all-token-mean normalization so that
// decile gradients sum to the full-token gradient) and projected onto g_full.
// Responses shorter than ten tokens are excluded and counted.
inline DecileReport decile_decomposition(
    const std::vector<std::vector<double>>& response_entropies,
    const std::function<std::vector<double>(const std::vector<std::vector<double>>&)>& grad_oracle,
    std::span<const double> g_full) {
    DecileReport report;
    // rank -> decile assignment per response
    std::vector<std::vector<int>> decile_of(response_entropies.size());
    bool any = false;
    for (std::size_t r = 0; r < response_entropies.size(); ++r) {
        const auto& ent = response_entropies[r];
        const int n = static_cast<int>(ent.size());
        decile_of[r].assign(ent.size(), -1);
        if (n < 10) {
            ++report.excluded_responses;
            continue;
        }
        any = true;
        const auto order = selection::detail::stable_ascending(ent);
        for (int rank = 0; rank < n; ++rank) {
            decile_of[r][static_cast<std::size_t>(order[static_cast<std::size_t>(rank)])] =
                rank * 10 / n;
        }
    }
    if (!any) {
        throw partition_error("decile_decomposition: no response admits ten deciles");
    }

    double nf2 = 0.0;
    for (double g : g_full) nf2 += g * g;
    if (nf2 == 0.0) {
        throw geometry_error("decile_decomposition: zero full gradient");
    }

    for (int dec = 0; dec < 10; ++dec) {
        std::vector<std::vector<double>> weights(response_entropies.size());
        for (std::size_t r = 0; r < response_entropies.size(); ++r) {
            weights[r].assign(response_entropies[r].size(), 0.0);
            for (std::size_t t = 0; t < weights[r].size(); ++t) {
                if (decile_of[r][t] == dec) weights[r][t] = 1.0;
            }
        }
        const auto grad = grad_oracle(weights);
        if (grad.size() != g_full.size()) {
            throw input_error("decile_decomposition: oracle gradient length mismatch");
        }
        double dot = 0.0;
        for (std::size_t i = 0; i < grad.size(); ++i) dot += grad[i] * g_full[i];
        report.proj_ratio[static_cast<std::size_t>(dec)] = dot / nf2;
    }

    const double low = report.proj_ratio[0] + report.proj_ratio[1] + report.proj_ratio[2];
    const double mid = report.proj_ratio[3] + report.proj_ratio[4] + report.proj_ratio[5] +
                       report.proj_ratio[6];
    const double high = report.proj_ratio[7] + report.proj_ratio[8] + report.proj_ratio[9];
    const double total = low + mid + high;
    if (total == 0.0) {
        throw geometry_error("decile_decomposition: all projection ratios are zero");
    }
    report.band_share = {low / total, mid / total, high / total};
    return report;
}

struct OnlineStat {
    double mean = 0.0;
    double stddev = 0.0;  // population
    double cv = 0.0;      // stddev / (|mean| + eps)
};

// Running mean / population std / CV over every prefix of the series,
// CV(s) = Std({c_tau : tau <= s}) / (|Mean| + eps).
inline std::vector<OnlineStat> online_cv(std::span<const double> series, double eps = 1e-8) {
    if (series.empty()) {
        throw input_error("online_cv: empty series");
    }
    std::vector<OnlineStat> out;
    out.reserve(series.size());
    double mean = 0.0;
    double m2 = 0.0;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const double delta = series[i] - mean;
        mean += delta / static_cast<double>(i + 1);
        m2 += delta * (series[i] - mean);
        const double var = m2 / static_cast<double>(i + 1);
        OnlineStat stat;
        stat.mean = mean;
        stat.stddev = std::sqrt(std::max(0.0, var));
        stat.cv = stat.stddev == 0.0 ? 0.0 : stat.stddev / (std::abs(mean) + eps);
        out.push_back(stat);
    }
    return out;
}

// Minimal number of positions, taken in descending attention order (ties to
// earlier positions), whose cumulative mass reaches the threshold.
inline int support_size(std::span<const double> row, double threshold) {
    if (!(threshold > 0.0) || threshold > 1.0) {
        throw input_error("support_size: threshold must be in (0, 1]");
    }
    std::vector<int> order(row.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
    });
    double mass = 0.0;
    // tiny slack keeps exact-threshold cases stable under float accumulation
    const double target = threshold - 1e-12;
    for (std::size_t i = 0; i < order.size(); ++i) {
        mass += row[static_cast<std::size_t>(order[i])];
        if (mass >= target) {
            return static_cast<int>(i) + 1;
        }
    }
    return static_cast<int>(row.size());
}

struct SupportStats {
    std::array<double, 3> thresholds{0.5, 0.7, 0.9};
    std::array<double, 3> support_sizes{};
    double mean_distance = 0.0;
    double local_mass = 0.0;
    double nonlocal_mass = 0.0;
    int window = 16;
};

struct SpanStats {
    double mean_distance = 0.0;
    double local_mass = 0.0;
    double nonlocal_mass = 0.0;
};

// Mean attention distance and local-window mass for the row of position t
// (row has t + 1 entries; distance of visible position j is t - j).
inline SpanStats span_stats(std::span<const double> row, int position, int window) {
    if (static_cast<int>(row.size()) != position + 1) {
        throw input_error("span_stats: row length must be position + 1");
    }
    SpanStats stats;
    for (int j = 0; j <= position; ++j) {
        const double a = row[static_cast<std::size_t>(j)];
        const int dist = position - j;
        stats.mean_distance += a * dist;
        if (dist <= window) stats.local_mass += a;
    }
    stats.nonlocal_mass = 1.0 - stats.local_mass;
    return stats;
}

struct SparseCheckReport {
    int dims = 0;
    int n_tokens = 0;
    double p = 0.0;
    int trials = 0;
    int redraws = 0;
    double max_abs_z = 0.0;  // max over coordinates of |mean error| / SE
    double empirical_mse = 0.0;
    double formula_mse = 0.0;           // (1-p)/(pT) * mean |g_t|^2 (uncentered)
    double centered_formula_mse = 0.0;  // same with |g_t - g_full|^2
    double empirical_mean_cosine = 0.0;
    std::optional<double> formula_cosine;
    bool zero_full_gradient = false;
    std::vector<double> mean_error;
    std::vector<double> mean_error_se;
};

// Monte Carlo check of the Bernoulli-mask subset-gradient estimator
// g_rand = (1/sum m) sum m_t g_t against g_full = (1/T) sum g_t: empirical
// bias, MSE, and mean cosine next to the closed-form approximations. Token
// gradients are treated as fixed; only the mask is random. Empty masks are
// redrawn and counted.
inline SparseCheckReport sparse_check(const std::vector<std::vector<double>>& token_grads,
                                      double p, int trials, RngStream& rng) {
    const int n_tokens = static_cast<int>(token_grads.size());
    if (n_tokens < 10) {
        throw input_error("sparse_check: need at least 10 token gradients");
    }
    if (trials < 1000) {
        throw input_error("sparse_check: need at least 1000 trials");
    }
    if (!(p > 0.0) || !(p < 1.0)) {
        throw input_error("sparse_check: p must be in (0, 1)");
    }
    const std::size_t dims = token_grads.front().size();
    for (const auto& g : token_grads) {
        if (g.size() != dims) {
            throw input_error("sparse_check: token gradients differ in length");
        }
    }

    std::vector<double> g_full(dims, 0.0);
    double v_bar = 0.0;
    for (const auto& g : token_grads) {
        double n2 = 0.0;
        for (std::size_t i = 0; i < dims; ++i) {
            g_full[i] += g[i];
            n2 += g[i] * g[i];
        }
        v_bar += n2;
    }
    for (auto& v : g_full) v /= n_tokens;
    v_bar /= n_tokens;
    double centered_v = 0.0;
    double full_norm2 = 0.0;
    for (std::size_t i = 0; i < dims; ++i) full_norm2 += g_full[i] * g_full[i];
    for (const auto& g : token_grads) {
        for (std::size_t i = 0; i < dims; ++i) {
            centered_v += (g[i] - g_full[i]) * (g[i] - g_full[i]);
        }
    }
    centered_v /= n_tokens;

    SparseCheckReport report;
    report.dims = static_cast<int>(dims);
    report.n_tokens = n_tokens;
    report.p = p;
    report.trials = trials;
    const double factor = (1.0 - p) / (p * n_tokens);
    report.formula_mse = factor * v_bar;
    report.centered_formula_mse = factor * centered_v;
    report.zero_full_gradient = full_norm2 == 0.0;
    if (!report.zero_full_gradient) {
        report.formula_cosine = 1.0 / std::sqrt(1.0 + factor * v_bar / full_norm2);
    }

    std::vector<double> err_mean(dims, 0.0), err_m2(dims, 0.0);
    std::vector<double> g_rand(dims);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n_tokens));
    double mse_acc = 0.0;
    double cos_acc = 0.0;
    std::int64_t cos_count = 0;
    for (int trial = 0; trial < trials; ++trial) {
        int selected = 0;
        while (selected == 0) {
            selected = 0;
            for (auto& m : mask) {
                m = rng.next_bernoulli(p) ? 1 : 0;
                selected += m;
            }
            if (selected == 0) ++report.redraws;
        }
        std::fill(g_rand.begin(), g_rand.end(), 0.0);
        for (int t = 0; t < n_tokens; ++t) {
            if (!mask[static_cast<std::size_t>(t)]) continue;
            const auto& g = token_grads[static_cast<std::size_t>(t)];
            for (std::size_t i = 0; i < dims; ++i) g_rand[i] += g[i];
        }
        double norm2 = 0.0;
        double dot = 0.0;
        double err2 = 0.0;
        const double inv_k = 1.0 / selected;
        for (std::size_t i = 0; i < dims; ++i) {
            g_rand[i] *= inv_k;
            const double err = g_rand[i] - g_full[i];
            err2 += err * err;
            norm2 += g_rand[i] * g_rand[i];
            dot += g_rand[i] * g_full[i];
            const double delta = err - err_mean[i];
            err_mean[i] += delta / (trial + 1);
            err_m2[i] += delta * (err - err_mean[i]);
        }
        mse_acc += err2;
        if (!report.zero_full_gradient && norm2 > 0.0) {
            cos_acc += dot / std::sqrt(norm2 * full_norm2);
            ++cos_count;
        }
    }
    report.empirical_mse = mse_acc / trials;
    report.empirical_mean_cosine = cos_count > 0 ? cos_acc / cos_count : 0.0;
    report.mean_error = err_mean;
    report.mean_error_se.resize(dims);
    for (std::size_t i = 0; i < dims; ++i) {
        const double var = err_m2[i] / trials;
        const double se = std::sqrt(var / trials);
        report.mean_error_se[i] = se;
        if (se > 0.0) {
            report.max_abs_z = std::max(report.max_abs_z, std::abs(err_mean[i]) / se);
        }
    }
    return report;
}

struct GroupValues {
    std::vector<double> full, anchor, explorer;
    int excluded_responses = 0;
};

// Per-response group means for one step: each response that admits the
// partition contributes the mean entropy of its full/anchor/explorer token
// sets, so anchor <= full <= explorer holds at every step by construction.
inline GroupValues group_entropy_values(const std::vector<std::vector<double>>& response_entropies,
                                        double fraction) {
    GroupValues values;
    for (const auto& ent : response_entropies) {
        std::pair<selection::TokenMask, selection::TokenMask> masks{selection::TokenMask{},
                                                                    selection::TokenMask{}};
        try {
            masks = selection::entropy_partition(ent, fraction);
        } catch (const partition_error&) {
            ++values.excluded_responses;
            continue;
        }
        auto masked_mean = [&](const selection::TokenMask& mask) {
            double sum = 0.0;
            int count = 0;
            for (std::size_t i = 0; i < ent.size(); ++i) {
                if (mask.included[i]) {
                    sum += ent[i];
                    ++count;
                }
            }
            return sum / count;
        };
        values.full.push_back(std::accumulate(ent.begin(), ent.end(), 0.0) /
                              static_cast<double>(ent.size()));
        values.anchor.push_back(masked_mean(masks.first));
        values.explorer.push_back(masked_mean(masks.second));
    }
    return values;
}

struct GroupStats {
    double mean = 0.0;
    double stddev = 0.0;  // population
    int count = 0;
};

struct EntropyDynamicsRow {
    GroupStats full, anchor, explorer;
    int excluded_responses = 0;
};

namespace detail {

inline GroupStats stats_of(std::span<const double> xs) {
    GroupStats s;
    s.count = static_cast<int>(xs.size());
    if (xs.empty()) return s;
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(xs.size()));
    return s;
}

}  // namespace detail

// Mean/std time series per token group.
inline std::vector<EntropyDynamicsRow> entropy_dynamics(std::span<const GroupValues> per_step) {
    std::vector<EntropyDynamicsRow> rows;
    rows.reserve(per_step.size());
    for (const auto& step : per_step) {
        EntropyDynamicsRow row;
        row.full = detail::stats_of(step.full);
        row.anchor = detail::stats_of(step.anchor);
        row.explorer = detail::stats_of(step.explorer);
        row.excluded_responses = step.excluded_responses;
        rows.push_back(row);
    }
    return rows;
}

struct CollapseThresholds {
    double short_frac = 0.3;
    double spike_mult = 2.0;
    double degrade_drop = 0.2;
    int patience = 10;
    int window = 5;
};

struct CollapseStatus {
    bool short_response_collapse = false;
    bool length_instability = false;
    bool reasoning_degeneration = false;
    std::optional<int> short_step, instability_step, degeneration_step;
    std::optional<int> first_trigger_step;
};

struct StepMetric {
    double response_len = 0.0;
    double reward = 0.0;
};

// Detects the three explorer failure modes over a run history:
//  - short-response collapse: length moving average falls below
//    short_frac x the initial moving average,
//  - length instability: a step length exceeds spike_mult x the trailing
//    moving average (previous `window` steps),
//  - reasoning degeneration: the reward moving average sits more than
//    degrade_drop below its running peak for `patience` consecutive steps.
inline CollapseStatus detect_collapse(std::span<const StepMetric> history,
                                      const CollapseThresholds& thresholds) {
    if (history.empty()) {
        throw input_error("detect_collapse: empty history");
    }
    CollapseStatus status;
    const int n = static_cast<int>(history.size());
    const int w = thresholds.window;

    auto moving_average = [&](auto&& get, int step) {
        const int from = std::max(0, step - w + 1);
        double sum = 0.0;
        for (int i = from; i <= step; ++i) sum += get(history[static_cast<std::size_t>(i)]);
        return sum / static_cast<double>(step - from + 1);
    };
    auto len_of = [](const StepMetric& m) { return m.response_len; };
    auto reward_of = [](const StepMetric& m) { return m.reward; };

    const double initial_len_ma = moving_average(len_of, std::min(n, w) - 1);
    double reward_peak = -std::numeric_limits<double>::infinity();
    int degrade_run = 0;
    for (int step = 0; step < n; ++step) {
        if (step >= w) {
            const double len_ma = moving_average(len_of, step);
            if (!status.short_response_collapse &&
                len_ma < thresholds.short_frac * initial_len_ma) {
                status.short_response_collapse = true;
                status.short_step = step;
            }
            double trailing = 0.0;
            for (int i = step - w; i < step; ++i) {
                trailing += history[static_cast<std::size_t>(i)].response_len;
            }
            trailing /= w;
            if (!status.length_instability &&
                history[static_cast<std::size_t>(step)].response_len >
                    thresholds.spike_mult * trailing) {
                status.length_instability = true;
                status.instability_step = step;
            }
        }
        const double reward_ma = moving_average(reward_of, step);
        reward_peak = std::max(reward_peak, reward_ma);
        if (reward_peak - reward_ma > thresholds.degrade_drop) {
            ++degrade_run;
        } else {
            degrade_run = 0;
        }
        if (!status.reasoning_degeneration && degrade_run >= thresholds.patience) {
            status.reasoning_degeneration = true;
            status.degeneration_step = step;
        }
    }
    for (const auto& s : {status.short_step, status.instability_step, status.degeneration_step}) {
        if (s && (!status.first_trigger_step || *s < *status.first_trigger_step)) {
            status.first_trigger_step = s;
        }
    }
    return status;
}

}  // namespace tokenlab::probes
