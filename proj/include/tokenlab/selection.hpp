#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tokenlab/errors.hpp"
#include "tokenlab/rng.hpp"

namespace tokenlab::selection {

enum class Rule : std::uint8_t {
    anchor,
    explorer,
    random,
    front,
    back,
    score_low,
    score_high,
};

struct TokenMask {
    std::vector<std::uint8_t> included;
    double fraction = 0.0;
    Rule rule = Rule::random;
    bool resampled = false;

    int count() const {
        int k = 0;
        for (auto m : included) k += m;
        return k;
    }
    int size() const { return static_cast<int>(included.size()); }
    bool empty_selection() const { return count() == 0; }
};

// k = max(1, round-half-up(p * T)).
inline int budget_count(int n_tokens, double fraction) {
    return std::max(1, static_cast<int>(std::floor(fraction * n_tokens + 0.5)));
}

namespace detail {

// Indices in ascending score order; equal scores keep earlier positions first.
inline std::vector<int> stable_ascending(std::span<const double> scores) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
    });
    return order;
}

inline void check_finite(std::span<const double> scores, const char* what) {
    for (double s : scores) {
        if (!std::isfinite(s)) {
            throw input_error(std::string(what) + ": non-finite score");
        }
    }
}

}  // namespace detail

// Within-response partition: anchor = k lowest-entropy tokens,
// explorer = k highest. Requires 2k <= T so the two sets are disjoint.
inline std::pair<TokenMask, TokenMask> entropy_partition(std::span<const double> entropies,
                                                         double fraction) {
    const int n = static_cast<int>(entropies.size());
    if (n == 0) {
        throw partition_error("entropy_partition: empty response");
    }
    if (fraction <= 0.0 || fraction >= 1.0) {
        throw input_error("entropy_partition: fraction must be in (0, 1)");
    }
    detail::check_finite(entropies, "entropy_partition");
    const int k = budget_count(n, fraction);
    if (2 * k > n) {
        throw partition_error("entropy_partition: response too short (2k > T)");
    }
    const auto order = detail::stable_ascending(entropies);
    TokenMask anchor{std::vector<std::uint8_t>(entropies.size(), 0), fraction, Rule::anchor, false};
    TokenMask explorer{std::vector<std::uint8_t>(entropies.size(), 0), fraction, Rule::explorer, false};
    for (int i = 0; i < k; ++i) {
        anchor.included[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
        explorer.included[static_cast<std::size_t>(order[static_cast<std::size_t>(n - k + i)])] = 1;
    }
    return {anchor, explorer};
}

// Independent Bernoulli(p) per token; an empty draw is resampled once and
// the resample is recorded on the mask.
inline TokenMask random_mask(int n_tokens, double p, RngStream& rng) {
    if (p <= 0.0 || p >= 1.0) {
        throw input_error("random_mask: p must be in (0, 1)");
    }
    TokenMask mask{std::vector<std::uint8_t>(static_cast<std::size_t>(n_tokens), 0), p,
                   Rule::random, false};
    auto draw = [&] {
        for (auto& m : mask.included) m = rng.next_bernoulli(p) ? 1 : 0;
    };
    draw();
    if (n_tokens > 0 && mask.empty_selection()) {
        mask.resampled = true;
        draw();
    }
    return mask;
}

enum class Region : std::uint8_t { front, back };

// Fixed-position masks over 1-indexed tokens:
// front = {t : t/T <= fraction}, back = {t : t/T > 1 - fraction}.
inline TokenMask position_mask(int n_tokens, Region region, double fraction) {
    if (n_tokens < 1) {
        throw input_error("position_mask: empty response");
    }
    TokenMask mask{std::vector<std::uint8_t>(static_cast<std::size_t>(n_tokens), 0), fraction,
                   region == Region::front ? Rule::front : Rule::back, false};
    for (int t = 1; t <= n_tokens; ++t) {
        const double rel = static_cast<double>(t) / n_tokens;
        const bool in = region == Region::front ? (rel <= fraction) : (rel > 1.0 - fraction);
        mask.included[static_cast<std::size_t>(t - 1)] = in ? 1 : 0;
    }
    return mask;
}

enum class End : std::uint8_t { low, high };

// Generic bottom/top-k selector over arbitrary per-token scores
// (prediction entropy, |loss| magnitude); same budget and tie rules as
// entropy_partition.
inline TokenMask score_mask(std::span<const double> scores, End end, double fraction) {
    const int n = static_cast<int>(scores.size());
    if (n == 0) {
        throw partition_error("score_mask: empty response");
    }
    if (fraction <= 0.0 || fraction >= 1.0) {
        throw input_error("score_mask: fraction must be in (0, 1)");
    }
    detail::check_finite(scores, "score_mask");
    const int k = budget_count(n, fraction);
    if (2 * k > n) {
        throw partition_error("score_mask: response too short (2k > T)");
    }
    const auto order = detail::stable_ascending(scores);
    TokenMask mask{std::vector<std::uint8_t>(scores.size(), 0), fraction,
                   end == End::low ? Rule::score_low : Rule::score_high, false};
    for (int i = 0; i < k; ++i) {
        const int idx = end == End::low ? order[static_cast<std::size_t>(i)]
                                        : order[static_cast<std::size_t>(n - k + i)];
        mask.included[static_cast<std::size_t>(idx)] = 1;
    }
    return mask;
}

enum class QuadrantLabel : std::uint8_t { lp_la, hp_la, lp_ha, hp_ha };

inline const char* quadrant_name(QuadrantLabel q) {
    switch (q) {
        case QuadrantLabel::lp_la: return "LP-LA";
        case QuadrantLabel::hp_la: return "HP-LA";
        case QuadrantLabel::lp_ha: return "LP-HA";
        case QuadrantLabel::hp_ha: return "HP-HA";
    }
    return "?";
}

namespace detail {

inline double median(std::span<const double> xs) {
    std::vector<double> sorted(xs.begin(), xs.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    if (n % 2 == 1) {
        return sorted[n / 2];
    }
    return 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

}  // namespace detail

// Within-response median split on both scores; values exactly at the median
// are labeled Low.
inline std::vector<QuadrantLabel> quadrant_assign(std::span<const double> h_pred,
                                                  std::span<const double> h_attn) {
    if (h_pred.size() != h_attn.size() || h_pred.size() < 2) {
        throw input_error("quadrant_assign: need two equal-length vectors of size >= 2");
    }
    const double med_pred = detail::median(h_pred);
    const double med_attn = detail::median(h_attn);
    std::vector<QuadrantLabel> labels(h_pred.size());
    for (std::size_t i = 0; i < h_pred.size(); ++i) {
        const bool hp = h_pred[i] > med_pred;
        const bool ha = h_attn[i] > med_attn;
        labels[i] = hp ? (ha ? QuadrantLabel::hp_ha : QuadrantLabel::hp_la)
                       : (ha ? QuadrantLabel::lp_ha : QuadrantLabel::lp_la);
    }
    return labels;
}

// Product-moment correlation.
inline double pearson(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) {
        throw input_error("pearson: need two equal-length vectors of size >= 2");
    }
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw input_error("pearson: zero variance");
    }
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace tokenlab::selection
