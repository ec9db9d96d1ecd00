#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tokenlab/capture.hpp"
#include "tokenlab/errors.hpp"

namespace tokenlab::entropy {

// Probabilities below this are treated as exact zeros inside entropy sums.
inline constexpr double kProbFloor = 1e-12;
inline constexpr double kRowSumTol = 1e-6;

namespace detail {

inline void validate_row(std::span<const double> row) {
    if (row.empty()) {
        throw input_error("entropy: empty probability row");
    }
    double sum = 0.0;
    for (double a : row) {
        if (a < 0.0) {
            throw input_error("entropy: negative probability entry");
        }
        sum += a;
    }
    if (std::abs(sum - 1.0) > kRowSumTol) {
        throw input_error("entropy: row sums to " + std::to_string(sum) + ", expected 1");
    }
}

// -sum a log a over an unnormalized mass vector scaled by 1/total.
inline double entropy_of_mass(std::span<const double> mass, double total) {
    double h = 0.0;
    for (double m : mass) {
        const double p = m / total;
        if (p > kProbFloor) {
            h -= p * std::log(p);
        }
    }
    return h;
}

}  // namespace detail

// H_raw = -sum_j a_j log a_j (nats), with 0 log 0 := 0.
inline double raw_entropy(std::span<const double> row) {
    detail::validate_row(row);
    return detail::entropy_of_mass(row, 1.0);
}

// H_norm = H_raw / log N, in [0, 1]; defined as 0 for N = 1.
inline double normalized_entropy(std::span<const double> row) {
    const double h = raw_entropy(row);
    if (row.size() == 1) {
        return 0.0;
    }
    return h / std::log(static_cast<double>(row.size()));
}

// Entropy of the renormalized k largest entries; equals raw_entropy when
// k >= N. Ties in attention mass are broken toward earlier positions.
inline double topk_entropy(std::span<const double> row, int k) {
    detail::validate_row(row);
    if (k < 1) {
        throw input_error("topk_entropy: k must be >= 1");
    }
    const int n = static_cast<int>(row.size());
    if (k >= n) {
        return detail::entropy_of_mass(row, 1.0);
    }
    std::vector<int> order(row.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)]; });
    std::vector<double> top(static_cast<std::size_t>(k));
    double mass = 0.0;
    for (int i = 0; i < k; ++i) {
        top[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        mass += top[static_cast<std::size_t>(i)];
    }
    if (mass <= 0.0) {
        throw degenerate_error("topk_entropy: top-k mass is zero");
    }
    return detail::entropy_of_mass(top, mass);
}

// Entropy of the renormalized restriction to the first min(K, N) positions.
inline double fixed_position_entropy(std::span<const double> row, int window) {
    detail::validate_row(row);
    if (window < 1) {
        throw input_error("fixed_position_entropy: K must be >= 1");
    }
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(window), row.size());
    const auto head = row.first(keep);
    const double mass = std::accumulate(head.begin(), head.end(), 0.0);
    if (mass <= 0.0) {
        throw degenerate_error("fixed_position_entropy: restricted mass is zero");
    }
    return detail::entropy_of_mass(head, mass);
}

// Shannon entropy of a next-token vocabulary distribution (nats).
inline double prediction_entropy(std::span<const double> dist) {
    return raw_entropy(dist);
}

// Which attention-entropy score to evaluate on a row.
struct Variant {
    enum class Kind { raw, normalized, topk, fixed } kind = Kind::normalized;
    int k = 256;

    static Variant raw() { return {Kind::raw, 0}; }
    static Variant normalized() { return {Kind::normalized, 0}; }
    static Variant topk(int k) { return {Kind::topk, k}; }
    static Variant fixed(int window) { return {Kind::fixed, window}; }

    double operator()(std::span<const double> row) const {
        switch (kind) {
            case Kind::raw: return raw_entropy(row);
            case Kind::normalized: return normalized_entropy(row);
            case Kind::topk: return topk_entropy(row, k);
            case Kind::fixed: return fixed_position_entropy(row, k);
        }
        throw input_error("entropy: unknown variant");
    }
};

// Entropy of the attention row at the generation step of each response token:
// response token t (1-indexed) is predicted at input position
// prompt_len + t - 2, so the rows consumed run from prompt_len - 1 to
// prompt_len + response_len - 2.
inline std::vector<double> decision_entropies(const AttentionCapture& capture, int layer,
                                              int prompt_len, int response_len,
                                              const Variant& variant = Variant::normalized()) {
    if (prompt_len < 1 || response_len < 0) {
        throw input_error("decision_entropies: bad prompt/response lengths");
    }
    const auto& rows = capture.rows(layer);
    const int first_needed = prompt_len - 1;
    const int last_needed = prompt_len + response_len - 2;
    if (first_needed < capture.first_position ||
        last_needed - capture.first_position >= static_cast<int>(rows.size())) {
        throw alignment_error("decision_entropies: capture window too short");
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(response_len));
    for (int t = 0; t < response_len; ++t) {
        out.push_back(variant(capture.row_at(layer, first_needed + t)));
    }
    return out;
}

// Per-response-token entropy scores kept together for logging.
struct EntropyRecord {
    double h_raw = 0.0;
    double h_norm = 0.0;
    double h_topk = 0.0;
    double h_fix = 0.0;
    double h_pred = 0.0;
    int n_visible = 0;
};

inline std::vector<EntropyRecord> make_records(const AttentionCapture& capture, int layer,
                                               int prompt_len, int response_len,
                                               const std::vector<std::vector<double>>& pred_dists,
                                               int topk_k = 256, int fixed_window = 256) {
    if (static_cast<int>(pred_dists.size()) != response_len) {
        throw input_error("make_records: prediction distributions do not match response length");
    }
    std::vector<EntropyRecord> records(static_cast<std::size_t>(response_len));
    for (int t = 0; t < response_len; ++t) {
        const auto& row = capture.row_at(layer, prompt_len - 1 + t);
        auto& rec = records[static_cast<std::size_t>(t)];
        rec.h_raw = raw_entropy(row);
        rec.h_norm = normalized_entropy(row);
        rec.h_topk = topk_entropy(row, topk_k);
        rec.h_fix = fixed_position_entropy(row, fixed_window);
        rec.h_pred = prediction_entropy(pred_dists[static_cast<std::size_t>(t)]);
        rec.n_visible = static_cast<int>(row.size());
    }
    return records;
}

}  // namespace tokenlab::entropy
