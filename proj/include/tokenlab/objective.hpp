#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokenlab/errors.hpp"

namespace tokenlab::objective {

// Rule-based verifier values plus the soft overlong penalty ramp.
struct RewardSpec {
    double reward_correct = 1.0;
    double reward_wrong = -1.0;
    double reward_missing = -2.0;
    int overlong_buffer = 2048;
    double overlong_factor = 1.0;
    int max_response_len = 8192;
};

enum class Normalization : std::uint8_t {
    selected_mean,      // sum(w*l) / sum(w)
    all_token_mean,     // sum(w*l) / T, binary masks
    all_token_weighted, // sum(w*l) / T, continuous weights
};

struct LossSpec {
    Normalization normalization = Normalization::selected_mean;
    double clip_low = 0.2;
    double clip_high = 0.28;
};

struct BoxedExtraction {
    std::optional<std::string> answer;
    bool unbalanced_group = false;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto begin = s.find_first_not_of(" \t\n\r");
    if (begin == std::string_view::npos) {
        return "";
    }
    const auto end = s.find_last_not_of(" \t\n\r");
    return std::string(s.substr(begin, end - begin + 1));
}

}  // namespace detail

// Content of the last balanced \boxed{...} group, whitespace-trimmed.
// Groups with unbalanced braces are skipped and recorded.
inline BoxedExtraction extract_boxed(std::string_view text) {
    static constexpr std::string_view kMarker = "\\boxed{";
    BoxedExtraction result;
    std::size_t search = 0;
    while (true) {
        const std::size_t at = text.find(kMarker, search);
        if (at == std::string_view::npos) {
            break;
        }
        const std::size_t open = at + kMarker.size();
        int depth = 1;
        std::size_t i = open;
        for (; i < text.size(); ++i) {
            if (text[i] == '{') {
                ++depth;
            } else if (text[i] == '}') {
                --depth;
                if (depth == 0) {
                    break;
                }
            }
        }
        if (depth == 0) {
            result.answer = detail::trim(text.substr(open, i - open));
            search = i + 1;
        } else {
            result.unbalanced_group = true;
            search = open;
        }
    }
    return result;
}

// Base reward in {missing, wrong, correct} by boxed-answer string match, then
// a soft overlong penalty: once response_len exceeds
// max_response_len - overlong_buffer, subtract
// overlong_factor * min(1, overflow / overlong_buffer).
inline double verify_reward(std::string_view response_text, std::string_view reference,
                            int response_len, const RewardSpec& spec) {
    if (reference.empty()) {
        throw input_error("verify_reward: empty reference answer");
    }
    const auto extraction = extract_boxed(response_text);
    double reward = spec.reward_missing;
    if (extraction.answer.has_value()) {
        reward = (*extraction.answer == reference) ? spec.reward_correct : spec.reward_wrong;
    }
    const int soft_start = spec.max_response_len - spec.overlong_buffer;
    if (response_len > soft_start && spec.overlong_buffer > 0) {
        const double overflow = static_cast<double>(response_len - soft_start);
        reward -= spec.overlong_factor * std::min(1.0, overflow / spec.overlong_buffer);
    }
    return reward;
}

// GRPO advantages: A_i = (R_i - mean(R)) / (std_pop(R) + eps_std), broadcast
// to every token of response i by the caller.
inline std::vector<double> group_advantages(std::span<const double> rewards,
                                            double eps_std = 1e-6) {
    if (rewards.size() < 2) {
        throw group_error("group_advantages: need at least 2 responses");
    }
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= n;
    const double denom = std::sqrt(var) + eps_std;
    std::vector<double> advantages(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        advantages[i] = (rewards[i] - mean) / denom;
    }
    return advantages;
}

// Asymmetric clipped surrogate:
// l_t = -min(r_t * A_t, clip(r_t, 1 - clip_low, 1 + clip_high) * A_t).
inline double per_token_clip_loss(double ratio, double advantage, const LossSpec& spec) {
    if (!(ratio > 0.0)) {
        throw numeric_error("per_token_clip_loss: importance ratio must be positive");
    }
    const double clipped = std::clamp(ratio, 1.0 - spec.clip_low, 1.0 + spec.clip_high);
    return -std::min(ratio * advantage, clipped * advantage);
}

// d(l_t)/d(ratio). Nonzero only while the unclipped branch is active:
// r <= 1 + clip_high for positive advantages, r >= 1 - clip_low for negative.
inline double per_token_clip_loss_dratio(double ratio, double advantage, const LossSpec& spec) {
    if (!(ratio > 0.0)) {
        throw numeric_error("per_token_clip_loss_dratio: importance ratio must be positive");
    }
    const bool active = advantage >= 0.0 ? (ratio <= 1.0 + spec.clip_high)
                                         : (ratio >= 1.0 - spec.clip_low);
    return active ? -advantage : 0.0;
}

// Aggregate weighted per-token losses under the selected normalization.
// Both all-token modes divide by the token count; they differ only in what
// kinds of weights they are used with.
inline double aggregate(std::span<const double> losses, std::span<const double> weights,
                        Normalization normalization) {
    if (losses.size() != weights.size()) {
        throw input_error("aggregate: losses and weights differ in length");
    }
    double weighted = 0.0;
    double weight_sum = 0.0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        if (weights[i] < 0.0) {
            throw input_error("aggregate: negative weight");
        }
        weighted += weights[i] * losses[i];
        weight_sum += weights[i];
    }
    if (normalization == Normalization::selected_mean) {
        if (weight_sum <= 0.0) {
            throw degenerate_error("aggregate: selected-mean with zero weight sum");
        }
        return weighted / weight_sum;
    }
    if (losses.empty()) {
        throw degenerate_error("aggregate: empty token set");
    }
    return weighted / static_cast<double>(losses.size());
}

}  // namespace tokenlab::objective
