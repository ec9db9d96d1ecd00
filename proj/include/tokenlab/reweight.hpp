#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokenlab/errors.hpp"

namespace tokenlab::reweight {

enum class Schedule : std::uint8_t { low2high, high2low, static_low, static_high };

inline const char* schedule_name(Schedule s) {
    switch (s) {
        case Schedule::low2high: return "low2high";
        case Schedule::high2low: return "high2low";
        case Schedule::static_low: return "static-low";
        case Schedule::static_high: return "static-high";
    }
    return "?";
}

inline Schedule parse_schedule(std::string_view name) {
    if (name == "low2high") return Schedule::low2high;
    if (name == "high2low") return Schedule::high2low;
    if (name == "static-low") return Schedule::static_low;
    if (name == "static-high") return Schedule::static_high;
    throw config_error("unknown reweight schedule: " + std::string(name));
}

struct ReweightConfig {
    double tau = 0.8;
    double eps = 1e-8;
    int warmup_steps = 80;
    Schedule schedule = Schedule::low2high;
    double w_low_start = 1.0;
    double w_low_end = 0.0;
    double w_high_start = 0.0;
    double w_high_end = 1.0;

    void validate() const {
        if (tau <= 0.0) throw config_error("reweight: tau must be positive");
        if (warmup_steps < 1) throw config_error("reweight: warmup_steps must be >= 1");
        if (w_low_start < 0.0 || w_low_end < 0.0 || w_high_start < 0.0 || w_high_end < 0.0) {
            throw config_error("reweight: endpoint weights must be nonnegative");
        }
    }

    // Endpoint defaults per schedule; low2high moves emphasis from the
    // low-entropy end to the high-entropy end over warmup, high2low reverses,
    // static-* holds one endpoint bias throughout.
    static ReweightConfig for_schedule(Schedule schedule) {
        ReweightConfig c;
        c.schedule = schedule;
        switch (schedule) {
            case Schedule::low2high:
                c.w_low_start = 1.0; c.w_low_end = 0.0;
                c.w_high_start = 0.0; c.w_high_end = 1.0;
                break;
            case Schedule::high2low:
                c.w_low_start = 0.0; c.w_low_end = 1.0;
                c.w_high_start = 1.0; c.w_high_end = 0.0;
                break;
            case Schedule::static_low:
                c.w_low_start = 1.0; c.w_low_end = 1.0;
                c.w_high_start = 0.0; c.w_high_end = 0.0;
                break;
            case Schedule::static_high:
                c.w_low_start = 0.0; c.w_low_end = 0.0;
                c.w_high_start = 1.0; c.w_high_end = 1.0;
                break;
        }
        return c;
    }
};

struct EndpointWeights {
    double w_low = 0.0;
    double w_high = 0.0;
};

// Linear interpolation of both endpoints over clipped warmup progress
// r_s = min(s / S_warm, 1); constant after warmup.
inline EndpointWeights endpoint_weights(int step, const ReweightConfig& config) {
    config.validate();
    if (step < 0) {
        throw input_error("endpoint_weights: step must be >= 0");
    }
    const double progress =
        std::min(static_cast<double>(step) / static_cast<double>(config.warmup_steps), 1.0);
    return {config.w_low_start + progress * (config.w_low_end - config.w_low_start),
            config.w_high_start + progress * (config.w_high_end - config.w_high_start)};
}

// Continuous token weights over all valid response tokens in a batch:
// temperature-scaled softmax of the entropies (max-shifted), min-max rescale,
// then interpolation between the scheduled endpoint weights.
inline std::vector<double> soft_weights(std::span<const double> entropies,
                                        const ReweightConfig& config, int step) {
    config.validate();
    if (entropies.empty()) {
        throw input_error("soft_weights: empty valid-token set");
    }
    for (double h : entropies) {
        if (!std::isfinite(h)) {
            throw input_error("soft_weights: non-finite entropy");
        }
    }
    const auto [w_low, w_high] = endpoint_weights(step, config);

    double shift = -std::numeric_limits<double>::infinity();
    for (double h : entropies) shift = std::max(shift, h / config.tau);

    std::vector<double> alpha(entropies.size());
    double denom = config.eps;
    for (std::size_t i = 0; i < entropies.size(); ++i) {
        alpha[i] = std::exp(entropies[i] / config.tau - shift);
        denom += alpha[i];
    }
    double alpha_min = std::numeric_limits<double>::infinity();
    double alpha_max = -std::numeric_limits<double>::infinity();
    for (auto& a : alpha) {
        a /= denom;
        alpha_min = std::min(alpha_min, a);
        alpha_max = std::max(alpha_max, a);
    }
    const double spread = alpha_max - alpha_min + config.eps;

    std::vector<double> weights(entropies.size());
    for (std::size_t i = 0; i < entropies.size(); ++i) {
        const double rescaled = (alpha[i] - alpha_min) / spread;
        weights[i] = (1.0 - rescaled) * w_low + rescaled * w_high;
    }
    return weights;
}

}  // namespace tokenlab::reweight
