#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace tokenlab {

namespace detail {

// SplitMix64; used to whiten seeds and to hash stream paths.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace detail

// Deterministic random stream. All floating-point draws are derived from raw
// mt19937_64 output with fixed formulas, so sequences are reproducible across
// standard libraries (std distributions are not).
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : gen_(detail::splitmix64(seed)) {}

    // Child stream at a hashed path under a root seed, e.g.
    // derive(seed, {step, prompt, rollout}). Independent paths give
    // independent streams.
    static RngStream derive(std::uint64_t root_seed, std::initializer_list<std::uint64_t> path) {
        std::uint64_t h = detail::splitmix64(root_seed);
        for (std::uint64_t p : path) {
            h = detail::splitmix64(h ^ detail::splitmix64(p + 0x632be59bd9b4e019ULL));
        }
        return RngStream(h);
    }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in (0, 1]; safe under log().
    double next_uniform_open() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; caches the second value of each pair.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = next_uniform_open();
        const double u2 = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [lo, hi], inclusive.
    int next_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    bool next_bernoulli(double p) { return next_uniform() < p; }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace tokenlab
