#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "tokenlab/probes.hpp"

using namespace tokenlab;
using Catch::Approx;

TEST_CASE("gradient geometry analytic cases") {
    const std::vector<double> g{1.0, 2.0, -1.0, 0.5};
    const auto same = probes::gradient_geometry(g, g);
    CHECK(same.norm_ratio == Approx(1.0).margin(1e-12));
    CHECK(*same.cosine == Approx(1.0).margin(1e-12));
    CHECK(same.proj_ratio == Approx(1.0).margin(1e-12));

    const std::vector<double> a{1.0, 0.0}, b{0.0, 3.0};
    const auto ortho = probes::gradient_geometry(a, b);
    CHECK(*ortho.cosine == Approx(0.0).margin(1e-12));
    CHECK(ortho.proj_ratio == Approx(0.0).margin(1e-12));

    std::vector<double> doubled(g);
    for (auto& x : doubled) x *= 2.0;
    const auto scaled = probes::gradient_geometry(doubled, g);
    CHECK(scaled.norm_ratio == Approx(2.0).margin(1e-12));
    CHECK(*scaled.cosine == Approx(1.0).margin(1e-12));
    CHECK(scaled.proj_ratio == Approx(2.0).margin(1e-12));

    const std::vector<double> zero(4, 0.0);
    CHECK_THROWS_AS(probes::gradient_geometry(g, zero), geometry_error);
    const auto flagged = probes::gradient_geometry(zero, g);
    CHECK(flagged.subset_zero);
    CHECK_FALSE(flagged.cosine.has_value());
    CHECK(flagged.norm_ratio == 0.0);
    CHECK(flagged.proj_ratio == 0.0);
}

TEST_CASE("geometry identity on random pairs") {
    RngStream rng(31);
    for (int i = 0; i < 1000; ++i) {
        const int n = rng.next_int(2, 200);
        const auto gs = testutil::random_vector(rng, n);
        const auto gf = testutil::random_vector(rng, n);
        const auto geo = probes::gradient_geometry(gs, gf);
        REQUIRE(geo.cosine.has_value());
        CHECK(geo.proj_ratio == Approx(*geo.cosine * geo.norm_ratio).margin(1e-9));
        CHECK(*geo.cosine >= -1.0 - 1e-12);
        CHECK(*geo.cosine <= 1.0 + 1e-12);
    }
}

namespace {

// Synthetic linear gradient oracle: per-token gradients are fixed vectors and
// the all-token-mean batch gradient is sum(w_t g_t) / total_tokens.
struct LinearOracle {
    std::vector<std::vector<std::vector<double>>> token_grads;  // [response][token][dim]
    int total_tokens = 0;

    std::vector<double> full() const {
        std::vector<double> g(token_grads[0][0].size(), 0.0);
        for (const auto& resp : token_grads) {
            for (const auto& tg : resp) {
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += tg[i];
            }
        }
        for (auto& x : g) x /= total_tokens;
        return g;
    }

    std::vector<double> operator()(const std::vector<std::vector<double>>& weights) const {
        std::vector<double> g(token_grads[0][0].size(), 0.0);
        for (std::size_t r = 0; r < token_grads.size(); ++r) {
            for (std::size_t t = 0; t < token_grads[r].size(); ++t) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += weights[r][t] * token_grads[r][t][i];
                }
            }
        }
        for (auto& x : g) x /= total_tokens;
        return g;
    }
};

}  // namespace

TEST_CASE("decile decomposition identities") {
    RngStream rng(33);
    LinearOracle oracle;
    std::vector<std::vector<double>> entropies;
    for (int r = 0; r < 3; ++r) {
        const int T = 10 + 5 * r;
        oracle.total_tokens += T;
        std::vector<std::vector<double>> grads;
        std::vector<double> ent;
        for (int t = 0; t < T; ++t) {
            grads.push_back(testutil::random_vector(rng, 6));
            ent.push_back(rng.next_uniform());
        }
        oracle.token_grads.push_back(grads);
        entropies.push_back(ent);
    }
    const auto g_full = oracle.full();
    const auto report = probes::decile_decomposition(
        entropies, [&](const auto& w) { return oracle(w); }, g_full);
    const double total = std::accumulate(report.proj_ratio.begin(), report.proj_ratio.end(), 0.0);
    CHECK(total == Approx(1.0).margin(1e-9));
    CHECK(report.band_share[0] + report.band_share[1] + report.band_share[2] ==
          Approx(1.0).margin(1e-12));
    CHECK(report.excluded_responses == 0);
}

TEST_CASE("decile decomposition with identical token gradients") {
    LinearOracle oracle;
    const std::vector<double> g{1.0, -2.0, 0.5};
    const int T = 30;
    oracle.total_tokens = T;
    oracle.token_grads.push_back(std::vector<std::vector<double>>(T, g));
    std::vector<std::vector<double>> entropies{std::vector<double>(T)};
    for (int t = 0; t < T; ++t) entropies[0][static_cast<std::size_t>(t)] = 0.01 * t;
    const auto report = probes::decile_decomposition(
        entropies, [&](const auto& w) { return oracle(w); }, oracle.full());
    for (double pr : report.proj_ratio) {
        CHECK(pr == Approx(0.1).margin(1e-12));
    }
}

TEST_CASE("decile decomposition exclusions") {
    RngStream rng(34);
    LinearOracle oracle;
    std::vector<std::vector<double>> entropies;
    // one long response, one too short for ten deciles
    for (int T : {12, 5}) {
        oracle.total_tokens += T;
        std::vector<std::vector<double>> grads;
        std::vector<double> ent;
        for (int t = 0; t < T; ++t) {
            grads.push_back(testutil::random_vector(rng, 4));
            ent.push_back(rng.next_uniform());
        }
        oracle.token_grads.push_back(grads);
        entropies.push_back(ent);
    }
    const auto report = probes::decile_decomposition(
        entropies, [&](const auto& w) { return oracle(w); }, oracle.full());
    CHECK(report.excluded_responses == 1);

    std::vector<std::vector<double>> all_short{{0.1, 0.2}, {0.3}};
    CHECK_THROWS_AS(probes::decile_decomposition(
                        all_short, [&](const auto& w) { return oracle(w); }, oracle.full()),
                    partition_error);
}

TEST_CASE("online cv") {
    const auto constant = probes::online_cv(std::vector<double>{1, 1, 1});
    for (const auto& s : constant) {
        CHECK(s.stddev == 0.0);
        CHECK(s.cv == 0.0);
    }
    const auto two = probes::online_cv(std::vector<double>{0, 2});
    CHECK(two[0].stddev == 0.0);
    CHECK(two[0].cv == 0.0);
    CHECK(two[1].mean == Approx(1.0).margin(1e-12));
    CHECK(two[1].stddev == Approx(1.0).margin(1e-12));
    CHECK(two[1].cv == Approx(1.0).margin(1e-6));

    const auto single = probes::online_cv(std::vector<double>{3.5});
    CHECK(single[0].stddev == 0.0);
    CHECK(single[0].cv == 0.0);

    // matches naive prefix recomputation
    RngStream rng(36);
    const auto series = testutil::random_vector(rng, 200, 2.0);
    const auto stats = probes::online_cv(series);
    for (std::size_t i = 0; i < series.size(); i += 17) {
        double mean = 0.0;
        for (std::size_t j = 0; j <= i; ++j) mean += series[j];
        mean /= static_cast<double>(i + 1);
        double var = 0.0;
        for (std::size_t j = 0; j <= i; ++j) var += (series[j] - mean) * (series[j] - mean);
        var /= static_cast<double>(i + 1);
        CHECK(stats[i].mean == Approx(mean).margin(1e-10));
        CHECK(stats[i].stddev == Approx(std::sqrt(var)).margin(1e-10));
    }
    CHECK_THROWS_AS(probes::online_cv(std::vector<double>{}), input_error);
}

TEST_CASE("support size") {
    const std::vector<double> row{0.6, 0.3, 0.1};
    CHECK(probes::support_size(row, 0.5) == 1);
    CHECK(probes::support_size(row, 0.9) == 2);
    CHECK(probes::support_size(std::vector<double>(10, 0.1), 0.5) == 5);
    const std::vector<double> onehot{0, 0, 1, 0};
    CHECK(probes::support_size(onehot, 0.3) == 1);
    CHECK(probes::support_size(onehot, 1.0) == 1);

    RngStream rng(37);
    for (int i = 0; i < 300; ++i) {
        const auto r = testutil::random_prob_row(rng, rng.next_int(1, 50));
        int prev = 0;
        for (double theta : {0.3, 0.5, 0.7, 0.9, 1.0}) {
            const int s = probes::support_size(r, theta);
            CHECK(s >= prev);  // monotone in threshold
            CHECK(s <= static_cast<int>(r.size()));
            CHECK(s >= 1);
            prev = s;
        }
    }
    CHECK_THROWS_AS(probes::support_size(row, 0.0), input_error);
    CHECK_THROWS_AS(probes::support_size(row, 1.5), input_error);
}

TEST_CASE("span statistics") {
    // all mass at the current position
    std::vector<double> self(6, 0.0);
    self[5] = 1.0;
    const auto s0 = probes::span_stats(self, 5, 4);
    CHECK(s0.mean_distance == 0.0);
    CHECK(s0.local_mass == 1.0);
    CHECK(s0.nonlocal_mass == 0.0);

    // half mass at distance 1, half at distance 9
    std::vector<double> split(10, 0.0);
    split[8] = 0.5;  // distance 1 from position 9
    split[0] = 0.5;  // distance 9
    const auto s1 = probes::span_stats(split, 9, 4);
    CHECK(s1.mean_distance == Approx(5.0).margin(1e-12));
    CHECK(s1.local_mass == Approx(0.5).margin(1e-12));
    CHECK(s1.nonlocal_mass == Approx(0.5).margin(1e-12));

    const auto s2 = probes::span_stats(std::vector<double>(11, 1.0 / 11), 10, 4);
    CHECK(s2.mean_distance == Approx(5.0).margin(1e-12));

    RngStream rng(38);
    for (int i = 0; i < 200; ++i) {
        const int t = rng.next_int(0, 30);
        const auto row = testutil::random_prob_row(rng, t + 1);
        const auto s = probes::span_stats(row, t, 8);
        CHECK(s.local_mass + s.nonlocal_mass == Approx(1.0).margin(1e-9));
        CHECK(s.mean_distance >= 0.0);
        CHECK(s.mean_distance <= t + 1e-12);
    }
    CHECK_THROWS_AS(probes::span_stats(std::vector<double>{1.0}, 3, 4), input_error);
}

TEST_CASE("sparse check on a small gradient set") {
    RngStream rng(39);
    std::vector<std::vector<double>> grads;
    for (int t = 0; t < 50; ++t) {
        auto g = testutil::random_vector(rng, 4);
        g[0] += 0.5;  // nonzero common mean
        grads.push_back(g);
    }
    RngStream mc(40);
    const auto report = probes::sparse_check(grads, 0.3, 4000, mc);
    CHECK(report.n_tokens == 50);
    CHECK(report.max_abs_z < 5.0);
    CHECK(report.formula_mse > 0.0);
    CHECK(report.centered_formula_mse > 0.0);
    CHECK(report.centered_formula_mse < report.formula_mse);  // mean is nonzero
    CHECK(report.empirical_mse > 0.0);
    REQUIRE(report.formula_cosine.has_value());
    CHECK(report.empirical_mean_cosine > 0.5);

    CHECK_THROWS_AS(probes::sparse_check(grads, 1.5, 2000, mc), input_error);
    CHECK_THROWS_AS(probes::sparse_check(grads, 0.2, 10, mc), input_error);
    std::vector<std::vector<double>> few(grads.begin(), grads.begin() + 5);
    CHECK_THROWS_AS(probes::sparse_check(few, 0.2, 2000, mc), input_error);
}

TEST_CASE("group entropy values and dynamics") {
    // single response with distinct entropies: group means are subset means
    std::vector<std::vector<double>> single{{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}};
    const auto values = probes::group_entropy_values(single, 0.2);
    REQUIRE(values.full.size() == 1);
    CHECK(values.full[0] == Approx(0.55).margin(1e-12));
    CHECK(values.anchor[0] == Approx(0.15).margin(1e-12));
    CHECK(values.explorer[0] == Approx(0.95).margin(1e-12));

    std::vector<std::vector<double>> constant{{0.4, 0.4, 0.4, 0.4, 0.4}};
    const auto cv = probes::group_entropy_values(constant, 0.2);
    CHECK(cv.anchor[0] == Approx(cv.full[0]).margin(1e-12));
    CHECK(cv.explorer[0] == Approx(cv.full[0]).margin(1e-12));

    // bracketing holds at every synthetic step by construction
    RngStream rng(41);
    std::vector<probes::GroupValues> steps;
    for (int s = 0; s < 50; ++s) {
        std::vector<std::vector<double>> responses;
        const int n_resp = rng.next_int(1, 8);
        for (int r = 0; r < n_resp; ++r) {
            std::vector<double> ent(static_cast<std::size_t>(rng.next_int(1, 30)));
            for (auto& e : ent) e = rng.next_uniform();
            responses.push_back(ent);
        }
        steps.push_back(probes::group_entropy_values(responses, 0.2));
    }
    const auto rows = probes::entropy_dynamics(steps);
    for (const auto& row : rows) {
        if (row.anchor.count == 0) continue;
        CHECK(row.anchor.mean <= row.full.mean + 1e-12);
        CHECK(row.full.mean <= row.explorer.mean + 1e-12);
    }
}

TEST_CASE("collapse detection modes") {
    probes::CollapseThresholds thresholds;  // short 0.3, spike 2.0, drop 0.2, patience 10, window 5

    SECTION("short-response collapse only") {
        std::vector<probes::StepMetric> history;
        for (int i = 0; i < 10; ++i) history.push_back({100.0, -2.0 + 0.01 * i});
        for (int i = 0; i < 10; ++i) history.push_back({20.0, -1.8 + 0.01 * i});
        const auto status = probes::detect_collapse(history, thresholds);
        CHECK(status.short_response_collapse);
        CHECK_FALSE(status.length_instability);
        CHECK_FALSE(status.reasoning_degeneration);
        // moving average over window 5 first dips below 0.3 * 100 at step 14
        REQUIRE(status.first_trigger_step.has_value());
        CHECK(*status.first_trigger_step == 14);
    }

    SECTION("length instability only") {
        std::vector<probes::StepMetric> history;
        for (int i = 0; i < 10; ++i) history.push_back({100.0, 0.0});
        history.push_back({500.0, 0.0});
        for (int i = 0; i < 9; ++i) history.push_back({100.0, 0.0});
        const auto status = probes::detect_collapse(history, thresholds);
        CHECK(status.length_instability);
        CHECK_FALSE(status.short_response_collapse);
        CHECK_FALSE(status.reasoning_degeneration);
        REQUIRE(status.first_trigger_step.has_value());
        CHECK(*status.first_trigger_step == 10);
    }

    SECTION("reasoning degeneration only") {
        std::vector<probes::StepMetric> history;
        for (int i = 0; i < 10; ++i) history.push_back({100.0, 1.0});
        for (int i = 0; i < 20; ++i) history.push_back({100.0, 0.7});
        const auto status = probes::detect_collapse(history, thresholds);
        CHECK(status.reasoning_degeneration);
        CHECK_FALSE(status.short_response_collapse);
        CHECK_FALSE(status.length_instability);
        // gap first exceeds 0.2 at step 13; ten consecutive steps end at 22
        REQUIRE(status.first_trigger_step.has_value());
        CHECK(*status.first_trigger_step == 22);
    }

    SECTION("healthy run raises no flags") {
        std::vector<probes::StepMetric> history;
        for (int i = 0; i < 40; ++i) history.push_back({80.0, -2.0 + 0.05 * i});
        const auto status = probes::detect_collapse(history, thresholds);
        CHECK_FALSE(status.short_response_collapse);
        CHECK_FALSE(status.length_instability);
        CHECK_FALSE(status.reasoning_degeneration);
        CHECK_FALSE(status.first_trigger_step.has_value());
    }

    SECTION("flags are monotone over prefixes") {
        std::vector<probes::StepMetric> history;
        for (int i = 0; i < 10; ++i) history.push_back({100.0, 0.0});
        for (int i = 0; i < 15; ++i) history.push_back({10.0, 0.0});
        bool seen = false;
        for (std::size_t n = 1; n <= history.size(); ++n) {
            const auto status = probes::detect_collapse(
                std::span(history.data(), n), thresholds);
            if (seen) CHECK(status.short_response_collapse);
            seen = seen || status.short_response_collapse;
        }
        CHECK(seen);
    }
}
