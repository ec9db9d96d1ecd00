#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "test_util.hpp"
#include "tokenlab/reweight.hpp"

using namespace tokenlab;
using Catch::Approx;

TEST_CASE("endpoint schedule low2high") {
    const auto cfg = reweight::ReweightConfig::for_schedule(reweight::Schedule::low2high);
    CHECK(reweight::endpoint_weights(0, cfg).w_low == 1.0);
    CHECK(reweight::endpoint_weights(0, cfg).w_high == 0.0);
    CHECK(reweight::endpoint_weights(40, cfg).w_low == Approx(0.5).margin(1e-12));
    CHECK(reweight::endpoint_weights(40, cfg).w_high == Approx(0.5).margin(1e-12));
    for (int s : {80, 81, 120, 10000}) {
        CHECK(reweight::endpoint_weights(s, cfg).w_low == 0.0);
        CHECK(reweight::endpoint_weights(s, cfg).w_high == 1.0);
    }
}

TEST_CASE("endpoint schedule variants") {
    const auto h2l = reweight::ReweightConfig::for_schedule(reweight::Schedule::high2low);
    CHECK(reweight::endpoint_weights(0, h2l).w_high == 1.0);
    CHECK(reweight::endpoint_weights(0, h2l).w_low == 0.0);
    CHECK(reweight::endpoint_weights(200, h2l).w_high == 0.0);
    CHECK(reweight::endpoint_weights(200, h2l).w_low == 1.0);

    const auto stat_low = reweight::ReweightConfig::for_schedule(reweight::Schedule::static_low);
    const auto stat_high = reweight::ReweightConfig::for_schedule(reweight::Schedule::static_high);
    for (int s : {0, 17, 80, 500}) {
        CHECK(reweight::endpoint_weights(s, stat_low).w_low == 1.0);
        CHECK(reweight::endpoint_weights(s, stat_low).w_high == 0.0);
        CHECK(reweight::endpoint_weights(s, stat_high).w_low == 0.0);
        CHECK(reweight::endpoint_weights(s, stat_high).w_high == 1.0);
    }
}

TEST_CASE("schedule is piecewise linear and constant after warmup") {
    const auto cfg = reweight::ReweightConfig::for_schedule(reweight::Schedule::low2high);
    const double slope = (reweight::endpoint_weights(1, cfg).w_low -
                          reweight::endpoint_weights(0, cfg).w_low);
    for (int s = 1; s < 80; ++s) {
        const double delta = reweight::endpoint_weights(s, cfg).w_low -
                             reweight::endpoint_weights(s - 1, cfg).w_low;
        CHECK(delta == Approx(slope).margin(1e-12));
    }
    for (int s = 80; s < 120; ++s) {
        CHECK(reweight::endpoint_weights(s, cfg).w_low ==
              reweight::endpoint_weights(80, cfg).w_low);
    }
}

TEST_CASE("soft weights: degenerate equal-entropy batch") {
    const auto cfg = reweight::ReweightConfig::for_schedule(reweight::Schedule::low2high);
    const std::vector<double> equal(17, 0.42);
    for (int s : {0, 10, 40, 100}) {
        const auto w = reweight::soft_weights(equal, cfg, s);
        const double expected = reweight::endpoint_weights(s, cfg).w_low;
        for (double x : w) CHECK(x == Approx(expected).margin(1e-9));
    }
}

TEST_CASE("soft weights: extreme two-token batch") {
    const auto cfg = reweight::ReweightConfig::for_schedule(reweight::Schedule::low2high);
    const std::vector<double> ent{0.0, 10.0};
    const auto w = reweight::soft_weights(ent, cfg, 0);
    CHECK(w[0] == Approx(1.0).margin(1e-5));   // min-entropy token keeps w_low = 1
    CHECK(w[1] == Approx(0.0).margin(1e-5));   // max-entropy token pushed to w_high = 0
}

TEST_CASE("soft weights: mid-warmup weights are exactly one half") {
    const auto cfg = reweight::ReweightConfig::for_schedule(reweight::Schedule::low2high);
    RngStream rng(21);
    const auto ent = testutil::random_vector(rng, 64, 1.0);
    std::vector<double> positive(ent);
    for (auto& h : positive) h = std::abs(h);
    const auto w = reweight::soft_weights(positive, cfg, 40);
    for (double x : w) CHECK(x == Approx(0.5).margin(1e-9));
}

TEST_CASE("soft weights: monotone in entropy") {
    RngStream rng(22);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = rng.next_int(2, 80);
        std::vector<double> ent(static_cast<std::size_t>(n));
        for (auto& h : ent) h = rng.next_uniform();
        auto cfg = reweight::ReweightConfig::for_schedule(
            trial % 2 == 0 ? reweight::Schedule::low2high : reweight::Schedule::high2low);
        const int step = rng.next_int(0, 120);
        const auto endpoints = reweight::endpoint_weights(step, cfg);
        if (endpoints.w_low == endpoints.w_high) continue;
        const auto w = reweight::soft_weights(ent, cfg, step);

        std::vector<int> order(ent.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(),
                  [&](int a, int b) { return ent[static_cast<std::size_t>(a)] < ent[static_cast<std::size_t>(b)]; });
        const bool increasing = endpoints.w_high > endpoints.w_low;
        for (std::size_t i = 1; i < order.size(); ++i) {
            const double prev = w[static_cast<std::size_t>(order[i - 1])];
            const double cur = w[static_cast<std::size_t>(order[i])];
            if (increasing) {
                CHECK(cur >= prev - 1e-12);
            } else {
                CHECK(cur <= prev + 1e-12);
            }
        }
        // convex-combination bounds
        const double lo = std::min(endpoints.w_low, endpoints.w_high) - 1e-9;
        const double hi = std::max(endpoints.w_low, endpoints.w_high) + 1e-9;
        for (double x : w) {
            CHECK(x >= lo);
            CHECK(x <= hi);
        }
    }
}

TEST_CASE("soft weights input validation") {
    const auto cfg = reweight::ReweightConfig::for_schedule(reweight::Schedule::low2high);
    CHECK_THROWS_AS(reweight::soft_weights(std::vector<double>{}, cfg, 0), input_error);
    CHECK_THROWS_AS(reweight::soft_weights(std::vector<double>{1.0, std::nan("")}, cfg, 0),
                    input_error);
    auto bad = cfg;
    bad.tau = 0.0;
    CHECK_THROWS_AS(reweight::soft_weights(std::vector<double>{1.0}, bad, 0), config_error);
}

TEST_CASE("schedule parsing") {
    CHECK(reweight::parse_schedule("low2high") == reweight::Schedule::low2high);
    CHECK(reweight::parse_schedule("static-high") == reweight::Schedule::static_high);
    CHECK_THROWS_AS(reweight::parse_schedule("sideways"), config_error);
}
