#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "test_util.hpp"
#include "tokenlab/objective.hpp"

using namespace tokenlab;
using Catch::Approx;

TEST_CASE("boxed extraction") {
    CHECK(*objective::extract_boxed("the answer is \\boxed{42}.").answer == "42");
    CHECK_FALSE(objective::extract_boxed("no final answer here").answer.has_value());
    CHECK(*objective::extract_boxed("\\boxed{1} then \\boxed{2}").answer == "2");
    CHECK(*objective::extract_boxed("\\boxed{ 42 }").answer == "42");
    CHECK(*objective::extract_boxed("\\boxed{\\frac{1}{2}}").answer == "\\frac{1}{2}");

    const auto partial = objective::extract_boxed("\\boxed{1} and \\boxed{2");
    CHECK(*partial.answer == "1");  // last balanced group
    CHECK(partial.unbalanced_group);

    const auto only_bad = objective::extract_boxed("\\boxed{oops");
    CHECK_FALSE(only_bad.answer.has_value());
    CHECK(only_bad.unbalanced_group);
}

TEST_CASE("reward verifier base values") {
    objective::RewardSpec spec;  // paper defaults: buffer 2048, factor 1, max 8192
    CHECK(objective::verify_reward("x \\boxed{42}", "42", 10, spec) == 1.0);
    CHECK(objective::verify_reward("x \\boxed{41}", "42", 10, spec) == -1.0);
    CHECK(objective::verify_reward("no box", "42", 10, spec) == -2.0);
    CHECK_THROWS_AS(objective::verify_reward("x", "", 1, spec), input_error);
}

TEST_CASE("overlong penalty ramp") {
    objective::RewardSpec spec;
    spec.overlong_buffer = 2048;
    spec.overlong_factor = 1.0;
    spec.max_response_len = 8192;
    // wrong answer at exactly max length: full penalty
    CHECK(objective::verify_reward("\\boxed{41}", "42", 8192, spec) == Approx(-2.0).margin(1e-12));
    // midway into the buffer
    CHECK(objective::verify_reward("\\boxed{42}", "42", 8192 - 1024, spec) ==
          Approx(1.0 - 0.5).margin(1e-12));
    // below the soft start: no penalty
    CHECK(objective::verify_reward("\\boxed{42}", "42", 8192 - 2048, spec) == 1.0);

    RngStream rng(2);
    for (int i = 0; i < 500; ++i) {
        const int len = rng.next_int(0, 10000);
        const double r = objective::verify_reward("\\boxed{42}", "42", len, spec);
        CHECK(r <= 1.0);
        CHECK(r >= 1.0 - spec.overlong_factor);  // overlong term in [-factor, 0]
    }
}

TEST_CASE("group advantages") {
    const auto a = objective::group_advantages(std::vector<double>{1, 1, -1, -1});
    REQUIRE(a.size() == 4);
    CHECK(a[0] == Approx(1.0).margin(2e-6));
    CHECK(a[1] == Approx(1.0).margin(2e-6));
    CHECK(a[2] == Approx(-1.0).margin(2e-6));
    CHECK(a[3] == Approx(-1.0).margin(2e-6));

    for (double v : objective::group_advantages(std::vector<double>{0.5, 0.5, 0.5})) {
        CHECK(v == 0.0);
    }

    const auto pair = objective::group_advantages(std::vector<double>{1, -1});
    CHECK(pair[0] == Approx(1.0).margin(2e-6));
    CHECK(pair[1] == Approx(-1.0).margin(2e-6));

    CHECK_THROWS_AS(objective::group_advantages(std::vector<double>{1.0}), group_error);

    RngStream rng(4);
    for (int i = 0; i < 200; ++i) {
        const int n = rng.next_int(2, 16);
        std::vector<double> rewards(static_cast<std::size_t>(n));
        for (auto& r : rewards) r = rng.next_int(-2, 1);
        const auto adv = objective::group_advantages(rewards);
        double sum = 0.0;
        for (double v : adv) sum += v;
        CHECK(std::abs(sum) < n * 1e-6 * 10);  // centered up to eps_std effects
    }
}

TEST_CASE("clipped per-token loss") {
    objective::LossSpec spec;
    CHECK(objective::per_token_clip_loss(1.0, 1.0, spec) == Approx(-1.0).margin(1e-12));
    CHECK(objective::per_token_clip_loss(1.5, 1.0, spec) == Approx(-1.28).margin(1e-12));
    CHECK(objective::per_token_clip_loss(0.5, -1.0, spec) == Approx(0.8).margin(1e-12));
    CHECK_THROWS_AS(objective::per_token_clip_loss(0.0, 1.0, spec), numeric_error);
    CHECK_THROWS_AS(objective::per_token_clip_loss(-0.5, 1.0, spec), numeric_error);

    RngStream rng(6);
    for (int i = 0; i < 500; ++i) {
        const double r = 0.8 + 0.48 * rng.next_uniform();  // inside [1-0.2, 1+0.28]
        const double a = 3.0 * rng.next_normal();
        CHECK(objective::per_token_clip_loss(r, a, spec) == Approx(-r * a).margin(1e-12));
    }
}

TEST_CASE("clip loss derivative matches finite differences") {
    objective::LossSpec spec;
    RngStream rng(8);
    const double h = 1e-7;
    for (int i = 0; i < 500; ++i) {
        const double r = 0.3 + 1.6 * rng.next_uniform();
        const double a = 2.0 * rng.next_normal();
        // skip the kink neighbourhoods
        if (std::abs(r - (1.0 - spec.clip_low)) < 1e-3) continue;
        if (std::abs(r - (1.0 + spec.clip_high)) < 1e-3) continue;
        const double fd = (objective::per_token_clip_loss(r + h, a, spec) -
                           objective::per_token_clip_loss(r - h, a, spec)) /
                          (2 * h);
        CHECK(objective::per_token_clip_loss_dratio(r, a, spec) == Approx(fd).margin(1e-6));
    }
}

TEST_CASE("aggregation modes") {
    const std::vector<double> losses{1, 2, 3, 4};
    const std::vector<double> mask{0, 1, 0, 1};
    CHECK(objective::aggregate(losses, mask, objective::Normalization::selected_mean) ==
          Approx(3.0).margin(1e-12));
    CHECK(objective::aggregate(losses, mask, objective::Normalization::all_token_mean) ==
          Approx(1.5).margin(1e-12));

    const std::vector<double> ones(losses.size(), 1.0);
    const double full = objective::aggregate(losses, ones, objective::Normalization::all_token_mean);
    CHECK(full == Approx(2.5).margin(1e-12));
    CHECK(objective::aggregate(losses, ones, objective::Normalization::selected_mean) ==
          Approx(full).margin(1e-12));
    CHECK(objective::aggregate(losses, ones, objective::Normalization::all_token_weighted) ==
          Approx(full).margin(1e-12));

    CHECK_THROWS_AS(objective::aggregate(losses, std::vector<double>{0, 0, 0, 0},
                                         objective::Normalization::selected_mean),
                    degenerate_error);

    RngStream rng(10);
    for (int i = 0; i < 300; ++i) {
        const int n = rng.next_int(1, 40);
        std::vector<double> l(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
        for (auto& x : l) x = rng.next_normal();
        int k = 0;
        for (auto& x : w) {
            x = rng.next_bernoulli(0.3) ? 1.0 : 0.0;
            k += static_cast<int>(x);
        }
        if (k == 0) continue;
        const double sel = objective::aggregate(l, w, objective::Normalization::selected_mean);
        const double all = objective::aggregate(l, w, objective::Normalization::all_token_mean);
        CHECK(sel == Approx(all * n / k).margin(1e-9));  // selected-mean = (T/K) x all-token-mean

        // positive rescaling of weights leaves selected-mean unchanged
        std::vector<double> scaled(w);
        const double c = 0.25 + 3.0 * rng.next_uniform();
        for (auto& x : scaled) x *= c;
        CHECK(objective::aggregate(l, scaled, objective::Normalization::selected_mean) ==
              Approx(sel).margin(1e-12));
    }
}
