#include "nclens/errors.hpp"
#include "nclens/stats.hpp"
#include "support/synthetic.hpp"

#include <doctest.h>

using namespace nclens;

TEST_CASE("logistic closed form") {
    CHECK(logistic(-2.40 + 2.27 * 0.0) == doctest::Approx(0.0832).epsilon(1e-3));
    CHECK(logistic(0.0) == 0.5);
    CHECK(logistic(800.0) == 1.0);
    CHECK(logistic(-800.0) >= 0.0);
    CHECK(logistic(-3.0) + logistic(3.0) == doctest::Approx(1.0));
}

TEST_CASE("quantiles and bins") {
    const std::vector<double> xs{1, 2, 3, 4, 5};
    CHECK(quantile_sorted(xs, 0.0) == 1);
    CHECK(quantile_sorted(xs, 1.0) == 5);
    CHECK(quantile_sorted(xs, 0.5) == 3);
    CHECK(quantile_sorted(xs, 0.125) == doctest::Approx(1.5));
    const auto e = default_bin_edges();
    CHECK(bin_index(0.0, e) == 0);
    CHECK(bin_index(0.2, e) == 1);
    CHECK(bin_index(0.8, e) == 4);
    CHECK(bin_index(1.0, e) == 4);
    CHECK_THROWS_AS(bin_index(1.01, e), RangeError);
    CHECK_THROWS_AS(bin_index(-0.1, e), RangeError);
    CHECK_THROWS_AS(validate_bin_edges(std::vector<double>{0.0, 0.5, 0.5, 1.0}), ArgumentError);
}

TEST_CASE("logistic recovery on bin-matched synthetic data") {
    const auto data = synthetic::logistic_groups(-2.40, 2.27, 11);
    LogisticOptions opt;
    opt.bootstrap.n_resamples = 200;
    const LogisticFit f = fit_logistic(data, opt);
    CHECK(f.converged);
    CHECK(f.n == 40000);
    CHECK(std::abs(f.beta0 + 2.40) < 0.10);
    CHECK(std::abs(f.beta1 - 2.27) < 0.10);
    CHECK(f.ci_beta1.lo < f.beta1);
    CHECK(f.ci_beta1.hi > f.beta1);
    CHECK(f.r2_binned > 0.9);
    CHECK(f.failed_resamples == 0);

    SUBCASE("self-consistency") {
        const auto again = synthetic::logistic_groups(f.beta0, f.beta1, 12);
        opt.bootstrap_ci = false;
        const LogisticFit g = fit_logistic(again, opt);
        CHECK(std::abs(g.beta0 - f.beta0) < 0.1);
        CHECK(std::abs(g.beta1 - f.beta1) < 0.1);
    }
}

TEST_CASE("constant-rate data has a slope interval containing zero") {
    const auto data = synthetic::logistic_groups(std::log(0.3 / 0.7), 0.0, 5);
    LogisticOptions opt;
    opt.bootstrap.n_resamples = 200;
    const LogisticFit f = fit_logistic(data, opt);
    CHECK(f.ci_beta1.contains(0.0));
}

TEST_CASE("grouped and binary fits agree") {
    std::vector<GroupedObservation> g{{0.1, 1, 4}, {0.5, 2, 4}, {0.9, 3, 4}};
    std::vector<BinaryObservation> b;
    for (const auto& o : g) {
        for (std::size_t i = 0; i < o.trials; ++i) b.push_back({o.x, i < o.successes});
    }
    LogisticOptions opt;
    opt.bootstrap_ci = false;
    const auto fg = fit_logistic(g, opt);
    const auto fb = fit_logistic(b, opt);
    CHECK(fg.beta0 == doctest::Approx(fb.beta0).epsilon(1e-9));
    CHECK(fg.beta1 == doctest::Approx(fb.beta1).epsilon(1e-9));
    CHECK(fg.ci_beta1.lo == fg.beta1);
}

TEST_CASE("degenerate and separated data") {
    LogisticOptions opt;
    opt.bootstrap_ci = false;
    CHECK_THROWS_AS(fit_logistic(std::vector<GroupedObservation>{{0.1, 0, 5}, {0.9, 0, 5}}, opt), DegenerateFitError);
    CHECK_THROWS_AS(fit_logistic(std::vector<GroupedObservation>{{0.1, 5, 5}, {0.9, 5, 5}}, opt), DegenerateFitError);
    CHECK_THROWS_AS(fit_logistic(std::vector<BinaryObservation>{{0.5, true}}, opt), DegenerateFitError);
    CHECK_THROWS_AS(fit_logistic(std::vector<GroupedObservation>{{0.5, 2, 5}, {0.5, 1, 5}}, opt), DegenerateFitError);
    CHECK_THROWS_AS(fit_logistic(std::vector<GroupedObservation>{{0.1, 0, 5}, {0.2, 0, 5}, {0.8, 5, 5}}, opt),
                    ConvergenceError);
    CHECK_THROWS_AS(fit_logistic(std::vector<GroupedObservation>{{0.1, 6, 5}, {0.8, 1, 5}}, opt), ArgumentError);
}

TEST_CASE("binned r2") {
    const std::vector<GroupedObservation> g{{0.1, 1, 10}, {0.9, 9, 10}};
    CHECK(binned_r2(g, 0.0, 0.0, default_bin_edges()) == doctest::Approx(0.0));
    const double b1 = std::log(81.0) / 0.8, b0 = -std::log(9.0) - 0.1 * b1;
    CHECK(binned_r2(g, b0, b1, default_bin_edges()) == doctest::Approx(1.0));
}

TEST_CASE("bootstrap intervals") {
    const auto mean = [](std::span<const double> xs) { return synthetic::mean(xs); };
    BootstrapParams bp;
    bp.n_resamples = 300;
    const std::vector<double> flat(40, 0.25);
    const Interval z = bootstrap_ci<double>(flat, mean, bp);
    CHECK(z.lo == 0.25);
    CHECK(z.hi == 0.25);

    const auto xs = synthetic::bernoulli(0.3, 200, 1, 0);
    const Interval a = bootstrap_ci<double>(xs, mean, bp);
    bp.workers = 3;
    const Interval b = bootstrap_ci<double>(xs, mean, bp);
    CHECK(a.lo == b.lo);
    CHECK(a.hi == b.hi);
    CHECK(a.contains(synthetic::mean(xs)));
    bp.seed = 43;
    const Interval c = bootstrap_ci<double>(xs, mean, bp);
    CHECK((c.lo != a.lo || c.hi != a.hi));
    CHECK(std::isnan(bootstrap_ci<double>(std::span<const double>{}, mean, bp).lo));
}

TEST_CASE("bootstrap width shrinks with the square root of n") {
    const auto mean = [](std::span<const double> xs) { return synthetic::mean(xs); };
    BootstrapParams bp;
    bp.n_resamples = 1000;
    double w500 = 0.0, w2000 = 0.0;
    for (std::uint64_t r = 0; r < 5; ++r) {
        const auto small = synthetic::bernoulli(0.3, 500, 3, r);
        const auto large = synthetic::bernoulli(0.3, 2000, 4, r);
        const Interval s = bootstrap_ci<double>(small, mean, bp);
        const Interval l = bootstrap_ci<double>(large, mean, bp);
        w500 += s.hi - s.lo;
        w2000 += l.hi - l.lo;
    }
    CHECK(w500 / w2000 == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("failure taxonomy") {
    LayerTrace lt;
    lt.lens_prob.assign(29, 0.0);
    lt.attn_contrib.assign(29, 0.0);
    lt.ffn_contrib.assign(29, 0.0);
    const LayerRange window = default_override_window(28);
    SuppressionRecord sup{"x", 0.9, 0.8, 0.1};
    AttentionMetrics am;

    am.pi = 0.19;
    CHECK(classify_failure(true, sup, am, lt, window).label == FailureMode::priming);
    CHECK(classify_failure(false, sup, am, lt, window).label == FailureMode::success);

    am.pi = -0.01;
    sup.delta_p = 0.92;
    lt.ffn_contrib[27] = 0.34;
    const auto o = classify_failure(true, sup, am, lt, window);
    CHECK(o.label == FailureMode::override_failure);
    CHECK(o.evidence.ffn_window_sum == doctest::Approx(0.34));
    CHECK(to_string(o.label) == "override");

    sup.delta_p = -0.05;
    CHECK(classify_failure(true, sup, am, lt, window).label == FailureMode::priming);
    sup.delta_p = 0.05;
    CHECK(classify_failure(true, sup, am, lt, window).label == FailureMode::unclassified);
    sup.delta_p = 0.5;
    lt.ffn_contrib[27] = 0.1;
    CHECK(classify_failure(true, sup, am, lt, window).label == FailureMode::unclassified);
    lt.ffn_contrib[10] = 5.0;
    CHECK(classify_failure(true, sup, am, lt, window).label == FailureMode::unclassified);
}

TEST_CASE("taxonomy is total and respects rule order") {
    CounterRng rng(9, {1});
    LayerTrace lt;
    lt.lens_prob.assign(5, 0.0);
    lt.attn_contrib.assign(5, 0.0);
    lt.ffn_contrib.assign(5, 0.0);
    for (int i = 0; i < 2000; ++i) {
        const bool violated = rng.uniform() < 0.7;
        SuppressionRecord sup{"r", 0.5, 0.0, rng.uniform() * 1.2 - 0.3};
        AttentionMetrics am;
        am.pi = rng.uniform() * 0.4 - 0.2;
        for (std::size_t l = 1; l <= 4; ++l) lt.ffn_contrib[l] = rng.uniform() * 0.2 - 0.05;
        const auto f = classify_failure(violated, sup, am, lt, {2, 4});
        const bool primed = am.pi > 0.0 || sup.delta_p < 0.0;
        const bool overridden = sup.delta_p > 0.1 && f.evidence.ffn_window_sum > 0.2;
        if (!violated) CHECK(f.label == FailureMode::success);
        else if (primed) CHECK(f.label == FailureMode::priming);
        else if (overridden) CHECK(f.label == FailureMode::override_failure);
        else CHECK(f.label == FailureMode::unclassified);
    }
    CHECK(is_failure(0.5, 0.5));
    CHECK_FALSE(is_failure(0.49, 0.5));
}
