#include "nclens/errors.hpp"
#include "nclens/patching.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

#include <doctest.h>

using namespace nclens;

namespace {

struct Setup {
    fixtures::Toy toy;
    PromptRecord rec;
    std::vector<TokenId> donor;
    std::vector<TokenId> recipient;
    TokenSet targets;
};

Setup make_setup(std::size_t layers = 3) {
    Setup s{fixtures::make_toy(fixtures::small_spec(layers)), PromptRecord::make("p", Category::factual, "what fills a pen?", "ink"), {}, {}, {}};
    s.donor = condition_tokens(s.toy.model, s.toy.tok, s.rec.baseline_text);
    s.recipient = condition_tokens(s.toy.model, s.toy.tok, s.rec.negative_text);
    s.targets = first_token_set(prune_prefix_extensions(variant_set(s.toy.tok, "ink")));
    return s;
}

double mass(const ref::Vec& p, const TokenSet& t) {
    double s = 0.0;
    for (TokenId id : t) s += p[id];
    return s;
}

} // namespace

TEST_CASE("self patching changes nothing") {
    const auto s = make_setup();
    for (auto mode : {PatchPositions::decision_step, PatchPositions::aligned_suffix}) {
        const PatchRun run(s.toy.model, s.recipient, s.recipient, s.targets, mode);
        CHECK(run.original() == doctest::Approx(run.donor_probability()).epsilon(1e-12));
        for (std::size_t l = 0; l <= 3; ++l) CHECK(std::abs(run.patched(l) - run.original()) < 1e-9);
    }
}

TEST_CASE("patching the last layer reproduces the donor") {
    const auto s = make_setup();
    const PatchRun run(s.toy.model, s.donor, s.recipient, s.targets);
    CHECK(std::abs(run.patched(3) - run.donor_probability()) < 1e-9);
    CHECK_THROWS_AS(run.patched(4), ArgumentError);

    const PatchRun back(s.toy.model, s.recipient, s.donor, s.targets);
    const double fwd = run.patched(3) - run.original();
    const double rev = back.patched(3) - back.original();
    CHECK(std::abs(fwd + rev) < 1e-9);
}

TEST_CASE("patched probabilities match a spliced recomputation") {
    const auto s = make_setup();
    const PatchRun run(s.toy.model, s.donor, s.recipient, s.targets);
    const auto donor_ref = ref::run(s.toy.model, s.donor);
    for (std::size_t l = 0; l <= 3; ++l) {
        const ref::Splice splice{l, s.recipient.size() - 1, donor_ref.residuals[l].back()};
        const double want = mass(ref::next_dist(s.toy.model, s.recipient, splice), s.targets);
        CHECK(std::abs(run.patched(l) - want) < 1e-9);
    }
}

TEST_CASE("aligned suffix positions") {
    const std::vector<TokenId> donor{1, 2, 3, 7, 8};
    const std::vector<TokenId> recipient{4, 5, 6, 9, 3, 7, 8};
    const auto pairs = align_positions(donor, recipient, PatchPositions::aligned_suffix);
    REQUIRE(pairs.size() == 3);
    CHECK(pairs[0] == std::pair<std::size_t, std::size_t>{2, 4});
    CHECK(pairs[2] == std::pair<std::size_t, std::size_t>{4, 6});
    const auto last = align_positions(donor, recipient, PatchPositions::decision_step);
    REQUIRE(last.size() == 1);
    CHECK(last[0] == std::pair<std::size_t, std::size_t>{4, 6});
    CHECK(parse_patch_positions("aligned_suffix") == PatchPositions::aligned_suffix);
    CHECK_THROWS_AS(parse_patch_positions("everywhere"), ConfigError);
}

TEST_CASE("patch experiment fields") {
    const auto s = make_setup();
    const auto layers = all_residual_layers(3);
    REQUIRE(layers.size() == 4);
    const auto results = patch_layers(s.toy.model, s.toy.tok, s.rec, layers);
    REQUIRE(results.size() == 4);
    for (const auto& r : results) {
        CHECK(r.prompt_id == "p");
        CHECK(r.delta_p_patch == doctest::Approx(r.p_patched - r.p_original));
    }
    const auto one = patch_experiment(s.toy.model, s.toy.tok, s.rec, 2);
    CHECK(one.p_patched == doctest::Approx(results[2].p_patched).epsilon(1e-12));
}

TEST_CASE("patch sweep") {
    const auto toy = fixtures::make_toy(fixtures::small_spec(2));
    const auto ds = build_toy_dataset(4, default_toy_bank());
    const std::vector<double> p0{0.9, 0.1, 0.85, 0.95};
    const auto layers = all_residual_layers(2);
    BootstrapParams bp;
    bp.n_resamples = 50;
    const PatchCurve c = patch_sweep(toy.model, toy.tok, ds, p0, 0.8, layers, PatchPositions::decision_step, bp, 2);
    CHECK(c.layers.size() == 3);
    CHECK(c.mean.size() == 3);
    CHECK(c.ci.size() == 3);
    CHECK(c.prompt_ids == std::vector<std::string>{"toy-000", "toy-002", "toy-003"});
    CHECK(c.results.size() == 9);
    for (std::size_t i = 0; i < 3; ++i) {
        double sum = 0.0;
        for (std::size_t k = 0; k < 3; ++k) sum += c.results[k * 3 + i].delta_p_patch;
        CHECK(c.mean[i] == doctest::Approx(sum / 3));
        CHECK(c.ci[i].lo <= c.mean[i] + 1e-12);
        CHECK(c.ci[i].hi >= c.mean[i] - 1e-12);
    }
    const PatchCurve again = patch_sweep(toy.model, toy.tok, ds, p0, 0.8, layers, PatchPositions::decision_step, bp, 1);
    CHECK(again.mean == c.mean);
    CHECK(again.ci[1].lo == c.ci[1].lo);
    CHECK_THROWS_AS(patch_sweep(toy.model, toy.tok, ds, p0, 0.99, layers), ArgumentError);
}

TEST_CASE("crossover layer") {
    const std::vector<std::size_t> layers{0, 1, 2, 3, 4};
    CHECK(crossover_layer(layers, std::vector<double>{-0.3, -0.2, -0.1, 0.05, 0.2}) == 3u);
    CHECK(crossover_layer(layers, std::vector<double>{0.3, 0.2, -0.1, -0.2, -0.3}) == 2u);
    CHECK(crossover_layer(layers, std::vector<double>{-0.3, -0.2, -0.1, 0.0, 0.2}) == 3u);
    CHECK_FALSE(crossover_layer(layers, std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5}).has_value());
    CHECK_FALSE(crossover_layer(layers, std::vector<double>{0.0, 0.0, 0.0, 0.0, 0.0}).has_value());
}
