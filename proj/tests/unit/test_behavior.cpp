#include "nclens/behavior.hpp"
#include "nclens/errors.hpp"
#include "support/corpus.hpp"
#include "support/fixtures.hpp"

#include <doctest.h>

#include <cctype>

using namespace nclens;

namespace {

std::string flip_case(std::string s, unsigned mask) {
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto c = static_cast<unsigned char>(s[i]);
        if ((mask >> (i % 8)) & 1u) s[i] = static_cast<char>(std::islower(c) ? std::toupper(c) : std::tolower(c));
    }
    return s;
}

} // namespace

TEST_CASE("detection examples") {
    CHECK(detect_violation("It is Paris.", "Paris"));
    CHECK_FALSE(detect_violation("Parisian streets", "Paris"));
    CHECK(detect_violation("PARIS", "paris"));
    CHECK(detect_violation("a Paris-based firm", "Paris"));
    CHECK_FALSE(detect_violation("Paris_2", "Paris"));
    CHECK_FALSE(detect_violation("", "Paris"));
    CHECK_FALSE(detect_violation("Paris", ""));
    CHECK(detect_violation("no, not moonlight... moon!", "moon"));
}

TEST_CASE("detection corpus agrees with hand labels") {
    const auto cases = corpus::load_detection_corpus(NCLENS_TEST_DATA "/detection_corpus.tsv");
    CHECK(cases.size() == 200);
    for (const auto& c : cases) {
        INFO(c.text, " / ", c.target);
        CHECK(detect_violation(c.text, c.target) == c.violated);
    }
}

TEST_CASE("detection is case invariant and respects word boundaries") {
    const auto cases = corpus::load_detection_corpus(NCLENS_TEST_DATA "/detection_corpus.tsv");
    for (const auto& c : cases) {
        const bool base = detect_violation(c.text, c.target);
        for (unsigned mask : {0x55u, 0xAAu, 0xFFu}) {
            CHECK(detect_violation(flip_case(c.text, mask), c.target) == base);
            CHECK(detect_violation(c.text, flip_case(c.target, mask)) == base);
        }
        CHECK_FALSE(detect_violation("x" + c.target + "y", c.target));
    }
}

TEST_CASE("dataset jsonl round trip") {
    const std::string text =
        "{\"id\":\"a\",\"category\":\"idiom\",\"question\":\"break a what?\",\"target\":\"leg\",\"metadata\":{\"n\":3}}\n"
        "\n"
        "{\"id\":\"b\",\"category\":\"factual\",\"question\":\"what is frozen water?\",\"target\":\"ice\"}\n";
    const auto recs = parse_dataset_jsonl(text);
    REQUIRE(recs.size() == 2);
    CHECK(recs[0].metadata.at("n") == "3");
    CHECK(recs[1].negative_text.find("'ice'") != std::string::npos);
    CHECK(parse_dataset_jsonl(dataset_to_jsonl(recs))[1].question == recs[1].question);
    CHECK_THROWS_AS(parse_dataset_jsonl("{\"id\":1}"), ParseError);
    CHECK_THROWS_AS(parse_dataset_jsonl("not json"), ParseError);
    CHECK_THROWS_AS(
        parse_dataset_jsonl("{\"id\":\"c\",\"category\":\"ood\",\"question\":\"is ice cold?\",\"target\":\"ice\"}"),
        LeakageError);
}

TEST_CASE("sampling protocol counts and determinism") {
    const auto toy = fixtures::make_toy(fixtures::small_spec(2));
    const auto ds = build_toy_dataset(5, default_toy_bank());
    SamplingParams sp;
    sp.n_samples = 16;
    sp.max_new_tokens = 3;
    const auto a = run_sampling_protocol(toy.model, toy.tok, ds, sp, {}, 1);
    const auto b = run_sampling_protocol(toy.model, toy.tok, ds, sp, {}, 4);
    REQUIRE(a.size() == 80);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].prompt_id == b[i].prompt_id);
        CHECK(a[i].generated_text == b[i].generated_text);
        CHECK(a[i].violated == detect_violation(a[i].generated_text, ds[i / 16].target));
    }
    CHECK_THROWS_AS(run_sampling_protocol(toy.model, toy.tok, std::span<const PromptRecord>{}, sp), ArgumentError);
}

TEST_CASE("a rigged model always violates") {
    auto spec = fixtures::small_spec(2);
    spec.words.clear();
    spec.biases = {{"ink", 10.0}};
    const auto toy = fixtures::make_toy(spec);
    const auto ds = std::vector<PromptRecord>{PromptRecord::make("r", Category::factual, "what fills a pen?", "ink")};
    SamplingParams sp;
    sp.max_new_tokens = 1;
    const auto out = run_sampling_protocol(toy.model, toy.tok, ds, sp);
    for (const auto& o : out) {
        INFO(o.generated_text);
        CHECK(o.violated);
    }
}

TEST_CASE("binning by pressure") {
    const std::vector<PromptOutcome> recs{{"a", 0.1, 1, 4}, {"b", 0.15, 2, 4}, {"c", 0.9, 4, 4}, {"d", 1.0, 4, 4}};
    const std::vector<double> edges{0.0, 0.2, 1.0};
    const BinnedRates br = bin_by_pressure(recs, edges);
    REQUIRE(br.bins.size() == 2);
    CHECK(br.bins[0].n == 2);
    CHECK(*br.bins[0].rate == doctest::Approx(3.0 / 8));
    CHECK(br.bins[1].n == 2);
    CHECK(*br.bins[1].rate == 1.0);
    CHECK(br.bins[1].ci.lo == 1.0);
    CHECK(br.bins[1].ci.hi == 1.0);

    const BinnedRates five = bin_by_pressure(recs, default_bin_edges());
    std::size_t n = 0, v = 0;
    for (const auto& b : five.bins) {
        n += b.n;
        v += b.violations;
        if (b.n == 0) CHECK_FALSE(b.rate.has_value());
    }
    CHECK(n == recs.size());
    CHECK(v == 11);
    const std::vector<double> bad{0.0, 0.5};
    CHECK_THROWS_AS(bin_by_pressure(recs, bad), ArgumentError);
}
