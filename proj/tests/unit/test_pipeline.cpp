#include "nclens/errors.hpp"
#include "nclens/pipeline.hpp"
#include "nclens/toy.hpp"
#include "support/fixtures.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace nclens;
namespace fs = std::filesystem;

namespace {

RunConfig small_run(const fs::path& dir, std::size_t prompts, const std::string& out = "out") {
    const fs::path run = write_desk_fixture(dir, prompts, 7);
    RunConfig c = RunConfig::load(run);
    c.sampling.n_samples = 4;
    c.bootstrap.n_resamples = 40;
    c.output_dir = dir / out;
    return c;
}

std::string slurp(const fs::path& p) { return read_file(p); }

std::string first_line(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    return line;
}

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    return n;
}

} // namespace

TEST_CASE("stage names and dependencies") {
    CHECK(parse_stage_list("all").size() == 7);
    const auto two = parse_stage_list("fit,pressure");
    REQUIRE(two.size() == 2);
    CHECK(two[0] == Stage::pressure);
    CHECK(two[1] == Stage::fit);
    CHECK_THROWS_AS(parse_stage("bogus"), ArgumentError);
    CHECK(stage_dependencies(Stage::pressure).empty());
    CHECK(stage_dependencies(Stage::classify).size() == 4);
}

TEST_CASE("config parsing") {
    const auto dir = fixtures::temp_dir("pipe-config");
    const fs::path run = write_desk_fixture(dir, 3, 7);
    auto j = nlohmann::json::parse(slurp(run));
    const RunConfig ok = RunConfig::from_json(j, dir);
    CHECK(ok.model_config.is_absolute());
    CHECK_NOTHROW(ok.validate());

    auto extra = j;
    extra["sampling"]["top_k"] = 5;
    CHECK_THROWS_AS(RunConfig::from_json(extra, dir), ConfigError);
    auto missing = j;
    missing["dataset"] = "nope.jsonl";
    CHECK_THROWS_AS(RunConfig::from_json(missing, dir).validate(), ConfigError);
    auto range = j;
    range["sampling"]["top_p"] = 1.5;
    CHECK_THROWS_AS(RunConfig::from_json(range, dir).validate(), ConfigError);
    CHECK_THROWS_AS(RunConfig::load(dir / "absent.json"), LoadError);
}

TEST_CASE("pressure stage writes one record per prompt and caches") {
    const auto dir = fixtures::temp_dir("pipe-pressure");
    Pipeline p(small_run(dir, 3));
    const StageStatus st = p.run_stage(Stage::pressure);
    CHECK_FALSE(st.cached);
    const auto j = nlohmann::json::parse(slurp(st.path));
    REQUIRE(j.at("records").size() == 3);
    for (const auto& r : j["records"]) {
        CHECK(r.at("p0").get<double>() >= 0.0);
        CHECK(r.at("p0").get<double>() <= 1.0);
        CHECK(r.at("delta_p").get<double>() == doctest::Approx(r["p0"].get<double>() - r["p1"].get<double>()));
    }
    CHECK(p.run_stage(Stage::pressure).cached);

    RunConfig changed = p.config();
    changed.seed = 99;
    Pipeline q(changed);
    CHECK(q.cache_key(Stage::pressure) == p.cache_key(Stage::pressure));
    CHECK(q.cache_key(Stage::sample) != p.cache_key(Stage::sample));
}

TEST_CASE("missing upstream stages are named") {
    const auto dir = fixtures::temp_dir("pipe-deps");
    Pipeline p(small_run(dir, 2));
    try {
        p.run_stage(Stage::patch);
        FAIL("expected a dependency error");
    } catch (const DependencyError& e) {
        CHECK(std::string(e.what()).find("pressure") != std::string::npos);
    }
    p.run_stage(Stage::pressure);
    try {
        p.run_stage(Stage::fit);
        FAIL("expected a dependency error");
    } catch (const DependencyError& e) {
        CHECK(std::string(e.what()).find("sample") != std::string::npos);
    }
    CHECK_THROWS_AS(p.report(), DependencyError);

    RunConfig stale = p.config();
    stale.bin_edges = {0.0, 0.5, 1.0};
    stale.sampling.top_p = 0.5;
    Pipeline s(stale);
    s.run_stage(Stage::sample);
    CHECK_NOTHROW(s.run_stage(Stage::fit));
    RunConfig resampled = stale;
    resampled.sampling.temperature = 0.7;
    Pipeline r(resampled);
    CHECK_THROWS_AS(r.run_stage(Stage::fit), DependencyError);
}

TEST_CASE("full run produces the report bundle deterministically") {
    const auto dir = fixtures::temp_dir("pipe-full");
    RunConfig c1 = small_run(dir, 4, "a");
    c1.patch_threshold = 0.0;
    RunConfig c2 = c1;
    c2.output_dir = dir / "b";
    c2.workers = 3;

    std::vector<fs::path> files;
    for (RunConfig* c : {&c1, &c2}) {
        Pipeline p(*c);
        const auto stages = parse_stage_list("all");
        p.run(stages);
        files = p.report();
    }
    REQUIRE(files.size() == 2 + std::size(kAllFigures));
    for (const fs::path& f : files) {
        const fs::path rel = fs::relative(f, c2.output_dir);
        CHECK(slurp(c1.output_dir / rel) == slurp(f));
    }
    for (Stage s : kAllStages) {
        Pipeline p(c1);
        CHECK(slurp(p.stage_path(s)) == slurp(Pipeline(c2).stage_path(s)));
    }

    const auto summary = nlohmann::json::parse(slurp(c1.output_dir / "summary.json"));
    std::vector<std::string> keys;
    for (const auto& [k, v] : summary.items()) keys.push_back(k);
    CHECK(keys == std::vector<std::string>{"bins", "fit", "meta", "patching", "suppression", "taxonomy"});
    CHECK(summary["meta"]["n_prompts"] == 4);
    const auto& counts = summary["taxonomy"]["counts"];
    CHECK(counts["success"].get<int>() + counts["priming"].get<int>() + counts["override"].get<int>() +
              counts["unclassified"].get<int>() ==
          4);
    CHECK(slurp(c1.output_dir / "summary.json").find(dir.string()) == std::string::npos);

    const fs::path fig = c1.output_dir / "figures";
    CHECK(first_line(fig / "violation_curve.csv") == "bin_lo,bin_hi,rate,ci_lo,ci_hi,n");
    CHECK(first_line(fig / "suppression_bars.csv") == "outcome,n,mean_p0,mean_p1,mean_delta_p,ci_lo,ci_hi");
    CHECK(first_line(fig / "attention_panels.csv") == "id,outcome,label,iar,nf,tmf,pi");
    CHECK(first_line(fig / "lens_curves.csv") == "layer,condition,outcome,lens_prob,n");
    CHECK(first_line(fig / "decomp_bars.csv") == "layer,outcome,attn_contrib,ffn_contrib,n");
    CHECK(first_line(fig / "patch_bars.csv") == "layer,mean_delta_p,ci_lo,ci_hi,n");
    const std::size_t L = desk_toy_spec().n_layers;
    CHECK(line_count(fig / "patch_bars.csv") == L + 2);
    CHECK(line_count(fig / "violation_curve.csv") == 6);
    CHECK(line_count(fig / "attention_panels.csv") == 5);

    const auto analysis = nlohmann::json::parse(slurp(c1.output_dir / "analysis.json"));
    CHECK(analysis["records"].size() == 4);
}

TEST_CASE("json dump is stable") {
    nlohmann::json j;
    j["b"] = 0.1;
    j["a"] = {1, 2};
    const std::string s = dump_json(j);
    CHECK(s.back() == '\n');
    CHECK(s.find("\"a\"") < s.find("\"b\""));
    CHECK(dump_json(nlohmann::json::parse(s)) == s);
}
