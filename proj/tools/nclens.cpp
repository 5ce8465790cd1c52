// Command-line front end for the analysis pipeline.

#include "nclens/errors.hpp"
#include "nclens/pipeline.hpp"
#include "nclens/toy.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <optional>

namespace {

using nlohmann::json;

int fail(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
    return code;
}

struct Options {
    std::string config;
    std::string stages = "all";
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;
};

nclens::RunConfig load_config(const Options& o) {
    if (o.config.empty()) throw nclens::ArgumentError("--config is required");
    nclens::RunConfig cfg = nclens::RunConfig::load(o.config);
    if (!o.out.empty()) cfg.output_dir = o.out;
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.sampling.seed = *o.seed;
        cfg.bootstrap.seed = *o.seed;
    }
    if (o.workers) {
        cfg.workers = *o.workers;
        cfg.bootstrap.workers = *o.workers;
    }
    return cfg;
}

json status_json(const std::vector<nclens::StageStatus>& st) {
    json arr = json::array();
    for (const auto& s : st) {
        arr.push_back({{"stage", nclens::to_string(s.stage)}, {"path", s.path.string()}, {"cached", s.cached}});
    }
    return arr;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Negative-constraint analysis on decoder-only transformers"};
    app.require_subcommand(1);
    Options o;
    std::size_t toy_prompts = 20;

    auto add_common = [&](CLI::App* sub, bool with_stages) {
        sub->add_option("--config", o.config, "Run configuration (JSON)");
        sub->add_option("--out", o.out, "Output directory (overrides the config)");
        sub->add_option("--seed", o.seed, "Seed (overrides the config)");
        sub->add_option("--workers", o.workers, "Worker threads (0 = all cores)");
        if (with_stages) sub->add_option("--stages", o.stages, "Comma-separated stages, or 'all'");
    };

    std::vector<std::pair<CLI::App*, nclens::Stage>> stage_cmds;
    for (nclens::Stage s : nclens::kAllStages) {
        CLI::App* sub = app.add_subcommand(nclens::to_string(s), "Run the " + nclens::to_string(s) + " stage");
        add_common(sub, false);
        stage_cmds.emplace_back(sub, s);
    }
    CLI::App* report = app.add_subcommand("report", "Write summary, analysis and figure CSVs");
    add_common(report, false);
    CLI::App* all = app.add_subcommand("all", "Run stages then the report");
    add_common(all, true);
    CLI::App* toy = app.add_subcommand("toy", "Write a desk-scale toy fixture (model, tokenizer, dataset, config)");
    toy->add_option("--out", o.out, "Fixture directory")->required();
    toy->add_option("--prompts", toy_prompts, "Number of prompts");
    toy->add_option("--seed", o.seed, "Model seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }

    try {
        json result;
        if (toy->parsed()) {
            const auto path = nclens::write_desk_fixture(o.out, toy_prompts, o.seed.value_or(42));
            result["config"] = path.string();
        } else if (report->parsed()) {
            nclens::Pipeline p(load_config(o));
            json files = json::array();
            for (const auto& f : p.report()) files.push_back(f.string());
            result["report"] = files;
        } else if (all->parsed()) {
            nclens::Pipeline p(load_config(o));
            const auto stages = nclens::parse_stage_list(o.stages);
            result["stages"] = status_json(p.run(stages));
            if (stages.size() == std::size(nclens::kAllStages)) {
                json files = json::array();
                for (const auto& f : p.report()) files.push_back(f.string());
                result["report"] = files;
            }
        } else {
            for (const auto& [sub, stage] : stage_cmds) {
                if (!sub->parsed()) continue;
                nclens::Pipeline p(load_config(o));
                result["stages"] = status_json({p.run_stage(stage)});
            }
        }
        std::cout << result.dump() << '\n';
        return 0;
    } catch (const nclens::Error& e) {
        return fail(e.kind(), e.what(), 1);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 1);
    }
}
