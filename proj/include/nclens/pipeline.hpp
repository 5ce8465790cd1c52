#pragma once

// Config-driven experiment orchestration with cached, resumable stages.

#include "nclens/behavior.hpp"
#include "nclens/engine.hpp"
#include "nclens/lens.hpp"
#include "nclens/model_io.hpp"
#include "nclens/patching.hpp"
#include "nclens/stats.hpp"
#include "nclens/tokenizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nclens {

struct RunConfig {
    std::filesystem::path model_config;
    std::filesystem::path model_weights;
    std::filesystem::path vocab;
    std::filesystem::path merges;
    TokenizerOptions tokenizer;
    std::filesystem::path dataset;

    SamplingParams sampling;
    std::vector<TokenId> stop_tokens;
    std::vector<double> bin_edges = default_bin_edges();
    BootstrapParams bootstrap;
    std::optional<LayerRange> attention_layers; // all blocks when unset
    double patch_threshold = 0.8;
    std::optional<std::vector<std::size_t>> patch_layers; // 0..L when unset
    PatchPositions patch_positions = PatchPositions::decision_step;
    std::optional<LayerRange> override_window; // last five blocks when unset
    ClassifierParams classifier;
    double failure_rate_threshold = 0.5;

    std::filesystem::path output_dir;
    std::uint64_t seed = 42;
    unsigned workers = 0;

    // Relative paths resolve against base_dir. Throws ConfigError.
    static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
    static RunConfig load(const std::filesystem::path& path);

    // Checks value ranges and that every input path exists.
    void validate() const;

    // Analysis settings with defaults filled in (paths, output dir and workers excluded).
    nlohmann::json settings_json() const;
};

enum class Stage { pressure, sample, lens, attention, patch, fit, classify };

inline constexpr Stage kAllStages[] = {Stage::pressure, Stage::sample, Stage::lens,    Stage::attention,
                                       Stage::patch,    Stage::fit,    Stage::classify};

std::string to_string(Stage s);
Stage parse_stage(std::string_view s);
// Comma-separated list; "all" expands to every stage. Result is in run order.
std::vector<Stage> parse_stage_list(std::string_view s);
std::vector<Stage> stage_dependencies(Stage s);

enum class Figure { violation_curve, suppression_bars, attention_panels, lens_curves, decomp_bars, patch_bars };

inline constexpr Figure kAllFigures[] = {Figure::violation_curve, Figure::suppression_bars, Figure::attention_panels,
                                         Figure::lens_curves,     Figure::decomp_bars,      Figure::patch_bars};

std::string to_string(Figure f);

struct StageStatus {
    Stage stage = Stage::pressure;
    std::filesystem::path path;
    bool cached = false;
};

class Pipeline {
public:
    explicit Pipeline(RunConfig config);
    ~Pipeline();

    const RunConfig& config() const { return config_; }

    // Runs (or reuses) one stage. Throws DependencyError naming the first
    // upstream stage whose output is missing or stale.
    StageStatus run_stage(Stage s);
    // Runs the given stages in dependency order.
    std::vector<StageStatus> run(std::span<const Stage> stages);

    // Writes summary.json, analysis.json and every figure CSV. Needs all stages.
    std::vector<std::filesystem::path> report();

    // Writes one figure CSV under <output>/figures.
    std::filesystem::path emit_figure(Figure f);

    std::string cache_key(Stage s);
    std::filesystem::path stage_path(Stage s) const;

private:
    struct Inputs;

    Inputs& inputs();
    std::uint64_t inputs_hash();
    nlohmann::json load_stage(Stage s);
    nlohmann::json compute(Stage s);
    void write_json(const std::filesystem::path& p, const nlohmann::json& j) const;

    RunConfig config_;
    std::unique_ptr<Inputs> inputs_;
    std::optional<std::uint64_t> inputs_hash_;
};

// Serialises JSON deterministically (sorted keys, two-space indent, trailing newline).
std::string dump_json(const nlohmann::json& j);

} // namespace nclens
