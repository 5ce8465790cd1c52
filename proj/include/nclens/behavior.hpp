#pragma once

// Sampling protocol, violation detection and pressure-binned violation rates.

#include "nclens/engine.hpp"
#include "nclens/pressure.hpp"
#include "nclens/stats.hpp"
#include "nclens/tokenizer.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nclens {

// Case-insensitive whole-word match. Word characters are ASCII letters,
// digits and '_'; everything else (including '-' and punctuation) is a boundary.
bool detect_violation(std::string_view output_text, std::string_view target);

struct SampleOutcome {
    std::string prompt_id;
    std::size_t sample_index = 0;
    std::string generated_text;
    bool violated = false;
};

std::vector<PromptRecord> parse_dataset_jsonl(std::string_view text);
std::vector<PromptRecord> load_dataset(const std::filesystem::path& path);
std::string dataset_to_jsonl(std::span<const PromptRecord> records);

// Samples each prompt's negative condition n_samples times. The RNG stream of a
// prompt is derived from its id, so outcomes do not depend on worker count.
std::vector<SampleOutcome> run_sampling_protocol(const Model& m, const Tokenizer& tok,
                                                 std::span<const PromptRecord> dataset,
                                                 const SamplingParams& params, const StopRule& stop = {},
                                                 unsigned workers = 0);

// One prompt's baseline pressure with its sample counts.
struct PromptOutcome {
    std::string prompt_id;
    double p0 = 0.0;
    std::size_t violations = 0;
    std::size_t samples = 0;

    double rate() const { return samples == 0 ? 0.0 : static_cast<double>(violations) / static_cast<double>(samples); }
};

struct BinStat {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t n = 0; // prompts
    std::size_t samples = 0;
    std::size_t violations = 0;
    std::optional<double> rate; // empty for empty bins
    Interval ci;
};

struct BinnedRates {
    std::vector<double> edges;
    std::vector<BinStat> bins;
};

// rate = violations / samples within each bin; the CI resamples prompts.
BinnedRates bin_by_pressure(std::span<const PromptOutcome> records, std::span<const double> edges,
                            const BootstrapParams& bootstrap = {});

// Aggregates sample outcomes into per-prompt counts in dataset order.
std::vector<PromptOutcome> aggregate_outcomes(std::span<const PromptRecord> dataset,
                                              std::span<const SampleOutcome> outcomes,
                                              std::span<const double> p0);

} // namespace nclens
