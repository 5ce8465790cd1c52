#pragma once

// Layer-wise activation patching: baseline residuals spliced into the
// negative-condition run, one layer at a time.

#include "nclens/engine.hpp"
#include "nclens/lens.hpp"
#include "nclens/pressure.hpp"
#include "nclens/stats.hpp"

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace nclens {

enum class PatchPositions {
    decision_step,  // last position of each run
    aligned_suffix, // every position of the longest common token suffix
};

std::string to_string(PatchPositions p);
PatchPositions parse_patch_positions(std::string_view s);

// (donor position, recipient position) pairs.
std::vector<std::pair<std::size_t, std::size_t>> align_positions(std::span<const TokenId> donor,
                                                                 std::span<const TokenId> recipient,
                                                                 PatchPositions mode);

// Donor residuals are captured once; each patched run reuses the recipient KV
// cache up to the first patched position.
class PatchRun {
public:
    PatchRun(const Model& m, std::vector<TokenId> donor, std::vector<TokenId> recipient, TokenSet targets,
             PatchPositions mode = PatchPositions::decision_step);

    double original() const { return p_original_; }
    double donor_probability() const { return p_donor_; }
    // Target-set probability of the recipient with h^(layer) replaced, layer in [0, L].
    double patched(std::size_t layer) const;

private:
    const Model* model_;
    std::vector<TokenId> recipient_;
    TokenSet targets_;
    std::vector<std::pair<std::size_t, std::size_t>> pairs_;
    ForwardTrace donor_trace_;
    std::optional<Session> primed_;
    double p_original_ = 0.0;
    double p_donor_ = 0.0;
};

struct PatchResult {
    std::string prompt_id;
    std::size_t layer = 0;
    double p_original = 0.0;
    double p_patched = 0.0;
    double delta_p_patch = 0.0;
};

// Donor = baseline condition, recipient = negative condition.
std::vector<PatchResult> patch_layers(const Model& m, const Tokenizer& tok, const PromptRecord& rec,
                                      std::span<const std::size_t> layers,
                                      PatchPositions mode = PatchPositions::decision_step);

PatchResult patch_experiment(const Model& m, const Tokenizer& tok, const PromptRecord& rec, std::size_t layer,
                             PatchPositions mode = PatchPositions::decision_step);

struct PatchCurve {
    std::vector<std::size_t> layers;
    std::vector<double> mean;
    std::vector<Interval> ci;
    std::optional<std::size_t> crossover_layer;
    std::vector<std::string> prompt_ids;
    std::vector<PatchResult> results; // prompt-major, layers in order
};

// First layer whose mean has the opposite sign of the preceding layer's
// (strictly negative to >= 0, or strictly positive to <= 0).
std::optional<std::size_t> crossover_layer(std::span<const std::size_t> layers, std::span<const double> means);

// Sweeps prompts with p0 >= threshold. Throws ArgumentError when none qualify.
PatchCurve patch_sweep(const Model& m, const Tokenizer& tok, std::span<const PromptRecord> dataset,
                       std::span<const double> p0, double threshold, std::span<const std::size_t> layers,
                       PatchPositions mode = PatchPositions::decision_step, const BootstrapParams& bootstrap = {},
                       unsigned workers = 0);

// 0..L
std::vector<std::size_t> all_residual_layers(std::size_t n_layers);

} // namespace nclens
