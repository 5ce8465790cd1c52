#pragma once

#include "nclens/engine.hpp"
#include "nclens/model_io.hpp"
#include "nclens/tokenizer.hpp"

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nclens {

enum class Category { idiom, factual, commonsense, creative, ood };

std::string to_string(Category c);
Category parse_category(std::string_view s);

inline constexpr std::string_view kBaselinePrefix = "Answer with one word. Question: ";
inline constexpr std::string_view kNegativePrefix = "Answer with one word. Do not use the word '";
inline constexpr std::string_view kNegativeMiddle = "' in your answer. Question: ";

std::string render_baseline(std::string_view question);
std::string render_negative(std::string_view question, std::string_view target);

struct PromptRecord {
    std::string id;
    Category category = Category::factual;
    std::string question;
    std::string target;
    std::string baseline_text;
    std::string negative_text;
    std::map<std::string, std::string> metadata;

    // Renders both condition texts and checks the invariants (non-empty single
    // word target, quoted target in the negative text, no leakage).
    static PromptRecord make(std::string id, Category category, std::string question,
                             std::string target, std::map<std::string, std::string> metadata = {});

    // Throws LeakageError / ArgumentError when an invariant fails.
    void validate() const;
};

struct SuppressionRecord {
    std::string prompt_id;
    double p0 = 0.0;
    double p1 = 0.0;
    double delta_p = 0.0;
};

// Variant set with prefix extensions removed: when one variant's token
// sequence strictly prefixes another's, only the shorter one is kept, leaving
// a prefix-free set of first-emission events.
VariantSet prune_prefix_extensions(const VariantSet& set);

// Product of teacher-forced conditionals P(c_i | context, c_<i). Empty
// continuation gives 1.
double sequence_prob(const Model& m, std::span<const TokenId> context,
                     std::span<const TokenId> continuation);

struct PressureResult {
    double probability = 0.0;
    VariantSet variants;               // pruned
    std::vector<double> per_variant;   // aligned with variants.variants
};

// Sum of sequence probabilities over a pruned variant set, scored after an
// already-tokenised context. Shares one KV cache over the context.
PressureResult pressure_over_variants(const Model& m, std::span<const TokenId> context,
                                      const VariantSet& pruned);

// Semantic pressure of `target` after `context_text` (chat template applied).
PressureResult semantic_pressure(const Model& m, const Tokenizer& tok, std::string_view context_text,
                                 std::string_view target);

SuppressionRecord suppression(const Model& m, const Tokenizer& tok, const PromptRecord& rec);

// Tokens of a condition text as the model sees it (chat template applied).
std::vector<TokenId> condition_tokens(const Model& m, const Tokenizer& tok, std::string_view text);

} // namespace nclens
