#pragma once

// Logit-lens traces, attention/FFN decomposition and attention-routing
// metrics at the decision step.

#include "nclens/engine.hpp"
#include "nclens/tokenizer.hpp"

#include <span>
#include <string_view>
#include <vector>

namespace nclens {

// Sorted, unique token ids.
using TokenSet = std::vector<TokenId>;

// Inclusive block range [first, last], blocks numbered 1..L.
struct LayerRange {
    std::size_t first = 1;
    std::size_t last = 1;
};

LayerRange all_blocks(std::size_t n_layers);
// Last five blocks (or all of them for shallower models).
LayerRange default_override_window(std::size_t n_layers);

// Distinct first tokens of a (pruned) variant set.
TokenSet first_token_set(const VariantSet& pruned);

// softmax(W_U final_norm(state)) summed over `targets`.
double lens_probability(const Model& m, std::span<const double> state, const TokenSet& targets);

// Lens probability of h^(layer) at the decision step, layer in [0, L].
double logit_lens(const Model& m, const ForwardTrace& trace, std::size_t layer, const TokenSet& targets);

struct Contribution {
    double attn = 0.0;
    double ffn = 0.0;
};

// attn = P(h^(l-1) + Attn^(l)) - P(h^(l-1)); ffn = P(h^(l)) - P(h^(l-1) + Attn^(l)).
Contribution decompose_layer(const Model& m, const ForwardTrace& trace, std::size_t layer,
                             const TokenSet& targets);

struct LayerTrace {
    std::vector<double> lens_prob;    // l = 0..L
    std::vector<double> attn_contrib; // l = 0..L, entry 0 is 0
    std::vector<double> ffn_contrib;  // l = 0..L, entry 0 is 0

    std::size_t n_layers() const { return lens_prob.empty() ? 0 : lens_prob.size() - 1; }
};

// Needs residuals and component states captured at the decision step.
LayerTrace layer_trace(const Model& m, const ForwardTrace& trace, const TokenSet& targets);

// Half-open token index range.
struct TokenSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    bool operator==(const TokenSpan&) const = default;
};

struct SpanAnnotation {
    TokenSpan instruction;
    TokenSpan question;
    TokenSpan negation;
    TokenSpan target_mention;
};

// Locates the negative-condition segments inside `rendered` (which may be
// wrapped in a chat template) and maps them onto its tokenisation by byte
// offsets. A token belongs to a span when it overlaps the segment's bytes.
// Throws SpanError naming the segment that cannot be located.
SpanAnnotation find_spans(const Tokenizer& tok, std::string_view rendered, std::string_view target,
                          std::string_view question);

struct AttentionMetrics {
    double iar = 0.0;
    double nf = 0.0;
    double tmf = 0.0;
    double pi = 0.0;
};

enum class HeadAggregation { mean };

// Decision-step attention row averaged over heads and the blocks in `layers`.
Vector aggregate_attention(const ForwardTrace& trace, LayerRange layers,
                           HeadAggregation agg = HeadAggregation::mean);

AttentionMetrics attention_metrics(const ForwardTrace& trace, const SpanAnnotation& spans,
                                   LayerRange layers, HeadAggregation agg = HeadAggregation::mean);

// Metrics from an already-aggregated attention row.
AttentionMetrics attention_metrics_from_row(std::span<const double> row, const SpanAnnotation& spans);

} // namespace nclens
