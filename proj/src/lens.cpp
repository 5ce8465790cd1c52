#include "nclens/lens.hpp"

#include "nclens/errors.hpp"
#include "nclens/pressure.hpp"

#include <algorithm>

namespace nclens {

LayerRange all_blocks(std::size_t n_layers) { return {1, n_layers}; }

LayerRange default_override_window(std::size_t n_layers) {
    return {n_layers > 5 ? n_layers - 4 : 1, n_layers};
}

TokenSet first_token_set(const VariantSet& pruned) {
    TokenSet out;
    for (const Variant& v : pruned.variants) {
        if (!v.tokens.empty()) out.push_back(v.tokens.front());
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

double lens_probability(const Model& m, std::span<const double> state, const TokenSet& targets) {
    const Vector dist = softmax(project_to_logits(m, state));
    CompensatedSum total;
    for (TokenId t : targets) {
        if (t >= dist.size()) throw RangeError("lens target token outside vocabulary");
        total.add(dist[t]);
    }
    return total.value();
}

double logit_lens(const Model& m, const ForwardTrace& trace, std::size_t layer, const TokenSet& targets) {
    if (trace.residuals.empty()) throw StateError("residual states were not captured");
    if (layer >= trace.residuals.size()) {
        throw ArgumentError("lens layer " + std::to_string(layer) + " outside [0, " +
                            std::to_string(trace.residuals.size() - 1) + "]");
    }
    const std::size_t k = trace.slot(trace.decision_step());
    return lens_probability(m, trace.residuals[layer][k], targets);
}

Contribution decompose_layer(const Model& m, const ForwardTrace& trace, std::size_t layer,
                             const TokenSet& targets) {
    if (trace.components.empty()) throw StateError("component states were not captured");
    if (layer < 1 || layer > trace.components.size()) {
        throw ArgumentError("decomposition layer " + std::to_string(layer) + " outside [1, " +
                            std::to_string(trace.components.size()) + "]");
    }
    const ComponentStates& cs = trace.components[layer - 1][trace.slot(trace.decision_step())];
    const double p_pre = lens_probability(m, cs.pre, targets);
    const double p_mid = lens_probability(m, cs.post_attn, targets);
    const double p_out = lens_probability(m, cs.post_ffn, targets);
    return {p_mid - p_pre, p_out - p_mid};
}

LayerTrace layer_trace(const Model& m, const ForwardTrace& trace, const TokenSet& targets) {
    const std::size_t L = m.config.n_layers;
    LayerTrace lt;
    lt.lens_prob.reserve(L + 1);
    for (std::size_t l = 0; l <= L; ++l) lt.lens_prob.push_back(logit_lens(m, trace, l, targets));
    lt.attn_contrib.assign(L + 1, 0.0);
    lt.ffn_contrib.assign(L + 1, 0.0);
    for (std::size_t l = 1; l <= L; ++l) {
        const Contribution c = decompose_layer(m, trace, l, targets);
        lt.attn_contrib[l] = c.attn;
        lt.ffn_contrib[l] = c.ffn;
    }
    return lt;
}

namespace {

constexpr std::string_view kInstructionSuffix = "' in your answer.";
constexpr std::string_view kNegationCue = "Do not";
constexpr std::string_view kQuestionLabel = " Question: ";

TokenSpan to_token_span(const std::vector<std::size_t>& offsets, std::size_t begin, std::size_t end) {
    // offsets has n+1 entries: token i covers [offsets[i], offsets[i+1]).
    TokenSpan s{0, 0};
    const std::size_t n = offsets.size() - 1;
    std::size_t i = 0;
    while (i < n && offsets[i + 1] <= begin) ++i;
    s.begin = i;
    while (i < n && offsets[i] < end) ++i;
    s.end = i;
    return s;
}

} // namespace

SpanAnnotation find_spans(const Tokenizer& tok, std::string_view rendered, std::string_view target,
                          std::string_view question) {
    const std::string instruction = std::string(kNegativePrefix) + std::string(target) +
                                    std::string(kInstructionSuffix);
    const std::size_t instr_pos = rendered.find(instruction);
    if (instr_pos == std::string_view::npos) {
        throw SpanError("cannot locate instruction segment \"" + instruction + "\"");
    }
    const std::size_t neg_in_instr = instruction.find(kNegationCue);
    if (neg_in_instr == std::string::npos) throw SpanError("cannot locate negation cue segment");
    const std::size_t label_pos = rendered.find(kQuestionLabel, instr_pos + instruction.size());
    if (label_pos == std::string_view::npos) throw SpanError("cannot locate question label segment");
    const std::size_t q_pos = label_pos + kQuestionLabel.size();
    if (rendered.substr(q_pos, question.size()) != question || question.empty()) {
        throw SpanError("cannot locate question segment");
    }

    const std::vector<TokenId> ids = tok.encode(rendered);
    std::vector<std::size_t> offsets{0};
    for (TokenId id : ids) offsets.push_back(offsets.back() + tok.token_bytes(id).size());
    if (offsets.back() != rendered.size()) throw SpanError("tokenisation does not cover the rendered text");

    SpanAnnotation a;
    a.instruction = to_token_span(offsets, instr_pos, instr_pos + instruction.size());
    a.negation = to_token_span(offsets, instr_pos + neg_in_instr, instr_pos + neg_in_instr + kNegationCue.size());
    const std::size_t tm_pos = instr_pos + kNegativePrefix.size();
    a.target_mention = to_token_span(offsets, tm_pos, tm_pos + target.size());
    a.question = to_token_span(offsets, q_pos, q_pos + question.size());
    if (a.instruction.end > a.question.begin) {
        throw SpanError("instruction and question segments share a token");
    }
    return a;
}

Vector aggregate_attention(const ForwardTrace& trace, LayerRange layers, HeadAggregation) {
    if (trace.attn_weights.empty()) throw StateError("attention weights were not captured");
    if (layers.first < 1 || layers.last < layers.first || layers.last > trace.attn_weights.size()) {
        throw ArgumentError("attention layer range outside captured blocks");
    }
    const std::size_t k = trace.slot(trace.decision_step());
    Vector row(trace.decision_step() + 1, 0.0);
    std::size_t count = 0;
    for (std::size_t l = layers.first; l <= layers.last; ++l) {
        for (const Vector& head : trace.attn_weights[l - 1][k]) {
            if (head.size() != row.size()) throw ShapeError("attention row length mismatch");
            for (std::size_t j = 0; j < row.size(); ++j) row[j] += head[j];
            ++count;
        }
    }
    for (double& x : row) x /= static_cast<double>(count);
    return row;
}

AttentionMetrics attention_metrics_from_row(std::span<const double> row, const SpanAnnotation& spans) {
    for (const TokenSpan* s : {&spans.instruction, &spans.question, &spans.negation, &spans.target_mention}) {
        if (s->end > row.size() || s->begin > s->end) throw SpanError("span outside attention row");
    }
    auto mass = [&](const TokenSpan& s) {
        CompensatedSum acc;
        for (std::size_t j = s.begin; j < s.end; ++j) acc.add(row[j]);
        return acc.value();
    };
    const double instr = mass(spans.instruction);
    const double quest = mass(spans.question);
    AttentionMetrics m;
    m.iar = instr + quest > 0.0 ? instr / (instr + quest) : 0.0;
    m.nf = instr > 0.0 ? mass(spans.negation) / instr : 0.0;
    m.tmf = instr > 0.0 ? mass(spans.target_mention) / instr : 0.0;
    m.pi = m.tmf - m.nf;
    return m;
}

AttentionMetrics attention_metrics(const ForwardTrace& trace, const SpanAnnotation& spans,
                                   LayerRange layers, HeadAggregation agg) {
    return attention_metrics_from_row(aggregate_attention(trace, layers, agg), spans);
}

} // namespace nclens
