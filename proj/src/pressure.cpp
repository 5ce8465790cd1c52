#include "nclens/pressure.hpp"

#include "nclens/behavior.hpp"
#include "nclens/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace nclens {

std::string to_string(Category c) {
    switch (c) {
    case Category::idiom: return "idiom";
    case Category::factual: return "factual";
    case Category::commonsense: return "commonsense";
    case Category::creative: return "creative";
    case Category::ood: return "ood";
    }
    return "factual";
}

Category parse_category(std::string_view s) {
    if (s == "idiom") return Category::idiom;
    if (s == "factual") return Category::factual;
    if (s == "commonsense") return Category::commonsense;
    if (s == "creative") return Category::creative;
    if (s == "ood") return Category::ood;
    throw ParseError("unknown category '" + std::string(s) + "'");
}

std::string render_baseline(std::string_view question) {
    return std::string(kBaselinePrefix) + std::string(question);
}

std::string render_negative(std::string_view question, std::string_view target) {
    return std::string(kNegativePrefix) + std::string(target) + std::string(kNegativeMiddle) +
           std::string(question);
}

PromptRecord PromptRecord::make(std::string id, Category category, std::string question,
                                std::string target, std::map<std::string, std::string> metadata) {
    PromptRecord r;
    r.id = std::move(id);
    r.category = category;
    r.question = std::move(question);
    r.target = std::move(target);
    r.baseline_text = render_baseline(r.question);
    r.negative_text = render_negative(r.question, r.target);
    r.metadata = std::move(metadata);
    r.validate();
    return r;
}

void PromptRecord::validate() const {
    if (target.empty()) throw ArgumentError("prompt '" + id + "': empty target");
    if (std::any_of(target.begin(), target.end(), [](unsigned char c) { return std::isspace(c); })) {
        throw ArgumentError("prompt '" + id + "': target must be a single word");
    }
    if (negative_text.find("'" + target + "'") == std::string::npos) {
        throw ArgumentError("prompt '" + id + "': negative text does not quote the target");
    }
    if (detect_violation(baseline_text, target)) {
        throw LeakageError("prompt '" + id + "': baseline text already contains target '" + target + "'");
    }
}

VariantSet prune_prefix_extensions(const VariantSet& set) {
    VariantSet out;
    out.target = set.target;
    for (const Variant& v : set.variants) {
        const bool extends = std::any_of(set.variants.begin(), set.variants.end(), [&](const Variant& u) {
            return u.tokens.size() < v.tokens.size() &&
                   std::equal(u.tokens.begin(), u.tokens.end(), v.tokens.begin());
        });
        if (!extends) out.variants.push_back(v);
    }
    return out;
}

namespace {

double log_prob_after(Session session, std::span<const TokenId> continuation) {
    double log_p = 0.0;
    for (std::size_t i = 0; i < continuation.size(); ++i) {
        const Vector dist = session.next_distribution();
        log_p += std::log(dist[continuation[i]]);
        if (i + 1 < continuation.size()) session.feed(continuation[i]);
    }
    return log_p;
}

Session prime(const Model& m, std::span<const TokenId> context) {
    if (context.empty()) throw ArgumentError("sequence probability needs a non-empty context");
    Session s(m);
    for (TokenId t : context) s.feed(t);
    return s;
}

void check_ids(const Model& m, std::span<const TokenId> ids) {
    for (TokenId t : ids) {
        if (t >= m.config.vocab_size) throw RangeError("token id " + std::to_string(t) + " outside vocabulary");
    }
}

} // namespace

double sequence_prob(const Model& m, std::span<const TokenId> context,
                     std::span<const TokenId> continuation) {
    check_ids(m, context);
    check_ids(m, continuation);
    if (continuation.empty()) return 1.0;
    return std::exp(log_prob_after(prime(m, context), continuation));
}

PressureResult pressure_over_variants(const Model& m, std::span<const TokenId> context,
                                      const VariantSet& pruned) {
    check_ids(m, context);
    const Session primed = prime(m, context);
    PressureResult result;
    result.variants = pruned;
    CompensatedSum total;
    for (const Variant& v : pruned.variants) {
        check_ids(m, v.tokens);
        const double p = v.tokens.empty() ? 1.0 : std::exp(log_prob_after(primed, v.tokens));
        result.per_variant.push_back(p);
        total.add(p);
    }
    result.probability = total.value();
    return result;
}

std::vector<TokenId> condition_tokens(const Model& m, const Tokenizer& tok, std::string_view text) {
    return tok.encode(apply_chat_template(m.config, text));
}

PressureResult semantic_pressure(const Model& m, const Tokenizer& tok, std::string_view context_text,
                                 std::string_view target) {
    const VariantSet pruned = prune_prefix_extensions(variant_set(tok, target));
    return pressure_over_variants(m, condition_tokens(m, tok, context_text), pruned);
}

SuppressionRecord suppression(const Model& m, const Tokenizer& tok, const PromptRecord& rec) {
    const VariantSet pruned = prune_prefix_extensions(variant_set(tok, rec.target));
    SuppressionRecord s;
    s.prompt_id = rec.id;
    s.p0 = pressure_over_variants(m, condition_tokens(m, tok, rec.baseline_text), pruned).probability;
    s.p1 = pressure_over_variants(m, condition_tokens(m, tok, rec.negative_text), pruned).probability;
    s.delta_p = s.p0 - s.p1;
    return s;
}

} // namespace nclens
