#include "nclens/patching.hpp"

#include "nclens/errors.hpp"
#include "nclens/parallel.hpp"

#include <algorithm>

namespace nclens {

std::string to_string(PatchPositions p) {
    return p == PatchPositions::decision_step ? "decision_step" : "aligned_suffix";
}

PatchPositions parse_patch_positions(std::string_view s) {
    if (s == "decision_step") return PatchPositions::decision_step;
    if (s == "aligned_suffix") return PatchPositions::aligned_suffix;
    throw ConfigError("unknown patch position mode '" + std::string(s) + "'");
}

std::vector<std::pair<std::size_t, std::size_t>> align_positions(std::span<const TokenId> donor,
                                                                 std::span<const TokenId> recipient,
                                                                 PatchPositions mode) {
    if (donor.empty() || recipient.empty()) throw ArgumentError("patching needs non-empty runs");
    if (mode == PatchPositions::decision_step) return {{donor.size() - 1, recipient.size() - 1}};
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::size_t i = donor.size(), j = recipient.size();
    while (i > 0 && j > 0 && donor[i - 1] == recipient[j - 1]) {
        --i;
        --j;
        pairs.emplace_back(i, j);
    }
    if (pairs.empty()) pairs.emplace_back(donor.size() - 1, recipient.size() - 1);
    std::reverse(pairs.begin(), pairs.end());
    return pairs;
}

namespace {

double target_mass(const Vector& dist, const TokenSet& targets) {
    CompensatedSum s;
    for (TokenId t : targets) {
        if (t >= dist.size()) throw RangeError("target token outside vocabulary");
        s.add(dist[t]);
    }
    return s.value();
}

} // namespace

PatchRun::PatchRun(const Model& m, std::vector<TokenId> donor, std::vector<TokenId> recipient, TokenSet targets,
                   PatchPositions mode)
    : model_(&m), recipient_(std::move(recipient)), targets_(std::move(targets)) {
    pairs_ = align_positions(donor, recipient_, mode);
    CaptureSpec spec;
    spec.last = true;
    for (const auto& pr : pairs_) spec.positions.push_back(pr.first);
    donor_trace_ = forward(m, donor, spec);
    p_donor_ = target_mass(donor_trace_.final_dist, targets_);

    const std::size_t first = pairs_.front().second;
    Session s(m);
    for (std::size_t pos = 0; pos < first; ++pos) s.feed(recipient_[pos]);
    primed_.emplace(s);
    for (std::size_t pos = first; pos < recipient_.size(); ++pos) s.feed(recipient_[pos]);
    p_original_ = target_mass(s.next_distribution(), targets_);
}

double PatchRun::patched(std::size_t layer) const {
    const std::size_t L = model_->config.n_layers;
    if (layer > L) {
        throw ArgumentError("patch layer " + std::to_string(layer) + " outside [0, " + std::to_string(L) + "]");
    }
    Session s = *primed_;
    Session::Hooks hooks;
    std::size_t next = 0;
    for (std::size_t pos = pairs_.front().second; pos < recipient_.size(); ++pos) {
        if (next < pairs_.size() && pairs_[next].second == pos) {
            hooks.patch.assign(L + 1, nullptr);
            hooks.patch[layer] = &donor_trace_.residuals[layer][donor_trace_.slot(pairs_[next].first)];
            s.feed(recipient_[pos], &hooks);
            ++next;
        } else {
            s.feed(recipient_[pos]);
        }
    }
    return target_mass(s.next_distribution(), targets_);
}

std::vector<PatchResult> patch_layers(const Model& m, const Tokenizer& tok, const PromptRecord& rec,
                                      std::span<const std::size_t> layers, PatchPositions mode) {
    const TokenSet targets = first_token_set(prune_prefix_extensions(variant_set(tok, rec.target)));
    const PatchRun run(m, condition_tokens(m, tok, rec.baseline_text), condition_tokens(m, tok, rec.negative_text),
                       targets, mode);
    std::vector<PatchResult> out;
    out.reserve(layers.size());
    for (std::size_t layer : layers) {
        PatchResult r;
        r.prompt_id = rec.id;
        r.layer = layer;
        r.p_original = run.original();
        r.p_patched = run.patched(layer);
        r.delta_p_patch = r.p_patched - r.p_original;
        out.push_back(std::move(r));
    }
    return out;
}

PatchResult patch_experiment(const Model& m, const Tokenizer& tok, const PromptRecord& rec, std::size_t layer,
                             PatchPositions mode) {
    const std::size_t layers[] = {layer};
    return patch_layers(m, tok, rec, layers, mode).front();
}

std::optional<std::size_t> crossover_layer(std::span<const std::size_t> layers, std::span<const double> means) {
    for (std::size_t i = 1; i < means.size() && i < layers.size(); ++i) {
        if ((means[i - 1] < 0.0 && means[i] >= 0.0) || (means[i - 1] > 0.0 && means[i] <= 0.0)) return layers[i];
    }
    return std::nullopt;
}

std::vector<std::size_t> all_residual_layers(std::size_t n_layers) {
    std::vector<std::size_t> out(n_layers + 1);
    for (std::size_t l = 0; l <= n_layers; ++l) out[l] = l;
    return out;
}

PatchCurve patch_sweep(const Model& m, const Tokenizer& tok, std::span<const PromptRecord> dataset,
                       std::span<const double> p0, double threshold, std::span<const std::size_t> layers,
                       PatchPositions mode, const BootstrapParams& bootstrap, unsigned workers) {
    if (p0.size() != dataset.size()) throw ShapeError("one P0 value per prompt required");
    if (layers.empty()) throw ArgumentError("patch sweep needs at least one layer");
    std::vector<std::size_t> selected;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (p0[i] >= threshold) selected.push_back(i);
    }
    if (selected.empty()) {
        throw ArgumentError("no prompts with P0 >= " + std::to_string(threshold) + " to patch");
    }

    std::vector<std::vector<PatchResult>> per_prompt(selected.size());
    parallel_for(selected.size(), workers, [&](std::size_t k) {
        per_prompt[k] = patch_layers(m, tok, dataset[selected[k]], layers, mode);
    });

    PatchCurve curve;
    curve.layers.assign(layers.begin(), layers.end());
    for (std::size_t k : selected) curve.prompt_ids.push_back(dataset[k].id);
    for (std::size_t li = 0; li < layers.size(); ++li) {
        std::vector<double> deltas;
        deltas.reserve(selected.size());
        CompensatedSum s;
        for (const auto& rs : per_prompt) {
            deltas.push_back(rs[li].delta_p_patch);
            s.add(rs[li].delta_p_patch);
        }
        curve.mean.push_back(s.value() / static_cast<double>(deltas.size()));
        BootstrapParams bp = bootstrap;
        bp.seed = splitmix64(bootstrap.seed ^ (0x9A7C4ULL + layers[li]));
        curve.ci.push_back(bootstrap_ci(std::span<const double>(deltas),
                                        [](std::span<const double> xs) {
                                            CompensatedSum acc;
                                            for (double x : xs) acc.add(x);
                                            return acc.value() / static_cast<double>(xs.size());
                                        },
                                        bp));
    }
    curve.crossover_layer = crossover_layer(curve.layers, curve.mean);
    for (auto& rs : per_prompt) {
        for (auto& r : rs) curve.results.push_back(std::move(r));
    }
    return curve;
}

} // namespace nclens
