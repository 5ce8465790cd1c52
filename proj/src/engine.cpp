#include "nclens/engine.hpp"

#include "nclens/errors.hpp"
#include "nclens/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nclens {

namespace {

void add_bias(Vector& v, const Vector& bias) {
    if (bias.empty()) return;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += bias[i];
}

void apply_rope(std::span<double> head, std::size_t position, double theta) {
    const std::size_t half = head.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head.size()));
        const double angle = static_cast<double>(position) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x1 = head[i];
        const double x2 = head[i + half];
        head[i] = x1 * c - x2 * s;
        head[i + half] = x2 * c + x1 * s;
    }
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }
double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

void check_tokens(const Model& m, std::span<const TokenId> tokens) {
    if (tokens.empty()) throw ArgumentError("forward requires a non-empty token sequence");
    for (TokenId t : tokens) {
        if (t >= m.config.vocab_size) {
            throw RangeError("token id " + std::to_string(t) + " outside vocabulary of size " +
                             std::to_string(m.config.vocab_size));
        }
    }
}

} // namespace

void SamplingParams::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ArgumentError("temperature must be positive");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ArgumentError("top_p must lie in (0, 1]");
}

std::size_t ForwardTrace::slot(std::size_t position) const {
    auto it = std::lower_bound(positions.begin(), positions.end(), position);
    if (it == positions.end() || *it != position) {
        throw StateError("position " + std::to_string(position) + " was not captured");
    }
    return static_cast<std::size_t>(it - positions.begin());
}

Session::Session(const Model& model)
    : model_(&model), keys_(model.config.n_layers), values_(model.config.n_layers) {}

void Session::feed(TokenId token, Hooks* hooks) {
    const Model& m = *model_;
    const ModelConfig& c = m.config;
    if (token >= c.vocab_size) throw RangeError("token id " + std::to_string(token) + " outside vocabulary");
    const std::size_t pos = length_;
    const std::size_t d = c.d_model;
    const std::size_t hd = c.head_dim;
    const std::size_t kv_dim = c.n_kv_heads * hd;
    const std::size_t group = c.n_heads / c.n_kv_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    auto patched = [&](std::size_t layer, Vector& h) {
        if (hooks && layer < hooks->patch.size() && hooks->patch[layer]) {
            if (hooks->patch[layer]->size() != d) throw ShapeError("patch state dim mismatch");
            h = *hooks->patch[layer];
        }
        if (hooks && hooks->capture_residuals) hooks->residuals.push_back(h);
    };

    if (hooks) {
        hooks->residuals.clear();
        hooks->attn.clear();
        hooks->components.clear();
    }

    auto emb = m.embedding.row(token);
    Vector h(emb.begin(), emb.end());
    if (c.position_kind == PositionKind::learned) {
        if (pos >= c.max_positions) throw RangeError("position exceeds max_positions");
        auto pe = m.position_embedding.row(pos);
        for (std::size_t i = 0; i < d; ++i) h[i] += pe[i];
    }
    patched(0, h);

    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const LayerWeights& w = m.layers[l];

        const Vector x = normalize(h, w.attn_norm, c.norm_eps, c.norm_kind);
        Vector q = matvec(w.wq, x);
        Vector k = matvec(w.wk, x);
        Vector v = matvec(w.wv, x);
        add_bias(q, w.bq);
        add_bias(k, w.bk);
        add_bias(v, w.bv);
        if (c.position_kind == PositionKind::rotary) {
            for (std::size_t hh = 0; hh < c.n_heads; ++hh) apply_rope({q.data() + hh * hd, hd}, pos, c.rope_theta);
            for (std::size_t hh = 0; hh < c.n_kv_heads; ++hh) apply_rope({k.data() + hh * hd, hd}, pos, c.rope_theta);
        }
        keys_[l].insert(keys_[l].end(), k.begin(), k.end());
        values_[l].insert(values_[l].end(), v.begin(), v.end());

        const std::size_t n_keys = pos + 1;
        Vector concat(d, 0.0);
        std::vector<Vector> rows;
        if (hooks && hooks->capture_attn) rows.reserve(c.n_heads);
        Vector scores(n_keys);
        for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
            const std::size_t kvh = hh / group;
            std::span<const double> qh(q.data() + hh * hd, hd);
            for (std::size_t j = 0; j < n_keys; ++j) {
                scores[j] = dot(qh, {keys_[l].data() + j * kv_dim + kvh * hd, hd}) * scale;
            }
            Vector weights = softmax(scores);
            for (std::size_t j = 0; j < n_keys; ++j) {
                const double* vj = values_[l].data() + j * kv_dim + kvh * hd;
                for (std::size_t i = 0; i < hd; ++i) concat[hh * hd + i] += weights[j] * vj[i];
            }
            if (hooks && hooks->capture_attn) rows.push_back(std::move(weights));
        }
        if (hooks && hooks->capture_attn) hooks->attn.push_back(std::move(rows));

        const Vector attn_out = matvec(w.wo, concat);
        Vector mid(d);
        for (std::size_t i = 0; i < d; ++i) mid[i] = h[i] + attn_out[i];

        const Vector x2 = normalize(mid, w.ffn_norm, c.norm_eps, c.norm_kind);
        Vector hidden = matvec(w.w_up, x2);
        if (c.ffn_kind == FfnKind::swiglu) {
            const Vector gate = matvec(w.w_gate, x2);
            for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] *= silu(gate[i]);
        } else {
            for (double& z : hidden) z = gelu(z);
        }
        const Vector ffn_out = matvec(w.w_down, hidden);
        Vector out(d);
        for (std::size_t i = 0; i < d; ++i) out[i] = mid[i] + ffn_out[i];

        if (hooks && hooks->capture_components) hooks->components.push_back({h, mid, out});
        h = std::move(out);
        patched(l + 1, h);
    }
    require_finite(h, "residual stream");
    last_hidden_ = std::move(h);
    ++length_;
}

Vector project_to_logits(const Model& m, std::span<const double> state) {
    const Vector n = normalize(state, m.final_norm, m.config.norm_eps, m.config.norm_kind);
    return matvec(m.unembedding(), n);
}

Vector Session::logits() const {
    if (length_ == 0) throw StateError("session has no tokens");
    return project_to_logits(*model_, last_hidden_);
}

Vector Session::next_distribution(double temperature) const {
    return softmax(logits(), temperature);
}

ForwardTrace forward(const Model& m, std::span<const TokenId> tokens, const CaptureSpec& spec) {
    return forward_with_patch(m, tokens, spec, {});
}

ForwardTrace forward_with_patch(const Model& m, std::span<const TokenId> tokens,
                                const CaptureSpec& spec, std::span<const PatchSpec> patches) {
    check_tokens(m, tokens);
    const std::size_t L = m.config.n_layers;
    const std::size_t n = tokens.size();

    // patch_at[pos][layer]
    std::vector<std::vector<const Vector*>> patch_at(n);
    for (const PatchSpec& p : patches) {
        if (p.layer > L) {
            throw ArgumentError("patch layer " + std::to_string(p.layer) + " outside [0, " +
                                std::to_string(L) + "]");
        }
        if (p.positions.size() != p.states.size()) throw ArgumentError("patch positions/states length mismatch");
        for (std::size_t i = 0; i < p.positions.size(); ++i) {
            if (p.positions[i] >= n) throw ArgumentError("patch position outside sequence");
            if (p.states[i].size() != m.config.d_model) {
                throw ShapeError("patch state has dim " + std::to_string(p.states[i].size()) +
                                 ", expected " + std::to_string(m.config.d_model));
            }
            auto& slots = patch_at[p.positions[i]];
            slots.resize(L + 1, nullptr);
            slots[p.layer] = &p.states[i];
        }
    }

    ForwardTrace trace;
    trace.tokens.assign(tokens.begin(), tokens.end());
    std::vector<std::size_t> positions = spec.positions;
    if (spec.last) positions.push_back(n - 1);
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
    for (std::size_t p : positions) {
        if (p >= n) throw ArgumentError("capture position outside sequence");
    }
    trace.positions = positions;
    if (spec.residuals) trace.residuals.resize(L + 1);
    if (spec.attn_weights) trace.attn_weights.resize(L);
    if (spec.component_states) trace.components.resize(L);

    Session session(m);
    Session::Hooks hooks;
    std::size_t next_capture = 0;
    for (std::size_t pos = 0; pos < n; ++pos) {
        const bool capture = next_capture < positions.size() && positions[next_capture] == pos;
        const bool any_patch = !patch_at[pos].empty();
        if (!capture && !any_patch) {
            session.feed(tokens[pos]);
            continue;
        }
        hooks.patch = patch_at[pos];
        hooks.capture_residuals = capture && spec.residuals;
        hooks.capture_attn = capture && spec.attn_weights;
        hooks.capture_components = capture && spec.component_states;
        session.feed(tokens[pos], &hooks);
        if (capture) {
            for (std::size_t l = 0; l < hooks.residuals.size(); ++l) trace.residuals[l].push_back(std::move(hooks.residuals[l]));
            for (std::size_t l = 0; l < hooks.attn.size(); ++l) trace.attn_weights[l].push_back(std::move(hooks.attn[l]));
            for (std::size_t l = 0; l < hooks.components.size(); ++l) trace.components[l].push_back(std::move(hooks.components[l]));
            ++next_capture;
        }
    }
    trace.final_logits = session.logits();
    trace.final_dist = softmax(trace.final_logits);
    return trace;
}

std::vector<TokenId> nucleus(std::span<const double> probs, double top_p) {
    if (probs.empty()) throw ArgumentError("nucleus of empty distribution");
    std::vector<TokenId> order(probs.size());
    std::iota(order.begin(), order.end(), TokenId{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](TokenId a, TokenId b) { return probs[a] > probs[b]; });
    double cumulative = 0.0;
    std::size_t keep = order.size();
    for (std::size_t i = 0; i < order.size(); ++i) {
        cumulative += probs[order[i]];
        if (cumulative >= top_p) {
            keep = i + 1;
            break;
        }
    }
    order.resize(keep);
    return order;
}

TokenId nucleus_sample(std::span<const double> probs, double top_p, double u) {
    const std::vector<TokenId> kept = nucleus(probs, top_p);
    double mass = 0.0;
    for (TokenId t : kept) mass += probs[t];
    const double target = u * mass;
    double cumulative = 0.0;
    for (TokenId t : kept) {
        cumulative += probs[t];
        if (target < cumulative) return t;
    }
    return kept.back();
}

std::vector<std::vector<TokenId>> sample(const Model& m, std::span<const TokenId> prompt,
                                         const SamplingParams& params, const StopRule& stop,
                                         std::uint64_t stream) {
    params.validate();
    check_tokens(m, prompt);
    Session base(m);
    for (TokenId t : prompt) base.feed(t);

    std::vector<std::vector<TokenId>> out(params.n_samples);
    for (std::size_t s = 0; s < params.n_samples; ++s) {
        Session session = base;
        for (std::size_t step = 0; step < params.max_new_tokens; ++step) {
            const Vector dist = session.next_distribution(params.temperature);
            CounterRng rng(params.seed, {stream, s, step});
            const TokenId t = nucleus_sample(dist, params.top_p, rng.uniform());
            if (std::find(stop.stop_tokens.begin(), stop.stop_tokens.end(), t) != stop.stop_tokens.end()) break;
            out[s].push_back(t);
            if (step + 1 < params.max_new_tokens) session.feed(t);
        }
    }
    return out;
}

} // namespace nclens
