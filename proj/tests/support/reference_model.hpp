#pragma once

// Straight-line full-recompute forward pass used as an oracle. It shares no
// code with the engine beyond the weight containers: every position is
// recomputed from scratch, attention is evaluated over the full prefix, and
// rotary embeddings are applied as complex rotations.

#include "nclens/model_io.hpp"

#include <cmath>
#include <complex>
#include <optional>
#include <vector>

namespace ref {

using nclens::Model;
using nclens::TokenId;
using Vec = std::vector<double>;

struct Splice {
    std::size_t layer = 0;    // residual index 0..L
    std::size_t position = 0;
    Vec state;
};

struct Result {
    std::vector<std::vector<Vec>> residuals; // [layer][position]
    std::vector<std::vector<Vec>> mid;       // [block-1][position], h + attn
    Vec last_logits;
};

inline Vec norm(const Vec& x, const Vec& g, double eps, nclens::NormKind kind) {
    double mu = 0;
    if (kind == nclens::NormKind::layernorm) {
        for (double v : x) mu += v;
        mu /= static_cast<double>(x.size());
    }
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    const double r = std::sqrt(var + eps);
    Vec y(x.size(), 0.0);
    if (r == 0.0) return y;
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = g[i] * (x[i] - mu) / r;
    return y;
}

inline Vec mv(const nclens::Matrix& w, const Vec& x) {
    Vec y(w.rows(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        double acc = 0;
        for (std::size_t c = 0; c < w.cols(); ++c) acc += w(r, c) * x[c];
        y[r] = acc;
    }
    return y;
}

inline Vec probs(const Vec& z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    Vec p(z.size());
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
    for (double& v : p) v /= s;
    return p;
}

inline void rotate(Vec& v, std::size_t offset, std::size_t hd, std::size_t pos, double theta) {
    const std::size_t half = hd / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double ang = static_cast<double>(pos) / std::pow(theta, static_cast<double>(2 * i) / static_cast<double>(hd));
        std::complex<double> z(v[offset + i], v[offset + i + half]);
        z *= std::polar(1.0, ang);
        v[offset + i] = z.real();
        v[offset + i + half] = z.imag();
    }
}

inline Vec logits_of(const Model& m, const Vec& h) {
    return mv(m.unembedding(), norm(h, m.final_norm, m.config.norm_eps, m.config.norm_kind));
}

inline Result run(const Model& m, const std::vector<TokenId>& toks, const std::optional<Splice>& splice = {}) {
    const auto& c = m.config;
    const std::size_t n = toks.size(), d = c.d_model, hd = c.head_dim, L = c.n_layers;
    Result res;
    std::vector<Vec> h(n);
    for (std::size_t p = 0; p < n; ++p) {
        h[p].assign(d, 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            h[p][i] = m.embedding(toks[p], i);
            if (c.position_kind == nclens::PositionKind::learned) h[p][i] += m.position_embedding(p, i);
        }
    }
    auto apply_splice = [&](std::size_t layer) {
        if (splice && splice->layer == layer) h[splice->position] = splice->state;
    };
    apply_splice(0);
    res.residuals.push_back(h);
    for (std::size_t l = 0; l < L; ++l) {
        const auto& w = m.layers[l];
        std::vector<Vec> q(n), k(n), v(n);
        for (std::size_t p = 0; p < n; ++p) {
            const Vec x = norm(h[p], w.attn_norm, c.norm_eps, c.norm_kind);
            q[p] = mv(w.wq, x);
            k[p] = mv(w.wk, x);
            v[p] = mv(w.wv, x);
            for (std::size_t i = 0; i < w.bq.size(); ++i) q[p][i] += w.bq[i];
            for (std::size_t i = 0; i < w.bk.size(); ++i) k[p][i] += w.bk[i];
            for (std::size_t i = 0; i < w.bv.size(); ++i) v[p][i] += w.bv[i];
            if (c.position_kind == nclens::PositionKind::rotary) {
                for (std::size_t hh = 0; hh < c.n_heads; ++hh) rotate(q[p], hh * hd, hd, p, c.rope_theta);
                for (std::size_t hh = 0; hh < c.n_kv_heads; ++hh) rotate(k[p], hh * hd, hd, p, c.rope_theta);
            }
        }
        std::vector<Vec> mid(n), out(n);
        for (std::size_t p = 0; p < n; ++p) {
            Vec cat(c.n_heads * hd, 0.0);
            for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
                const std::size_t kh = hh * c.n_kv_heads / c.n_heads;
                Vec s(p + 1);
                for (std::size_t j = 0; j <= p; ++j) {
                    double acc = 0;
                    for (std::size_t i = 0; i < hd; ++i) acc += q[p][hh * hd + i] * k[j][kh * hd + i];
                    s[j] = acc / std::sqrt(static_cast<double>(hd));
                }
                const Vec a = probs(s);
                for (std::size_t j = 0; j <= p; ++j) {
                    for (std::size_t i = 0; i < hd; ++i) cat[hh * hd + i] += a[j] * v[j][kh * hd + i];
                }
            }
            const Vec o = mv(w.wo, cat);
            mid[p] = h[p];
            for (std::size_t i = 0; i < d; ++i) mid[p][i] += o[i];
            const Vec x2 = norm(mid[p], w.ffn_norm, c.norm_eps, c.norm_kind);
            Vec up = mv(w.w_up, x2);
            if (c.ffn_kind == nclens::FfnKind::swiglu) {
                const Vec g = mv(w.w_gate, x2);
                for (std::size_t i = 0; i < up.size(); ++i) up[i] *= g[i] / (1.0 + std::exp(-g[i]));
            } else {
                for (double& z : up) z = z * 0.5 * std::erfc(-z / std::sqrt(2.0));
            }
            const Vec dn = mv(w.w_down, up);
            out[p] = mid[p];
            for (std::size_t i = 0; i < d; ++i) out[p][i] += dn[i];
        }
        h = out;
        apply_splice(l + 1);
        res.mid.push_back(mid);
        res.residuals.push_back(h);
    }
    res.last_logits = logits_of(m, h[n - 1]);
    return res;
}

inline Vec next_dist(const Model& m, const std::vector<TokenId>& toks, const std::optional<Splice>& splice = {}) {
    return probs(run(m, toks, splice).last_logits);
}

} // namespace ref
