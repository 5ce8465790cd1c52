#pragma once

// Hooked decoder-only forward pass. Blocks are pre-norm:
//   h_mid = h + Attn(norm(h));  h_out = h_mid + FFN(norm(h_mid))
// Residual layer indices run 0..L: 0 is the embedding output, l >= 1 is the
// output of block l. Tokens are processed one position at a time against a
// per-call KV cache.

#include "nclens/model_io.hpp"
#include "nclens/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace nclens {

struct CaptureSpec {
    std::vector<std::size_t> positions;
    bool last = true; // also capture the decision step (final position)
    bool residuals = true;
    bool attn_weights = false;
    bool component_states = false;

    static CaptureSpec decision_step(bool attn = false, bool components = false) {
        CaptureSpec s;
        s.attn_weights = attn;
        s.component_states = components;
        return s;
    }
};

// (h^(l-1), h^(l-1) + Attn^(l), h^(l)) for one block at one position.
struct ComponentStates {
    Vector pre;
    Vector post_attn;
    Vector post_ffn;
};

struct ForwardTrace {
    std::vector<TokenId> tokens;
    Vector final_logits;
    Vector final_dist;
    std::vector<std::size_t> positions; // captured, ascending

    // residuals[l][k] = h^(l) at positions[k], l in [0, L]
    std::vector<std::vector<Vector>> residuals;
    // attn_weights[l-1][k][head] = attention row over keys 0..positions[k]
    std::vector<std::vector<std::vector<Vector>>> attn_weights;
    // components[l-1][k]
    std::vector<std::vector<ComponentStates>> components;

    std::size_t decision_step() const { return tokens.size() - 1; }
    // Index into the captured-position arrays; StateError if not captured.
    std::size_t slot(std::size_t position) const;
    std::size_t n_layers() const { return residuals.empty() ? components.size() : residuals.size() - 1; }
};

struct PatchSpec {
    std::size_t layer = 0;
    std::vector<std::size_t> positions;
    std::vector<Vector> states; // one per position, dim d_model
};

struct SamplingParams {
    double temperature = 1.0;
    double top_p = 0.9;
    std::size_t n_samples = 16;
    std::size_t max_new_tokens = 8;
    std::uint64_t seed = 42;

    void validate() const;
};

struct StopRule {
    std::vector<TokenId> stop_tokens;
};

// Incremental evaluation state: KV cache plus the last hidden state.
class Session {
public:
    struct Hooks {
        // patch[l] non-null => replace h^(l) at this position before it is consumed.
        std::vector<const Vector*> patch;
        bool capture_residuals = false;
        bool capture_attn = false;
        bool capture_components = false;

        std::vector<Vector> residuals;                 // L+1
        std::vector<std::vector<Vector>> attn;         // L x heads
        std::vector<ComponentStates> components;       // L
    };

    explicit Session(const Model& model);

    void feed(TokenId token, Hooks* hooks = nullptr);

    // Logits for the next token after everything fed so far.
    Vector logits() const;
    Vector next_distribution(double temperature = 1.0) const;

    std::size_t length() const noexcept { return length_; }
    const Vector& last_hidden() const { return last_hidden_; }
    const Model& model() const { return *model_; }

private:
    const Model* model_;
    std::vector<Vector> keys_;   // per layer, [pos][n_kv_heads*head_dim]
    std::vector<Vector> values_;
    Vector last_hidden_;
    std::size_t length_ = 0;
};

ForwardTrace forward(const Model& m, std::span<const TokenId> tokens, const CaptureSpec& spec);

ForwardTrace forward_with_patch(const Model& m, std::span<const TokenId> tokens,
                                const CaptureSpec& spec, std::span<const PatchSpec> patches);

// Final norm -> W_U. The lens and the engine output share this projection.
Vector project_to_logits(const Model& m, std::span<const double> state);

// Token ids of the nucleus: the smallest prefix of the descending-probability
// order (ties by id) whose cumulative mass reaches top_p.
std::vector<TokenId> nucleus(std::span<const double> probs, double top_p);

// Inverse-CDF draw from the renormalised nucleus with u in [0, 1).
TokenId nucleus_sample(std::span<const double> probs, double top_p, double u);

// n_samples continuations of the prompt. Each draw uses the counter stream
// (seed, stream, sample index, step), so results never depend on scheduling.
// Stop tokens end a sample and are not included.
std::vector<std::vector<TokenId>> sample(const Model& m, std::span<const TokenId> prompt,
                                         const SamplingParams& params, const StopRule& stop,
                                         std::uint64_t stream);

} // namespace nclens
