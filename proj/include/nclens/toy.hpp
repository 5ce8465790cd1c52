#pragma once

// Tiny deterministic checkpoints, tokenizers and datasets for desk-scale runs.

#include "nclens/model_io.hpp"
#include "nclens/pressure.hpp"
#include "nclens/tokenizer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace nclens {

// Adds `bias` to the unembedding row of the single token for " word".
struct ToyBias {
    std::string word;
    double bias = 0.0;
};

struct ToySpec {
    std::size_t n_layers = 2;
    std::size_t d_model = 16;
    std::size_t n_heads = 2;
    std::size_t d_ff = 32;
    NormKind norm_kind = NormKind::rms;
    PositionKind position_kind = PositionKind::rotary;
    FfnKind ffn_kind = FfnKind::swiglu;
    std::size_t max_positions = 512;
    bool attn_bias = false;
    bool tie_embeddings = false;
    double init_scale = 1.0;

    // One base token per byte, in this order.
    std::string alphabet = default_alphabet();
    // Bytes the vocabulary must cover (the condition templates by default).
    std::string required = template_bytes();
    std::size_t max_vocab = 64;
    std::vector<ToyBias> biases;
    // Extra merged words (" word" tokens) without a logit bias.
    std::vector<std::string> words;
    std::string chat_template;

    static std::string default_alphabet();
    static std::string template_bytes();

    // Throws SpecError.
    void validate() const;
};

struct ToyArtifacts {
    std::string config_json;
    std::string weights;
    std::string vocab_json;
    std::string merges_txt;
};

ToyArtifacts build_toy(const ToySpec& spec, std::uint64_t seed);

Model toy_model(const ToyArtifacts& a);
Tokenizer toy_tokenizer(const ToyArtifacts& a);

// Writes config.json, model.safetensors, vocab.json and merges.txt.
void write_toy(const ToyArtifacts& a, const std::filesystem::path& dir);

struct ToyPrompt {
    std::string question;
    std::string target;
    Category category = Category::factual;
};

// Built-in question bank that fits the default alphabet.
std::vector<ToyPrompt> default_toy_bank();

// n records cycling through the bank with ids "toy-000", "toy-001", ...
// Throws LeakageError for a question that already contains its target.
std::vector<PromptRecord> build_toy_dataset(std::size_t n_prompts, const std::vector<ToyPrompt>& bank);

// 3-layer model biased toward the bank's targets at graded strengths.
ToySpec desk_toy_spec();

// Writes a complete desk fixture (model, tokenizer, dataset.jsonl, run.json)
// and returns the path of run.json.
std::filesystem::path write_desk_fixture(const std::filesystem::path& dir, std::size_t n_prompts,
                                         std::uint64_t seed);

} // namespace nclens
