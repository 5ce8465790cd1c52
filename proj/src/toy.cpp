#include "nclens/toy.hpp"

#include "nclens/behavior.hpp"
#include "nclens/errors.hpp"
#include "nclens/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace nclens {

namespace {

using json = nlohmann::json;

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw LoadError("cannot write '" + p.string() + "'");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw LoadError("failed writing '" + p.string() + "'");
}

std::vector<std::string> merged_words(const ToySpec& s) {
    std::vector<std::string> words;
    for (const auto& b : s.biases) words.push_back(b.word);
    for (const auto& w : s.words) words.push_back(w);
    return words;
}

// Progressive merges " w1", " w1w2", ... for every word, deduplicated in first-seen order.
std::vector<std::pair<std::string, std::string>> word_merges(const std::vector<std::string>& words) {
    std::vector<std::pair<std::string, std::string>> merges;
    std::set<std::string> made;
    for (const auto& w : words) {
        std::string left = " ";
        for (char c : w) {
            const std::string right(1, c);
            if (made.insert(left + right).second) merges.emplace_back(left, right);
            left += right;
        }
    }
    return merges;
}

} // namespace

std::string ToySpec::default_alphabet() { return "abcdefghijklmnopqrstuvwxyzADQ .,!':?"; }

std::string ToySpec::template_bytes() {
    std::string all = std::string(kBaselinePrefix) + std::string(kNegativePrefix) + std::string(kNegativeMiddle);
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    return all;
}

void ToySpec::validate() const {
    if (n_layers < 1 || n_layers > 4) throw SpecError("toy n_layers must be in [1, 4]");
    if (d_model < 8 || d_model > 64) throw SpecError("toy d_model must be in [8, 64]");
    if (n_heads == 0 || d_model % n_heads != 0) throw SpecError("toy d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0 && position_kind == PositionKind::rotary) {
        throw SpecError("rotary positions need an even head dimension");
    }
    if (d_ff == 0) throw SpecError("toy d_ff must be positive");
    std::set<char> alpha(alphabet.begin(), alphabet.end());
    if (alpha.size() != alphabet.size()) throw SpecError("toy alphabet has repeated bytes");
    std::string missing;
    for (char c : required) {
        if (!alpha.count(c)) missing += c;
    }
    if (!missing.empty()) throw SpecError("toy alphabet does not cover required bytes \"" + missing + "\"");
    for (const auto& w : merged_words(*this)) {
        if (w.empty()) throw SpecError("toy word must be non-empty");
        for (char c : w) {
            if (!alpha.count(c) || c == ' ') throw SpecError("toy word '" + w + "' uses bytes outside the alphabet");
        }
    }
    const std::size_t vocab = alphabet.size() + word_merges(merged_words(*this)).size();
    if (vocab > max_vocab) {
        throw SpecError("toy vocabulary needs " + std::to_string(vocab) + " tokens, cap is " +
                        std::to_string(max_vocab));
    }
    if (vocab < 2) throw SpecError("toy vocabulary needs at least two tokens");
    if (tie_embeddings && !biases.empty()) throw SpecError("logit biases need an untied unembedding");
    if (!biases.empty() && d_model < 10) throw SpecError("logit biases need d_model >= 10");
}

ToyArtifacts build_toy(const ToySpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto& enc = byte_encoder();

    // Tokenizer.
    nlohmann::ordered_json vocab = nlohmann::ordered_json::object();
    TokenId next_id = 0;
    for (char c : spec.alphabet) vocab[enc[static_cast<unsigned char>(c)]] = next_id++;
    const auto merges = word_merges(merged_words(spec));
    std::string merges_txt;
    for (const auto& [l, r] : merges) {
        const std::string ls = bytes_to_token_string(l), rs = bytes_to_token_string(r);
        merges_txt += ls + " " + rs + "\n";
        vocab[ls + rs] = next_id++;
    }
    const std::size_t V = next_id;

    // Config.
    ModelConfig c;
    c.n_layers = spec.n_layers;
    c.d_model = spec.d_model;
    c.n_heads = spec.n_heads;
    c.n_kv_heads = spec.n_heads;
    c.head_dim = spec.d_model / spec.n_heads;
    c.d_ff = spec.d_ff;
    c.vocab_size = V;
    c.norm_kind = spec.norm_kind;
    c.position_kind = spec.position_kind;
    c.max_positions = spec.max_positions;
    c.ffn_kind = spec.ffn_kind;
    c.attn_bias = spec.attn_bias;
    c.tie_embeddings = spec.tie_embeddings;
    c.chat_template = spec.chat_template;
    c.validate();

    const std::size_t d = c.d_model;
    const bool biased = !spec.biases.empty();
    std::map<std::string, ArchiveTensor> tensors;
    auto random = [&](const std::string& name, std::size_t rows, std::size_t cols, double scale) {
        CounterRng rng(seed, {fnv1a64(name)});
        ArchiveTensor t{"F32", {rows, cols}, std::vector<double>(rows * cols)};
        for (double& x : t.values) x = rng.normal() * scale;
        return t;
    };
    auto vec = [&](std::size_t n, double value) { return ArchiveTensor{"F32", {n}, std::vector<double>(n, value)}; };
    // Constant +c / -c channels in dims 0 and 1 that no block writes to.
    auto zero_rows01 = [&](ArchiveTensor& t) {
        if (!biased) return;
        const std::size_t cols = t.shape[1];
        std::fill(t.values.begin(), t.values.begin() + 2 * static_cast<std::ptrdiff_t>(cols), 0.0);
    };
    const double s = spec.init_scale;
    const double hd_total = static_cast<double>(c.n_heads * c.head_dim);

    ArchiveTensor emb = random("embedding", V, d, 1.0);
    if (biased) {
        for (std::size_t v = 0; v < V; ++v) {
            emb.values[v * d] = 1.0;
            emb.values[v * d + 1] = -1.0;
        }
    }
    tensors["embedding"] = emb;
    if (c.position_kind == PositionKind::learned) {
        ArchiveTensor pe = random("position_embedding", c.max_positions, d, 0.5);
        for (std::size_t p = 0; p < c.max_positions && biased; ++p) pe.values[p * d] = pe.values[p * d + 1] = 0.0;
        tensors["position_embedding"] = pe;
    }
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        const double in_d = s / std::sqrt(static_cast<double>(d));
        tensors[p + "attn_norm"] = vec(d, 1.0);
        tensors[p + "ffn_norm"] = vec(d, 1.0);
        tensors[p + "attn.q"] = random(p + "attn.q", c.n_heads * c.head_dim, d, in_d);
        tensors[p + "attn.k"] = random(p + "attn.k", c.n_kv_heads * c.head_dim, d, in_d);
        tensors[p + "attn.v"] = random(p + "attn.v", c.n_kv_heads * c.head_dim, d, in_d);
        ArchiveTensor wo = random(p + "attn.o", d, c.n_heads * c.head_dim, s / std::sqrt(hd_total));
        zero_rows01(wo);
        tensors[p + "attn.o"] = wo;
        tensors[p + "ffn.up"] = random(p + "ffn.up", c.d_ff, d, in_d);
        if (c.ffn_kind == FfnKind::swiglu) tensors[p + "ffn.gate"] = random(p + "ffn.gate", c.d_ff, d, in_d);
        ArchiveTensor down = random(p + "ffn.down", d, c.d_ff, s / std::sqrt(static_cast<double>(c.d_ff)));
        zero_rows01(down);
        tensors[p + "ffn.down"] = down;
        if (c.attn_bias) {
            tensors[p + "attn.q_bias"] = random(p + "attn.q_bias", 1, c.n_heads * c.head_dim, 0.1);
            tensors[p + "attn.k_bias"] = random(p + "attn.k_bias", 1, c.n_kv_heads * c.head_dim, 0.1);
            tensors[p + "attn.v_bias"] = random(p + "attn.v_bias", 1, c.n_kv_heads * c.head_dim, 0.1);
            for (const char* b : {"attn.q_bias", "attn.k_bias", "attn.v_bias"}) {
                auto& t = tensors[p + b];
                t.shape = {t.values.size()};
            }
        }
    }
    tensors["final_norm"] = vec(d, 1.0);
    if (!c.tie_embeddings) {
        ArchiveTensor wu = random("unembedding", V, d, 1.0 / std::sqrt(static_cast<double>(d)));
        if (biased) {
            for (std::size_t v = 0; v < V; ++v) wu.values[v * d] = wu.values[v * d + 1] = 0.0;
            for (const ToyBias& b : spec.biases) {
                const TokenId id = vocab.at(bytes_to_token_string(" " + b.word)).get<TokenId>();
                wu.values[id * d] += b.bias / 2.0;
                wu.values[id * d + 1] -= b.bias / 2.0;
            }
        }
        tensors["unembedding"] = wu;
    }

    json meta = {{"generator", "nclens-toy"}, {"seed", std::to_string(seed)}};
    ToyArtifacts a;
    a.config_json = c.to_json().dump(2) + "\n";
    a.weights = serialize_tensor_archive(tensors, meta);
    a.vocab_json = vocab.dump(2) + "\n";
    a.merges_txt = merges_txt;
    return a;
}

Model toy_model(const ToyArtifacts& a) { return load_model(std::string_view(a.config_json), std::string_view(a.weights)); }

Tokenizer toy_tokenizer(const ToyArtifacts& a) { return Tokenizer::from_sources(a.vocab_json, a.merges_txt); }

void write_toy(const ToyArtifacts& a, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text(dir / "config.json", a.config_json);
    write_text(dir / "model.safetensors", a.weights);
    write_text(dir / "vocab.json", a.vocab_json);
    write_text(dir / "merges.txt", a.merges_txt);
}

std::vector<ToyPrompt> default_toy_bank() {
    using C = Category;
    return {
        {"once in a blue what?", "moon", C::idiom},
        {"actors say break a what?", "leg", C::idiom},
        {"what fills a pen?", "ink", C::commonsense},
        {"what shines in the day sky?", "sun", C::factual},
        {"what is frozen water called?", "ice", C::factual},
        {"what pet says meow?", "cat", C::commonsense},
        {"is snow hot or what?", "cold", C::commonsense},
        {"what glows at night over the sea?", "moon", C::creative},
        {"what color is a ripe tomato?", "red", C::factual},
        {"what insect makes honey?", "bee", C::factual},
        {"what does a squid squirt?", "ink", C::factual},
        {"a chair stands on each what?", "leg", C::commonsense},
        {"what star warms the earth?", "sun", C::factual},
        {"what chills a drink?", "ice", C::commonsense},
        {"what chases a mouse?", "cat", C::commonsense},
        {"how does a winter night feel?", "cold", C::creative},
        {"what is the color of a stop sign?", "red", C::factual},
        {"what buzzes near a flower?", "bee", C::commonsense},
        {"the moon librarian stamps books with what?", "ink", C::ood},
        {"a glass frog dances on one what?", "leg", C::ood},
        {"what does a clock tower dream of at noon?", "sun", C::creative},
        {"a dragon breathes fire, a yeti breathes what?", "ice", C::ood},
        {"what would a teacup tiger hunt?", "cat", C::ood},
        {"what lights the tide at midnight?", "moon", C::factual},
    };
}

std::vector<PromptRecord> build_toy_dataset(std::size_t n_prompts, const std::vector<ToyPrompt>& bank) {
    if (bank.empty() && n_prompts > 0) throw ArgumentError("toy dataset needs a non-empty bank");
    std::vector<PromptRecord> out;
    out.reserve(n_prompts);
    for (std::size_t i = 0; i < n_prompts; ++i) {
        const ToyPrompt& p = bank[i % bank.size()];
        char id[16];
        std::snprintf(id, sizeof id, "toy-%03zu", i);
        out.push_back(PromptRecord::make(id, p.category, p.question, p.target, {{"source", "toy"}}));
    }
    return out;
}

ToySpec desk_toy_spec() {
    ToySpec s;
    s.n_layers = 3;
    s.d_model = 32;
    s.n_heads = 4;
    s.d_ff = 64;
    s.biases = {{"moon", 9.0}, {"leg", 7.0}, {"ink", 6.0}, {"sun", 5.0}, {"ice", 4.0},
                {"cat", 3.0},  {"cold", 2.0}, {"red", 1.0}, {"bee", 0.0}};
    return s;
}

std::filesystem::path write_desk_fixture(const std::filesystem::path& dir, std::size_t n_prompts,
                                         std::uint64_t seed) {
    const ToyArtifacts a = build_toy(desk_toy_spec(), seed);
    write_toy(a, dir / "model");
    const auto records = build_toy_dataset(n_prompts, default_toy_bank());
    write_text(dir / "dataset.jsonl", dataset_to_jsonl(records));

    nlohmann::ordered_json run;
    run["model"] = {{"config", "model/config.json"}, {"weights", "model/model.safetensors"}};
    run["tokenizer"] = {{"vocab", "model/vocab.json"}, {"merges", "model/merges.txt"}, {"pretokenizer", "gpt2"}};
    run["dataset"] = "dataset.jsonl";
    run["sampling"] = {{"temperature", 1.0}, {"top_p", 0.9}, {"n_samples", 16}, {"max_new_tokens", 4}};
    run["bootstrap"] = {{"n_resamples", 200}, {"level", 0.95}};
    run["patch"] = {{"threshold", 0.0}, {"positions", "decision_step"}};
    run["output_dir"] = "out";
    run["seed"] = seed;
    const auto path = dir / "run.json";
    write_text(path, run.dump(2) + "\n");
    return path;
}

} // namespace nclens
