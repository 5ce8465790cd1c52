#pragma once

#include "nclens/model_io.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nclens {

// Pre-tokenisation split rules. Both follow the published regexes with ASCII
// character classes; bytes >= 0x80 count as letters.
enum class Pretokenizer { gpt2, qwen2 };

struct TokenizerOptions {
    Pretokenizer pretokenizer = Pretokenizer::gpt2;
    // Strings matched verbatim before pre-tokenisation; each must be in the vocab.
    std::vector<std::string> special_tokens;
};

// Byte-level BPE tokenizer (vocab.json + merges.txt).
class Tokenizer {
public:
    static Tokenizer from_sources(std::string_view vocab_json, std::string_view merges_txt,
                                  TokenizerOptions options = {});

    // Greedy lowest-rank merging within each pre-token. Throws EncodeError only
    // when the vocabulary lacks a byte that the text needs.
    std::vector<TokenId> encode(std::string_view text) const;

    // Throws RangeError on ids outside the vocabulary.
    std::string decode(std::span<const TokenId> ids) const;

    // Raw bytes a single token decodes to.
    std::string token_bytes(TokenId id) const;

    std::size_t vocab_size() const noexcept { return id_to_token_.size(); }
    std::optional<TokenId> token_id(std::string_view token_string) const;
    bool covers_byte(unsigned char b) const;

    std::vector<std::string> pretokenize(std::string_view text) const;

private:
    std::vector<TokenId> encode_piece(std::string_view piece) const;

    TokenizerOptions options_;
    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::optional<std::string>> id_to_token_;
    std::unordered_map<std::string, std::size_t> merge_rank_;
    std::vector<std::pair<std::string, TokenId>> specials_;
};

Tokenizer load_tokenizer(const std::filesystem::path& vocab_path,
                         const std::filesystem::path& merges_path, TokenizerOptions options = {});

// GPT-2 byte -> printable code point table, rendered as UTF-8.
const std::array<std::string, 256>& byte_encoder();

// Encodes raw bytes into the byte-level token alphabet ("hi there" -> "hiĠthere").
std::string bytes_to_token_string(std::string_view bytes);

struct Variant {
    std::string surface;
    std::vector<TokenId> tokens;
};

// The surface forms of one target word, deduplicated by token sequence.
struct VariantSet {
    std::string target;
    std::vector<Variant> variants;
};

struct VariantRules {
    std::vector<std::string> punctuation{"", ".", ",", "!"};
};

// All capitalisation x leading-space x punctuation surfaces, in a fixed order,
// before tokenisation or dedup.
std::vector<std::string> variant_surfaces(std::string_view target, const VariantRules& rules = {});

// Surfaces containing bytes the vocabulary cannot express are skipped: no token
// sequence decodes to them, so they carry no probability mass.
VariantSet variant_set(const Tokenizer& tok, std::string_view target,
                       const VariantRules& rules = {});

} // namespace nclens
