#include "nclens/tokenizer.hpp"

#include "nclens/errors.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <sstream>

namespace nclens {

namespace {

std::string utf8(std::uint32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

// Splits a UTF-8 string into code point substrings. Invalid lead bytes become
// single-byte pieces.
std::vector<std::string> utf8_chars(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t len = 1;
        if (c >= 0xF0) len = 4;
        else if (c >= 0xE0) len = 3;
        else if (c >= 0xC0) len = 2;
        len = std::min(len, s.size() - i);
        out.emplace_back(s.substr(i, len));
        i += len;
    }
    return out;
}

const std::unordered_map<std::string, unsigned char>& byte_decoder() {
    static const auto table = [] {
        std::unordered_map<std::string, unsigned char> m;
        const auto& enc = byte_encoder();
        for (int b = 0; b < 256; ++b) m.emplace(enc[b], static_cast<unsigned char>(b));
        return m;
    }();
    return table;
}

enum class CharClass { letter, digit, space, other };

CharClass classify(unsigned char c) {
    if (c >= 0x80 || std::isalpha(c)) return CharClass::letter;
    if (std::isdigit(c)) return CharClass::digit;
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
        return CharClass::space;
    }
    return CharClass::other;
}

bool is_newline(unsigned char c) { return c == '\n' || c == '\r'; }

// Length of a contraction suffix ('s 't 're 've 'm 'll 'd) at s[i], or 0.
std::size_t contraction_at(std::string_view s, std::size_t i, bool case_insensitive) {
    if (s[i] != '\'') return 0;
    auto lower = [&](std::size_t k) {
        const auto c = static_cast<unsigned char>(s[k]);
        return case_insensitive ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
    };
    for (std::string_view suffix : {"re", "ve", "ll", "s", "t", "m", "d"}) {
        if (i + suffix.size() >= s.size()) continue;
        bool match = true;
        for (std::size_t k = 0; k < suffix.size(); ++k) {
            if (lower(i + 1 + k) != suffix[k]) {
                match = false;
                break;
            }
        }
        if (match) return suffix.size() + 1;
    }
    return 0;
}

std::size_t run_of(std::string_view s, std::size_t i, CharClass cls) {
    std::size_t j = i;
    while (j < s.size() && classify(static_cast<unsigned char>(s[j])) == cls) ++j;
    return j;
}

// Whitespace tail shared by both schemes: "\s+(?!\S)|\s+".
std::size_t whitespace_end(std::string_view s, std::size_t i) {
    const std::size_t j = run_of(s, i, CharClass::space);
    if (j < s.size() && j - i >= 2) return j - 1;
    return j;
}

std::vector<std::string> split_gpt2(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const CharClass cls = classify(static_cast<unsigned char>(s[i]));
        std::size_t end;
        if (std::size_t c = contraction_at(s, i, false)) {
            end = i + c;
        } else if (s[i] == ' ' && i + 1 < s.size() &&
                   classify(static_cast<unsigned char>(s[i + 1])) != CharClass::space) {
            end = run_of(s, i + 1, classify(static_cast<unsigned char>(s[i + 1])));
        } else if (cls != CharClass::space) {
            end = run_of(s, i, cls);
        } else {
            end = whitespace_end(s, i);
        }
        out.emplace_back(s.substr(i, end - i));
        i = end;
    }
    return out;
}

std::vector<std::string> split_qwen2(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        const CharClass cls = classify(c);
        std::size_t end = 0;
        if (std::size_t k = contraction_at(s, i, true)) {
            end = i + k;
        } else if (cls == CharClass::letter) {
            end = run_of(s, i, CharClass::letter);
        } else if (cls != CharClass::digit && !is_newline(c) && i + 1 < s.size() &&
                   classify(static_cast<unsigned char>(s[i + 1])) == CharClass::letter) {
            end = run_of(s, i + 1, CharClass::letter);
        } else if (cls == CharClass::digit) {
            end = i + 1;
        } else {
            const std::size_t start = (c == ' ' && i + 1 < s.size()) ? i + 1 : i;
            if (classify(static_cast<unsigned char>(s[start])) == CharClass::other) {
                end = run_of(s, start, CharClass::other);
                while (end < s.size() && is_newline(static_cast<unsigned char>(s[end]))) ++end;
            } else {
                // Whitespace: "\s*[\r\n]+" first, then the shared tail.
                const std::size_t j = run_of(s, i, CharClass::space);
                std::size_t last_nl = std::string_view::npos;
                for (std::size_t k = i; k < j; ++k) {
                    if (is_newline(static_cast<unsigned char>(s[k]))) last_nl = k;
                }
                end = last_nl != std::string_view::npos ? last_nl + 1 : whitespace_end(s, i);
            }
        }
        out.emplace_back(s.substr(i, end - i));
        i = end;
    }
    return out;
}

} // namespace

const std::array<std::string, 256>& byte_encoder() {
    static const auto table = [] {
        std::array<std::string, 256> t;
        std::array<bool, 256> printable{};
        for (int b = '!'; b <= '~'; ++b) printable[b] = true;
        for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
        for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
        std::uint32_t next = 256;
        for (int b = 0; b < 256; ++b) {
            t[b] = utf8(printable[b] ? static_cast<std::uint32_t>(b) : next++);
        }
        return t;
    }();
    return table;
}

std::string bytes_to_token_string(std::string_view bytes) {
    std::string out;
    const auto& enc = byte_encoder();
    for (unsigned char b : bytes) out += enc[b];
    return out;
}

Tokenizer Tokenizer::from_sources(std::string_view vocab_json, std::string_view merges_txt,
                                  TokenizerOptions options) {
    Tokenizer t;
    t.options_ = std::move(options);

    nlohmann::json vocab;
    try {
        vocab = nlohmann::json::parse(vocab_json);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("vocab is not valid JSON: ") + e.what());
    }
    if (!vocab.is_object() || vocab.empty()) throw LoadError("vocab must be a non-empty JSON object");
    std::size_t max_id = 0;
    for (const auto& [token, id] : vocab.items()) {
        if (!id.is_number_unsigned()) throw LoadError("vocab id for '" + token + "' is not a non-negative integer");
        max_id = std::max<std::size_t>(max_id, id.get<std::size_t>());
    }
    if (max_id >= std::numeric_limits<TokenId>::max()) throw LoadError("vocab id too large");
    t.id_to_token_.resize(max_id + 1);
    for (const auto& [token, idj] : vocab.items()) {
        const auto id = idj.get<TokenId>();
        if (t.id_to_token_[id]) {
            throw LoadError("vocab maps both '" + *t.id_to_token_[id] + "' and '" + token +
                            "' to id " + std::to_string(id));
        }
        t.id_to_token_[id] = token;
        t.token_to_id_.emplace(token, id);
    }

    std::size_t line_no = 0;
    std::size_t rank = 0;
    std::istringstream lines{std::string(merges_txt)};
    std::string line;
    while (std::getline(lines, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line_no == 1 && line.rfind("#version", 0) == 0) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() ||
            line.find(' ', sp + 1) != std::string::npos) {
            throw ParseError("merges line " + std::to_string(line_no) +
                             ": expected two space-separated symbols, got '" + line + "'");
        }
        const std::string left = line.substr(0, sp);
        const std::string right = line.substr(sp + 1);
        if (!t.token_to_id_.count(left + right)) {
            throw ParseError("merges line " + std::to_string(line_no) + ": merged symbol '" +
                             left + right + "' is not in the vocab");
        }
        t.merge_rank_.emplace(left + '\x01' + right, rank++);
    }

    for (const std::string& special : t.options_.special_tokens) {
        auto it = t.token_to_id_.find(special);
        if (it == t.token_to_id_.end()) throw LoadError("special token '" + special + "' not in vocab");
        t.specials_.emplace_back(special, it->second);
    }
    // Longest match wins when specials share a prefix.
    std::sort(t.specials_.begin(), t.specials_.end(),
              [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
    return t;
}

Tokenizer load_tokenizer(const std::filesystem::path& vocab_path,
                         const std::filesystem::path& merges_path, TokenizerOptions options) {
    return Tokenizer::from_sources(read_file(vocab_path), read_file(merges_path), std::move(options));
}

std::optional<TokenId> Tokenizer::token_id(std::string_view token_string) const {
    auto it = token_to_id_.find(std::string(token_string));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
}

bool Tokenizer::covers_byte(unsigned char b) const {
    return token_to_id_.count(byte_encoder()[b]) > 0;
}

std::vector<std::string> Tokenizer::pretokenize(std::string_view text) const {
    return options_.pretokenizer == Pretokenizer::gpt2 ? split_gpt2(text) : split_qwen2(text);
}

std::vector<TokenId> Tokenizer::encode_piece(std::string_view piece) const {
    const auto& enc = byte_encoder();
    std::vector<std::string> symbols;
    symbols.reserve(piece.size());
    for (unsigned char b : piece) symbols.push_back(enc[b]);

    while (symbols.size() > 1) {
        std::size_t best_rank = std::numeric_limits<std::size_t>::max();
        std::size_t best = 0;
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            auto it = merge_rank_.find(symbols[i] + '\x01' + symbols[i + 1]);
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best = i;
            }
        }
        if (best_rank == std::numeric_limits<std::size_t>::max()) break;
        const std::string left = symbols[best];
        const std::string right = symbols[best + 1];
        std::vector<std::string> merged;
        merged.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size();) {
            if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
                merged.push_back(left + right);
                i += 2;
            } else {
                merged.push_back(symbols[i]);
                ++i;
            }
        }
        symbols = std::move(merged);
    }

    std::vector<TokenId> ids;
    ids.reserve(symbols.size());
    for (const std::string& sym : symbols) {
        if (auto it = token_to_id_.find(sym); it != token_to_id_.end()) {
            ids.push_back(it->second);
            continue;
        }
        for (const std::string& ch : utf8_chars(sym)) {
            auto it = token_to_id_.find(ch);
            if (it == token_to_id_.end()) {
                const unsigned char b = byte_decoder().at(ch);
                std::ostringstream msg;
                msg << "vocab has no token for byte 0x" << std::hex << static_cast<int>(b);
                throw EncodeError(msg.str());
            }
            ids.push_back(it->second);
        }
    }
    return ids;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    std::size_t i = 0;
    std::size_t plain_start = 0;
    auto flush = [&](std::size_t end) {
        for (const std::string& piece : pretokenize(text.substr(plain_start, end - plain_start))) {
            const auto piece_ids = encode_piece(piece);
            ids.insert(ids.end(), piece_ids.begin(), piece_ids.end());
        }
    };
    while (i < text.size() && !specials_.empty()) {
        bool matched = false;
        for (const auto& [str, id] : specials_) {
            if (text.substr(i, str.size()) == str) {
                flush(i);
                ids.push_back(id);
                i += str.size();
                plain_start = i;
                matched = true;
                break;
            }
        }
        if (!matched) ++i;
    }
    flush(text.size());
    return ids;
}

std::string Tokenizer::token_bytes(TokenId id) const {
    if (id >= id_to_token_.size() || !id_to_token_[id]) {
        throw RangeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(id_to_token_.size()));
    }
    const std::string& token = *id_to_token_[id];
    const auto& dec = byte_decoder();
    std::string out;
    for (const std::string& ch : utf8_chars(token)) {
        auto it = dec.find(ch);
        if (it == dec.end()) return token; // special / literal token
        out.push_back(static_cast<char>(it->second));
    }
    return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += token_bytes(id);
    return out;
}

std::vector<std::string> variant_surfaces(std::string_view target, const VariantRules& rules) {
    if (target.empty()) throw ArgumentError("variant target must be non-empty");
    for (unsigned char c : target) {
        if (classify(c) == CharClass::space) throw ArgumentError("variant target must be a single word");
    }
    std::string lower(target), upper(target), title;
    for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    for (char& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    title = lower;
    title[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(title[0])));

    std::vector<std::string> out;
    for (const std::string& cased : {lower, title, upper}) {
        for (const char* space : {" ", ""}) {
            for (const std::string& punct : rules.punctuation) out.push_back(space + cased + punct);
        }
    }
    return out;
}

VariantSet variant_set(const Tokenizer& tok, std::string_view target, const VariantRules& rules) {
    VariantSet set;
    set.target = std::string(target);
    for (std::string& surface : variant_surfaces(target, rules)) {
        std::vector<TokenId> ids;
        try {
            ids = tok.encode(surface);
        } catch (const EncodeError&) {
            continue;
        }
        const bool duplicate = std::any_of(set.variants.begin(), set.variants.end(),
                                           [&](const Variant& v) { return v.tokens == ids; });
        if (!duplicate) set.variants.push_back({std::move(surface), std::move(ids)});
    }
    return set;
}

} // namespace nclens
