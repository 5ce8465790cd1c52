#pragma once

// Exhaustive-enumeration oracle for semantic pressure on tiny vocabularies.

#include "nclens/tokenizer.hpp"
#include "nclens/toy.hpp"
#include "support/reference_model.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace oracle {

inline nclens::ToySpec tiny_vocab_spec() {
    nclens::ToySpec s;
    s.n_layers = 2;
    s.d_model = 16;
    s.n_heads = 2;
    s.d_ff = 24;
    s.alphabet = "abcABC.,! ";
    s.required = "";
    s.max_vocab = 20;
    s.words = {"ab", "ba", "ca", "bc", "cc"};
    return s;
}

inline const std::vector<std::string>& tiny_targets() {
    static const std::vector<std::string> t{"a", "b", "c", "ab", "ba", "ca", "bc", "cc", "ac", "cb"};
    return t;
}

// {lower, Title, UPPER} x {" ", ""} x {"", ".", ",", "!"}, built independently.
inline std::set<std::string> surfaces(const std::string& word) {
    std::string lo, up;
    for (char c : word) {
        lo += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        up += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    std::string ti = lo;
    ti[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(ti[0])));
    std::set<std::string> out;
    for (const auto& w : {lo, ti, up})
        for (const char* sp : {"", " "})
            for (const char* pu : {"", ".", ",", "!"}) out.insert(std::string(sp) + w + pu);
    return out;
}

struct Enumerator {
    const nclens::Model& model;
    const nclens::Tokenizer& tok;
    std::vector<nclens::TokenId> context;
    std::map<std::vector<nclens::TokenId>, std::vector<double>> cache;

    const std::vector<double>& dist_after(const std::vector<nclens::TokenId>& prefix) {
        auto it = cache.find(prefix);
        if (it != cache.end()) return it->second;
        std::vector<nclens::TokenId> seq = context;
        seq.insert(seq.end(), prefix.begin(), prefix.end());
        return cache[prefix] = ref::next_dist(model, seq);
    }

    double seq_prob(const std::vector<nclens::TokenId>& s) {
        double p = 1.0;
        std::vector<nclens::TokenId> prefix;
        for (auto t : s) {
            p *= dist_after(prefix)[t];
            prefix.push_back(t);
        }
        return p;
    }

    // Sum over canonical sequences (length <= max_len) decoding to a surface,
    // counting only the first qualifying prefix of each path.
    double pressure(const std::string& target, std::size_t max_len = 3) {
        const auto surf = surfaces(target);
        const std::size_t V = model.config.vocab_size;
        auto qualifies = [&](const std::vector<nclens::TokenId>& s) {
            const std::string text = tok.decode(s);
            if (!surf.count(text)) return false;
            try {
                return tok.encode(text) == s;
            } catch (const std::exception&) {
                return false;
            }
        };
        double total = 0.0;
        std::vector<std::vector<nclens::TokenId>> frontier{{}};
        for (std::size_t len = 1; len <= max_len; ++len) {
            std::vector<std::vector<nclens::TokenId>> next;
            for (const auto& pre : frontier) {
                for (nclens::TokenId t = 0; t < V; ++t) {
                    auto s = pre;
                    s.push_back(t);
                    if (qualifies(s)) {
                        total += seq_prob(s);
                    } else {
                        next.push_back(std::move(s));
                    }
                }
            }
            frontier = std::move(next);
        }
        return total;
    }
};

} // namespace oracle
