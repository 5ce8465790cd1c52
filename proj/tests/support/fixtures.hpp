#pragma once

#include "nclens/toy.hpp"

#include <filesystem>
#include <string>

namespace fixtures {

struct Toy {
    nclens::ToyArtifacts artifacts;
    nclens::Model model;
    nclens::Tokenizer tok;
};

inline Toy make_toy(const nclens::ToySpec& spec, std::uint64_t seed = 7) {
    auto a = nclens::build_toy(spec, seed);
    auto m = nclens::toy_model(a);
    auto t = nclens::toy_tokenizer(a);
    return {std::move(a), std::move(m), std::move(t)};
}

inline nclens::ToySpec small_spec(std::size_t layers = 2) {
    nclens::ToySpec s;
    s.n_layers = layers;
    s.d_model = 16;
    s.n_heads = 2;
    s.d_ff = 24;
    s.words = {"ink", "moon"};
    return s;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("nclens-test-" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace fixtures
