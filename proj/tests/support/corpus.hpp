#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace corpus {

struct Case {
    std::string text;
    std::string target;
    bool violated = false;
};

inline std::vector<Case> load_detection_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<Case> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto a = line.find('\t'), b = line.find('\t', a + 1);
        if (a == std::string::npos || b == std::string::npos) throw std::runtime_error("bad corpus line: " + line);
        out.push_back({line.substr(0, a), line.substr(a + 1, b - a - 1), line.substr(b + 1) == "1"});
    }
    return out;
}

} // namespace corpus
