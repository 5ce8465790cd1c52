#include "nclens/behavior.hpp"

#include "nclens/errors.hpp"
#include "nclens/parallel.hpp"
#include "nclens/rng.hpp"

#include <json.hpp>

#include <cctype>
#include <map>
#include <sstream>
#include <unordered_map>

namespace nclens {

namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0 || c == '_'; }

char lower(unsigned char c) { return static_cast<char>(std::tolower(c)); }

} // namespace

bool detect_violation(std::string_view text, std::string_view target) {
    if (target.empty() || target.size() > text.size()) return false;
    for (std::size_t i = 0; i + target.size() <= text.size(); ++i) {
        bool match = true;
        for (std::size_t j = 0; j < target.size() && match; ++j) {
            match = lower(static_cast<unsigned char>(text[i + j])) == lower(static_cast<unsigned char>(target[j]));
        }
        if (!match) continue;
        const bool left = i == 0 || !is_word_char(static_cast<unsigned char>(text[i - 1]));
        const std::size_t end = i + target.size();
        const bool right = end == text.size() || !is_word_char(static_cast<unsigned char>(text[end]));
        if (left && right) return true;
    }
    return false;
}

std::vector<PromptRecord> parse_dataset_jsonl(std::string_view text) {
    std::vector<PromptRecord> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        const std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("dataset line " + std::to_string(line_no) + ": " + e.what());
        }
        auto field = [&](const char* key) -> std::string {
            if (!j.contains(key) || !j[key].is_string()) {
                throw ParseError("dataset line " + std::to_string(line_no) + ": missing string field '" + key + "'");
            }
            return j[key].get<std::string>();
        };
        std::map<std::string, std::string> metadata;
        if (j.contains("metadata")) {
            if (!j["metadata"].is_object()) {
                throw ParseError("dataset line " + std::to_string(line_no) + ": metadata must be an object");
            }
            for (auto it = j["metadata"].begin(); it != j["metadata"].end(); ++it) {
                metadata[it.key()] = it.value().is_string() ? it.value().get<std::string>() : it.value().dump();
            }
        }
        out.push_back(PromptRecord::make(field("id"), parse_category(field("category")), field("question"),
                                         field("target"), std::move(metadata)));
    }
    std::unordered_map<std::string, std::size_t> seen;
    for (const auto& r : out) {
        if (++seen[r.id] > 1) throw ParseError("duplicate prompt id '" + r.id + "'");
    }
    return out;
}

std::vector<PromptRecord> load_dataset(const std::filesystem::path& path) {
    return parse_dataset_jsonl(read_file(path));
}

std::string dataset_to_jsonl(std::span<const PromptRecord> records) {
    std::string out;
    for (const auto& r : records) {
        nlohmann::ordered_json j;
        j["id"] = r.id;
        j["category"] = to_string(r.category);
        j["question"] = r.question;
        j["target"] = r.target;
        j["metadata"] = nlohmann::ordered_json::object();
        for (const auto& [k, v] : r.metadata) j["metadata"][k] = v;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<SampleOutcome> run_sampling_protocol(const Model& m, const Tokenizer& tok,
                                                 std::span<const PromptRecord> dataset,
                                                 const SamplingParams& params, const StopRule& stop,
                                                 unsigned workers) {
    if (dataset.empty()) throw ArgumentError("sampling protocol needs a non-empty dataset");
    params.validate();
    std::vector<std::vector<SampleOutcome>> per_prompt(dataset.size());
    parallel_for(dataset.size(), workers, [&](std::size_t i) {
        const PromptRecord& rec = dataset[i];
        const std::vector<TokenId> prompt = condition_tokens(m, tok, rec.negative_text);
        const auto samples = sample(m, prompt, params, stop, fnv1a64(rec.id));
        auto& slot = per_prompt[i];
        for (std::size_t s = 0; s < samples.size(); ++s) {
            SampleOutcome o;
            o.prompt_id = rec.id;
            o.sample_index = s;
            o.generated_text = tok.decode(samples[s]);
            o.violated = detect_violation(o.generated_text, rec.target);
            slot.push_back(std::move(o));
        }
    });
    std::vector<SampleOutcome> out;
    out.reserve(dataset.size() * params.n_samples);
    for (auto& v : per_prompt) {
        for (auto& o : v) out.push_back(std::move(o));
    }
    return out;
}

std::vector<PromptOutcome> aggregate_outcomes(std::span<const PromptRecord> dataset,
                                              std::span<const SampleOutcome> outcomes,
                                              std::span<const double> p0) {
    if (p0.size() != dataset.size()) throw ShapeError("one P0 value per prompt required");
    std::unordered_map<std::string, std::size_t> index;
    std::vector<PromptOutcome> out(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        index[dataset[i].id] = i;
        out[i].prompt_id = dataset[i].id;
        out[i].p0 = p0[i];
    }
    for (const auto& o : outcomes) {
        const auto it = index.find(o.prompt_id);
        if (it == index.end()) throw ConsistencyError("sample outcome for unknown prompt '" + o.prompt_id + "'");
        ++out[it->second].samples;
        if (o.violated) ++out[it->second].violations;
    }
    return out;
}

BinnedRates bin_by_pressure(std::span<const PromptOutcome> records, std::span<const double> edges,
                            const BootstrapParams& bootstrap) {
    validate_bin_edges(edges);
    BinnedRates out;
    out.edges.assign(edges.begin(), edges.end());
    std::vector<std::vector<PromptOutcome>> members(edges.size() - 1);
    for (const auto& r : records) members[bin_index(r.p0, edges)].push_back(r);

    auto pooled_rate = [](std::span<const PromptOutcome> rs) {
        std::size_t v = 0, s = 0;
        for (const auto& r : rs) {
            v += r.violations;
            s += r.samples;
        }
        return s == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(v) / static_cast<double>(s);
    };

    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
        BinStat st;
        st.lo = edges[b];
        st.hi = edges[b + 1];
        st.n = members[b].size();
        for (const auto& r : members[b]) {
            st.samples += r.samples;
            st.violations += r.violations;
        }
        if (st.samples > 0) {
            st.rate = static_cast<double>(st.violations) / static_cast<double>(st.samples);
            BootstrapParams bp = bootstrap;
            bp.seed = splitmix64(bootstrap.seed ^ (0x5EEDB1A5ULL + b));
            st.ci = bootstrap_ci(std::span<const PromptOutcome>(members[b]), pooled_rate, bp);
        } else {
            st.ci = {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
        }
        out.bins.push_back(st);
    }
    return out;
}

} // namespace nclens
