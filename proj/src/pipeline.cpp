#include "nclens/pipeline.hpp"

#include "nclens/errors.hpp"
#include "nclens/parallel.hpp"
#include "nclens/rng.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

namespace nclens {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kFormatVersion = 1;

// Typed lookup with a config error instead of a json exception.
template <class T>
T get_or(const json& obj, const char* key, T fallback, const std::string& where) {
    if (!obj.contains(key) || obj[key].is_null()) return fallback;
    try {
        return obj[key].get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + " has the wrong type");
    }
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

std::optional<LayerRange> parse_range(const json& v, const std::string& where) {
    if (v.is_null() || (v.is_string() && (v == "all" || v == "default"))) return std::nullopt;
    if (!v.is_array() || v.size() != 2 || !v[0].is_number_unsigned() || !v[1].is_number_unsigned()) {
        throw ConfigError(where + " must be [first, last] or \"all\"");
    }
    return LayerRange{v[0].get<std::size_t>(), v[1].get<std::size_t>()};
}

json range_json(const std::optional<LayerRange>& r) {
    if (!r) return "default";
    return json::array({r->first, r->last});
}

std::string hex64(std::uint64_t x) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
    return buf;
}

std::string num(double x) {
    if (!std::isfinite(x)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw LoadError("cannot write '" + p.string() + "'");
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw LoadError("failed writing '" + p.string() + "'");
    }
    fs::rename(tmp, p);
}

json interval_json(const Interval& i) { return json::array({i.lo, i.hi}); }

json error_json(const Error& e) { return {{"kind", e.kind()}, {"message", e.what()}}; }

json trace_json(const LayerTrace& lt) {
    return {{"lens_prob", lt.lens_prob}, {"attn_contrib", lt.attn_contrib}, {"ffn_contrib", lt.ffn_contrib}};
}

LayerTrace trace_from_json(const json& j) {
    LayerTrace lt;
    lt.lens_prob = j.at("lens_prob").get<std::vector<double>>();
    lt.attn_contrib = j.at("attn_contrib").get<std::vector<double>>();
    lt.ffn_contrib = j.at("ffn_contrib").get<std::vector<double>>();
    return lt;
}

json span_json(const TokenSpan& s) { return json::array({s.begin, s.end}); }

double mean_of(std::span<const double> xs) {
    CompensatedSum s;
    for (double x : xs) s.add(x);
    return xs.empty() ? std::numeric_limits<double>::quiet_NaN() : s.value() / static_cast<double>(xs.size());
}

// Records of a stage file keyed by prompt id, in dataset order.
std::vector<json> records_in_order(const json& stage, const std::vector<PromptRecord>& dataset,
                                   const std::string& name) {
    std::unordered_map<std::string, json> by_id;
    for (const auto& r : stage.at("records")) by_id[r.at("id").get<std::string>()] = r;
    std::vector<json> out;
    out.reserve(dataset.size());
    for (const auto& rec : dataset) {
        auto it = by_id.find(rec.id);
        if (it == by_id.end()) throw ConsistencyError("stage '" + name + "' has no record for prompt '" + rec.id + "'");
        out.push_back(it->second);
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------- RunConfig

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
    reject_unknown(j,
                   {"model", "tokenizer", "dataset", "sampling", "stop_tokens", "bins", "bootstrap", "attention",
                    "patch", "classify", "output_dir", "seed", "workers"},
                   "config");
    auto path_of = [&](const json& obj, const char* key, const std::string& where) {
        if (!obj.contains(key) || !obj[key].is_string()) throw ConfigError(where + "." + key + " must be a path");
        fs::path p = obj[key].get<std::string>();
        return p.is_absolute() ? p : base_dir / p;
    };
    RunConfig c;
    try {
        if (!j.contains("model")) throw ConfigError("config.model is required");
        reject_unknown(j["model"], {"config", "weights"}, "config.model");
        c.model_config = path_of(j["model"], "config", "model");
        c.model_weights = path_of(j["model"], "weights", "model");

        if (!j.contains("tokenizer")) throw ConfigError("config.tokenizer is required");
        const json& t = j["tokenizer"];
        reject_unknown(t, {"vocab", "merges", "pretokenizer", "special_tokens"}, "config.tokenizer");
        c.vocab = path_of(t, "vocab", "tokenizer");
        c.merges = path_of(t, "merges", "tokenizer");
        const std::string pre = get_or<std::string>(t, "pretokenizer", "gpt2", "tokenizer");
        if (pre == "gpt2") c.tokenizer.pretokenizer = Pretokenizer::gpt2;
        else if (pre == "qwen2") c.tokenizer.pretokenizer = Pretokenizer::qwen2;
        else throw ConfigError("unknown pretokenizer '" + pre + "'");
        c.tokenizer.special_tokens = get_or<std::vector<std::string>>(t, "special_tokens", {}, "tokenizer");

        c.dataset = path_of(j, "dataset", "config");

        if (j.contains("sampling")) {
            const json& s = j["sampling"];
            reject_unknown(s, {"temperature", "top_p", "n_samples", "max_new_tokens"}, "config.sampling");
            c.sampling.temperature = get_or<double>(s, "temperature", c.sampling.temperature, "sampling");
            c.sampling.top_p = get_or<double>(s, "top_p", c.sampling.top_p, "sampling");
            c.sampling.n_samples = get_or<std::size_t>(s, "n_samples", c.sampling.n_samples, "sampling");
            c.sampling.max_new_tokens = get_or<std::size_t>(s, "max_new_tokens", c.sampling.max_new_tokens, "sampling");
        }
        c.stop_tokens = get_or<std::vector<TokenId>>(j, "stop_tokens", {}, "config");
        c.bin_edges = get_or<std::vector<double>>(j, "bins", default_bin_edges(), "config");
        if (j.contains("bootstrap")) {
            const json& b = j["bootstrap"];
            reject_unknown(b, {"n_resamples", "level"}, "config.bootstrap");
            c.bootstrap.n_resamples = get_or<std::size_t>(b, "n_resamples", c.bootstrap.n_resamples, "bootstrap");
            c.bootstrap.level = get_or<double>(b, "level", c.bootstrap.level, "bootstrap");
        }
        if (j.contains("attention")) {
            reject_unknown(j["attention"], {"layers"}, "config.attention");
            c.attention_layers = parse_range(j["attention"].value("layers", json()), "attention.layers");
        }
        if (j.contains("patch")) {
            const json& p = j["patch"];
            reject_unknown(p, {"threshold", "layers", "positions"}, "config.patch");
            c.patch_threshold = get_or<double>(p, "threshold", c.patch_threshold, "patch");
            if (p.contains("layers") && !(p["layers"].is_string() && p["layers"] == "all")) {
                c.patch_layers = get_or<std::vector<std::size_t>>(p, "layers", {}, "patch");
            }
            c.patch_positions = parse_patch_positions(get_or<std::string>(p, "positions", "decision_step", "patch"));
        }
        if (j.contains("classify")) {
            const json& k = j["classify"];
            reject_unknown(k, {"window", "tau", "priming_pi", "override_delta_p", "failure_rate_threshold"},
                           "config.classify");
            c.override_window = parse_range(k.value("window", json()), "classify.window");
            c.classifier.tau = get_or<double>(k, "tau", c.classifier.tau, "classify");
            c.classifier.priming_pi = get_or<double>(k, "priming_pi", c.classifier.priming_pi, "classify");
            c.classifier.override_delta_p =
                get_or<double>(k, "override_delta_p", c.classifier.override_delta_p, "classify");
            c.failure_rate_threshold =
                get_or<double>(k, "failure_rate_threshold", c.failure_rate_threshold, "classify");
        }
        c.output_dir = j.contains("output_dir") ? path_of(j, "output_dir", "config") : base_dir / "out";
        c.seed = get_or<std::uint64_t>(j, "seed", c.seed, "config");
        c.workers = get_or<unsigned>(j, "workers", 0u, "config");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    c.sampling.seed = c.seed;
    c.bootstrap.seed = c.seed;
    c.bootstrap.workers = c.workers;
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse config '" + path.string() + "': " + e.what());
    }
    return from_json(j, path.parent_path());
}

void RunConfig::validate() const {
    for (const auto& [name, p] : std::initializer_list<std::pair<const char*, const fs::path*>>{
             {"model.config", &model_config},
             {"model.weights", &model_weights},
             {"tokenizer.vocab", &vocab},
             {"tokenizer.merges", &merges},
             {"dataset", &dataset}}) {
        if (!fs::is_regular_file(*p)) throw ConfigError(std::string(name) + " path '" + p->string() + "' does not exist");
    }
    try {
        sampling.validate();
        validate_bin_edges(bin_edges);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (!(bootstrap.level > 0.0 && bootstrap.level < 1.0)) throw ConfigError("bootstrap.level must lie in (0, 1)");
    if (bootstrap.n_resamples == 0) throw ConfigError("bootstrap.n_resamples must be positive");
    if (!(failure_rate_threshold > 0.0 && failure_rate_threshold <= 1.0)) {
        throw ConfigError("classify.failure_rate_threshold must lie in (0, 1]");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
}

json RunConfig::settings_json() const {
    json j;
    j["sampling"] = {{"temperature", sampling.temperature},
                     {"top_p", sampling.top_p},
                     {"n_samples", sampling.n_samples},
                     {"max_new_tokens", sampling.max_new_tokens}};
    j["stop_tokens"] = stop_tokens;
    j["bins"] = bin_edges;
    j["bootstrap"] = {{"n_resamples", bootstrap.n_resamples}, {"level", bootstrap.level}};
    j["attention"] = {{"layers", range_json(attention_layers)}};
    j["patch"] = {{"threshold", patch_threshold},
                  {"layers", patch_layers ? json(*patch_layers) : json("all")},
                  {"positions", to_string(patch_positions)}};
    j["classify"] = {{"window", range_json(override_window)},
                     {"tau", classifier.tau},
                     {"priming_pi", classifier.priming_pi},
                     {"override_delta_p", classifier.override_delta_p},
                     {"failure_rate_threshold", failure_rate_threshold}};
    j["seed"] = seed;
    return j;
}

// ---------------------------------------------------------------- stages

std::string to_string(Stage s) {
    switch (s) {
    case Stage::pressure: return "pressure";
    case Stage::sample: return "sample";
    case Stage::lens: return "lens";
    case Stage::attention: return "attention";
    case Stage::patch: return "patch";
    case Stage::fit: return "fit";
    case Stage::classify: return "classify";
    }
    return "pressure";
}

Stage parse_stage(std::string_view s) {
    for (Stage st : kAllStages) {
        if (to_string(st) == s) return st;
    }
    throw ArgumentError("unknown stage '" + std::string(s) + "'");
}

std::vector<Stage> parse_stage_list(std::string_view s) {
    std::set<Stage> chosen;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const std::size_t comma = s.find(',', pos);
        std::string_view item = s.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
        pos = comma == std::string_view::npos ? s.size() + 1 : comma + 1;
        while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
        while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
        if (item.empty()) continue;
        if (item == "all") {
            chosen.insert(std::begin(kAllStages), std::end(kAllStages));
        } else {
            chosen.insert(parse_stage(item));
        }
    }
    if (chosen.empty()) throw ArgumentError("empty stage list");
    return {chosen.begin(), chosen.end()};
}

std::vector<Stage> stage_dependencies(Stage s) {
    switch (s) {
    case Stage::patch: return {Stage::pressure};
    case Stage::fit: return {Stage::pressure, Stage::sample};
    case Stage::classify: return {Stage::pressure, Stage::sample, Stage::lens, Stage::attention};
    default: return {};
    }
}

std::string to_string(Figure f) {
    switch (f) {
    case Figure::violation_curve: return "violation_curve";
    case Figure::suppression_bars: return "suppression_bars";
    case Figure::attention_panels: return "attention_panels";
    case Figure::lens_curves: return "lens_curves";
    case Figure::decomp_bars: return "decomp_bars";
    case Figure::patch_bars: return "patch_bars";
    }
    return "violation_curve";
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------- Pipeline

struct Pipeline::Inputs {
    Model model;
    Tokenizer tok;
    std::vector<PromptRecord> dataset;
};

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)) { config_.validate(); }

Pipeline::~Pipeline() = default;

Pipeline::Inputs& Pipeline::inputs() {
    if (!inputs_) {
        Model m = load_model(config_.model_config, config_.model_weights);
        Tokenizer tok = load_tokenizer(config_.vocab, config_.merges, config_.tokenizer);
        auto ds = load_dataset(config_.dataset);
        if (ds.empty()) throw ArgumentError("dataset '" + config_.dataset.string() + "' has no records");
        inputs_ = std::make_unique<Inputs>(Inputs{std::move(m), std::move(tok), std::move(ds)});
    }
    return *inputs_;
}

std::uint64_t Pipeline::inputs_hash() {
    if (!inputs_hash_) {
        std::uint64_t h = splitmix64(kFormatVersion);
        for (const fs::path* p : {&config_.model_config, &config_.model_weights, &config_.vocab, &config_.merges,
                                  &config_.dataset}) {
            h = splitmix64(h ^ fnv1a64(read_file(*p)));
        }
        h = splitmix64(h ^ static_cast<std::uint64_t>(config_.tokenizer.pretokenizer));
        for (const auto& s : config_.tokenizer.special_tokens) h = splitmix64(h ^ fnv1a64(s));
        inputs_hash_ = h;
    }
    return *inputs_hash_;
}

std::string Pipeline::cache_key(Stage s) {
    const json settings = config_.settings_json();
    json k;
    k["stage"] = to_string(s);
    k["format"] = kFormatVersion;
    k["inputs"] = hex64(inputs_hash());
    switch (s) {
    case Stage::sample:
        k["settings"] = {settings["sampling"], settings["stop_tokens"], settings["seed"]};
        break;
    case Stage::attention: k["settings"] = settings["attention"]; break;
    case Stage::patch: k["settings"] = {settings["patch"], settings["bootstrap"], settings["seed"]}; break;
    case Stage::fit: k["settings"] = {settings["bins"], settings["bootstrap"], settings["seed"]}; break;
    case Stage::classify: k["settings"] = settings["classify"]; break;
    default: k["settings"] = nullptr; break;
    }
    for (Stage d : stage_dependencies(s)) k["upstream"][to_string(d)] = cache_key(d);
    return hex64(fnv1a64(k.dump()));
}

fs::path Pipeline::stage_path(Stage s) const {
    const std::string file = s == Stage::sample ? "samples" : to_string(s);
    return config_.output_dir / (file + ".json");
}

void Pipeline::write_json(const fs::path& p, const json& j) const { write_text(p, dump_json(j)); }

json Pipeline::load_stage(Stage s) {
    const fs::path p = stage_path(s);
    if (!fs::is_regular_file(p)) {
        throw DependencyError("stage '" + to_string(s) + "' has not been run (missing " + p.filename().string() + ")");
    }
    json j;
    try {
        j = json::parse(read_file(p));
    } catch (const json::parse_error&) {
        throw DependencyError("stage '" + to_string(s) + "' output is unreadable; rerun it");
    }
    if (j.value("cache_key", "") != cache_key(s)) {
        throw DependencyError("stage '" + to_string(s) + "' output is stale for this config; rerun it");
    }
    return j;
}

StageStatus Pipeline::run_stage(Stage s) {
    for (Stage d : stage_dependencies(s)) {
        try {
            load_stage(d);
        } catch (const DependencyError& e) {
            throw DependencyError("stage '" + to_string(s) + "' requires stage '" + to_string(d) + "': " + e.what());
        }
    }
    StageStatus st{s, stage_path(s), false};
    const std::string key = cache_key(s);
    if (fs::is_regular_file(st.path)) {
        try {
            if (json::parse(read_file(st.path)).value("cache_key", "") == key) {
                st.cached = true;
                return st;
            }
        } catch (const json::parse_error&) {
        }
    }
    json out = compute(s);
    out["stage"] = to_string(s);
    out["cache_key"] = key;
    write_json(st.path, out);
    return st;
}

std::vector<StageStatus> Pipeline::run(std::span<const Stage> stages) {
    std::set<Stage> ordered(stages.begin(), stages.end());
    std::vector<StageStatus> out;
    for (Stage s : ordered) out.push_back(run_stage(s));
    return out;
}

json Pipeline::compute(Stage s) {
    Inputs& in = inputs();
    const Model& m = in.model;
    const Tokenizer& tok = in.tok;
    const auto& ds = in.dataset;
    const std::size_t L = m.config.n_layers;
    const unsigned workers = config_.workers;
    json out;

    switch (s) {
    case Stage::pressure: {
        std::vector<json> recs(ds.size());
        parallel_for(ds.size(), workers, [&](std::size_t i) {
            const PromptRecord& r = ds[i];
            const SuppressionRecord sup = suppression(m, tok, r);
            const VariantSet pruned = prune_prefix_extensions(variant_set(tok, r.target));
            recs[i] = {{"id", r.id},
                       {"category", to_string(r.category)},
                       {"target", r.target},
                       {"p0", sup.p0},
                       {"p1", sup.p1},
                       {"delta_p", sup.delta_p},
                       {"n_variants", pruned.variants.size()}};
        });
        out["records"] = recs;
        break;
    }
    case Stage::sample: {
        const auto outcomes =
            run_sampling_protocol(m, tok, ds, config_.sampling, StopRule{config_.stop_tokens}, workers);
        std::map<std::string, std::size_t> index;
        json recs = json::array();
        for (const auto& r : ds) {
            index[r.id] = recs.size();
            recs.push_back({{"id", r.id}, {"target", r.target}, {"violations", 0}, {"samples", 0},
                            {"outputs", json::array()}});
        }
        for (const auto& o : outcomes) {
            json& r = recs[index.at(o.prompt_id)];
            r["outputs"].push_back({{"text", o.generated_text}, {"violated", o.violated}});
            r["samples"] = r["samples"].get<std::size_t>() + 1;
            if (o.violated) r["violations"] = r["violations"].get<std::size_t>() + 1;
        }
        for (auto& r : recs) {
            r["rate"] = static_cast<double>(r["violations"].get<std::size_t>()) /
                        static_cast<double>(r["samples"].get<std::size_t>());
        }
        out["records"] = recs;
        break;
    }
    case Stage::lens: {
        std::vector<json> recs(ds.size());
        parallel_for(ds.size(), workers, [&](std::size_t i) {
            const PromptRecord& r = ds[i];
            const TokenSet targets = first_token_set(prune_prefix_extensions(variant_set(tok, r.target)));
            json rec = {{"id", r.id}, {"targets", targets}};
            for (const auto& [name, text] : {std::pair{"baseline", &r.baseline_text}, {"negative", &r.negative_text}}) {
                const auto tokens = condition_tokens(m, tok, *text);
                const ForwardTrace tr = forward(m, tokens, CaptureSpec::decision_step(false, true));
                rec[name] = trace_json(layer_trace(m, tr, targets));
            }
            recs[i] = std::move(rec);
        });
        out["n_layers"] = L;
        out["records"] = recs;
        break;
    }
    case Stage::attention: {
        const LayerRange range = config_.attention_layers.value_or(all_blocks(L));
        if (range.first < 1 || range.last > L || range.first > range.last) {
            throw ConfigError("attention.layers must lie within [1, " + std::to_string(L) + "]");
        }
        std::vector<json> recs(ds.size());
        parallel_for(ds.size(), workers, [&](std::size_t i) {
            const PromptRecord& r = ds[i];
            const std::string rendered = apply_chat_template(m.config, r.negative_text);
            const SpanAnnotation spans = find_spans(tok, rendered, r.target, r.question);
            CaptureSpec spec = CaptureSpec::decision_step(true, false);
            spec.residuals = false;
            const ForwardTrace tr = forward(m, tok.encode(rendered), spec);
            const AttentionMetrics am = attention_metrics(tr, spans, range);
            recs[i] = {{"id", r.id},
                       {"spans",
                        {{"instruction", span_json(spans.instruction)},
                         {"question", span_json(spans.question)},
                         {"negation", span_json(spans.negation)},
                         {"target_mention", span_json(spans.target_mention)}}},
                       {"iar", am.iar},
                       {"nf", am.nf},
                       {"tmf", am.tmf},
                       {"pi", am.pi}};
        });
        out["layers"] = json::array({range.first, range.last});
        out["records"] = recs;
        break;
    }
    case Stage::patch: {
        const auto pressure = records_in_order(load_stage(Stage::pressure), ds, "pressure");
        std::vector<double> p0;
        for (const auto& r : pressure) p0.push_back(r.at("p0").get<double>());
        const std::vector<std::size_t> layers = config_.patch_layers.value_or(all_residual_layers(L));
        for (std::size_t l : layers) {
            if (l > L) throw ConfigError("patch layer " + std::to_string(l) + " outside [0, " + std::to_string(L) + "]");
        }
        out["threshold"] = config_.patch_threshold;
        out["positions"] = to_string(config_.patch_positions);
        out["layers"] = layers;
        BootstrapParams bp = config_.bootstrap;
        bp.seed = splitmix64(config_.seed ^ 0x7A7C4ULL);
        try {
            const PatchCurve c = patch_sweep(m, tok, ds, p0, config_.patch_threshold, layers,
                                             config_.patch_positions, bp, workers);
            out["n_prompts"] = c.prompt_ids.size();
            out["prompt_ids"] = c.prompt_ids;
            out["mean"] = c.mean;
            json cis = json::array();
            for (const auto& ci : c.ci) cis.push_back(interval_json(ci));
            out["ci"] = cis;
            out["crossover_layer"] = c.crossover_layer ? json(*c.crossover_layer) : json(nullptr);
            json rs = json::array();
            for (const auto& r : c.results) {
                rs.push_back({{"id", r.prompt_id},
                              {"layer", r.layer},
                              {"p_original", r.p_original},
                              {"p_patched", r.p_patched},
                              {"delta_p_patch", r.delta_p_patch}});
            }
            out["results"] = rs;
        } catch (const ArgumentError& e) {
            out["n_prompts"] = 0;
            out["error"] = error_json(e);
        }
        break;
    }
    case Stage::fit: {
        const auto pressure = records_in_order(load_stage(Stage::pressure), ds, "pressure");
        const auto samples = records_in_order(load_stage(Stage::sample), ds, "sample");
        std::vector<PromptOutcome> outcomes;
        std::vector<GroupedObservation> obs;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            PromptOutcome o;
            o.prompt_id = ds[i].id;
            o.p0 = pressure[i].at("p0").get<double>();
            o.violations = samples[i].at("violations").get<std::size_t>();
            o.samples = samples[i].at("samples").get<std::size_t>();
            outcomes.push_back(o);
            obs.push_back({o.p0, o.violations, o.samples});
        }
        LogisticOptions opt;
        opt.bin_edges = config_.bin_edges;
        opt.bootstrap = config_.bootstrap;
        opt.bootstrap.seed = splitmix64(config_.seed ^ 0xF17ULL);
        try {
            const LogisticFit f = fit_logistic(std::span<const GroupedObservation>(obs), opt);
            out["fit"] = {{"beta0", f.beta0},
                          {"beta1", f.beta1},
                          {"ci_beta0", interval_json(f.ci_beta0)},
                          {"ci_beta1", interval_json(f.ci_beta1)},
                          {"r2_binned", f.r2_binned},
                          {"n", f.n},
                          {"n_prompts", obs.size()},
                          {"iterations", f.iterations},
                          {"converged", f.converged},
                          {"log_likelihood", f.log_likelihood},
                          {"failed_resamples", f.failed_resamples}};
        } catch (const Error& e) {
            out["fit"] = {{"error", error_json(e)}};
        }
        BootstrapParams bp = config_.bootstrap;
        bp.seed = splitmix64(config_.seed ^ 0xB1AULL);
        const BinnedRates br = bin_by_pressure(outcomes, config_.bin_edges, bp);
        json bins = json::array();
        for (const auto& b : br.bins) {
            bins.push_back({{"lo", b.lo},
                            {"hi", b.hi},
                            {"n", b.n},
                            {"samples", b.samples},
                            {"violations", b.violations},
                            {"rate", b.rate ? json(*b.rate) : json(nullptr)},
                            {"ci", b.rate ? interval_json(b.ci) : json(nullptr)}});
        }
        out["bins"] = bins;
        break;
    }
    case Stage::classify: {
        const auto pressure = records_in_order(load_stage(Stage::pressure), ds, "pressure");
        const auto samples = records_in_order(load_stage(Stage::sample), ds, "sample");
        const auto lens = records_in_order(load_stage(Stage::lens), ds, "lens");
        const auto attention = records_in_order(load_stage(Stage::attention), ds, "attention");
        const LayerRange window = config_.override_window.value_or(default_override_window(L));
        if (window.first < 1 || window.last > L || window.first > window.last) {
            throw ConfigError("classify.window must lie within [1, " + std::to_string(L) + "]");
        }
        std::map<std::string, std::size_t> counts{
            {"success", 0}, {"priming", 0}, {"override", 0}, {"unclassified", 0}};
        json recs = json::array();
        for (std::size_t i = 0; i < ds.size(); ++i) {
            SuppressionRecord sup;
            sup.prompt_id = ds[i].id;
            sup.p0 = pressure[i].at("p0").get<double>();
            sup.p1 = pressure[i].at("p1").get<double>();
            sup.delta_p = pressure[i].at("delta_p").get<double>();
            AttentionMetrics am;
            am.iar = attention[i].at("iar").get<double>();
            am.nf = attention[i].at("nf").get<double>();
            am.tmf = attention[i].at("tmf").get<double>();
            am.pi = attention[i].at("pi").get<double>();
            const LayerTrace lt = trace_from_json(lens[i].at("negative"));
            const double rate = samples[i].at("rate").get<double>();
            const bool violated = is_failure(rate, config_.failure_rate_threshold);
            const FailureLabel fl = classify_failure(violated, sup, am, lt, window, config_.classifier);
            ++counts[to_string(fl.label)];
            recs.push_back({{"id", ds[i].id},
                            {"violation_rate", rate},
                            {"violated", violated},
                            {"label", to_string(fl.label)},
                            {"evidence",
                             {{"pi", fl.evidence.pi},
                              {"delta_p", fl.evidence.delta_p},
                              {"ffn_window_sum", fl.evidence.ffn_window_sum}}}});
        }
        out["window"] = json::array({window.first, window.last});
        out["tau"] = config_.classifier.tau;
        out["failure_rate_threshold"] = config_.failure_rate_threshold;
        out["counts"] = counts;
        out["records"] = recs;
        break;
    }
    }
    return out;
}

// ---------------------------------------------------------------- report

namespace {

struct Joined {
    std::vector<PromptRecord> dataset;
    std::vector<json> pressure, samples, lens, attention, classify;
    json fit, patch;
    std::vector<bool> failure;
};

const char* outcome_name(bool failure) { return failure ? "failure" : "success"; }

} // namespace

std::filesystem::path Pipeline::emit_figure(Figure f) {
    const auto& ds = inputs().dataset;
    auto outcomes = [&]() {
        const auto samples = records_in_order(load_stage(Stage::sample), ds, "sample");
        std::vector<bool> fail;
        for (const auto& s : samples) fail.push_back(is_failure(s.at("rate").get<double>(), config_.failure_rate_threshold));
        return fail;
    };
    std::ostringstream csv;
    auto with_dep = [&](Stage s) {
        try {
            return load_stage(s);
        } catch (const DependencyError& e) {
            throw DependencyError("figure '" + to_string(f) + "' requires stage '" + to_string(s) + "': " + e.what());
        }
    };

    switch (f) {
    case Figure::violation_curve: {
        const json fit = with_dep(Stage::fit);
        csv << "bin_lo,bin_hi,rate,ci_lo,ci_hi,n\n";
        for (const auto& b : fit.at("bins")) {
            const bool defined = !b.at("rate").is_null();
            csv << num(b.at("lo").get<double>()) << ',' << num(b.at("hi").get<double>()) << ','
                << (defined ? num(b.at("rate").get<double>()) : "") << ','
                << (defined ? num(b.at("ci")[0].get<double>()) : "") << ','
                << (defined ? num(b.at("ci")[1].get<double>()) : "") << ',' << b.at("n").get<std::size_t>() << '\n';
        }
        break;
    }
    case Figure::suppression_bars: {
        const auto pressure = records_in_order(with_dep(Stage::pressure), ds, "pressure");
        with_dep(Stage::sample);
        const auto fail = outcomes();
        csv << "outcome,n,mean_p0,mean_p1,mean_delta_p,ci_lo,ci_hi\n";
        for (bool group : {false, true}) {
            std::vector<double> p0, p1, dp;
            for (std::size_t i = 0; i < ds.size(); ++i) {
                if (fail[i] != group) continue;
                p0.push_back(pressure[i].at("p0").get<double>());
                p1.push_back(pressure[i].at("p1").get<double>());
                dp.push_back(pressure[i].at("delta_p").get<double>());
            }
            BootstrapParams bp = config_.bootstrap;
            bp.seed = splitmix64(config_.seed ^ (0x5B9ULL + group));
            const Interval ci = bootstrap_ci(std::span<const double>(dp), mean_of, bp);
            csv << outcome_name(group) << ',' << dp.size() << ',' << num(mean_of(p0)) << ',' << num(mean_of(p1)) << ','
                << num(mean_of(dp)) << ',' << num(ci.lo) << ',' << num(ci.hi) << '\n';
        }
        break;
    }
    case Figure::attention_panels: {
        const auto att = records_in_order(with_dep(Stage::attention), ds, "attention");
        const auto cls = records_in_order(with_dep(Stage::classify), ds, "classify");
        csv << "id,outcome,label,iar,nf,tmf,pi\n";
        for (std::size_t i = 0; i < ds.size(); ++i) {
            csv << ds[i].id << ',' << outcome_name(cls[i].at("violated").get<bool>()) << ','
                << cls[i].at("label").get<std::string>() << ',' << num(att[i].at("iar").get<double>()) << ','
                << num(att[i].at("nf").get<double>()) << ',' << num(att[i].at("tmf").get<double>()) << ','
                << num(att[i].at("pi").get<double>()) << '\n';
        }
        break;
    }
    case Figure::lens_curves:
    case Figure::decomp_bars: {
        const json lens_stage = with_dep(Stage::lens);
        const auto lens = records_in_order(lens_stage, ds, "lens");
        with_dep(Stage::sample);
        const auto fail = outcomes();
        const std::size_t L = lens_stage.at("n_layers").get<std::size_t>();
        if (f == Figure::lens_curves) {
            csv << "layer,condition,outcome,lens_prob,n\n";
        } else {
            csv << "layer,outcome,attn_contrib,ffn_contrib,n\n";
        }
        for (std::size_t l = 0; l <= L; ++l) {
            for (const char* cond : {"baseline", "negative"}) {
                if (f == Figure::decomp_bars && (l == 0 || std::string(cond) == "baseline")) continue;
                for (bool group : {false, true}) {
                    std::vector<double> lp, ac, fc;
                    for (std::size_t i = 0; i < ds.size(); ++i) {
                        if (fail[i] != group) continue;
                        const json& t = lens[i].at(cond);
                        lp.push_back(t.at("lens_prob")[l].get<double>());
                        ac.push_back(t.at("attn_contrib")[l].get<double>());
                        fc.push_back(t.at("ffn_contrib")[l].get<double>());
                    }
                    if (lp.empty()) continue;
                    if (f == Figure::lens_curves) {
                        csv << l << ',' << cond << ',' << outcome_name(group) << ',' << num(mean_of(lp)) << ','
                            << lp.size() << '\n';
                    } else {
                        csv << l << ',' << outcome_name(group) << ',' << num(mean_of(ac)) << ',' << num(mean_of(fc))
                            << ',' << ac.size() << '\n';
                    }
                }
            }
        }
        break;
    }
    case Figure::patch_bars: {
        const json patch = with_dep(Stage::patch);
        csv << "layer,mean_delta_p,ci_lo,ci_hi,n\n";
        const auto layers = patch.at("layers").get<std::vector<std::size_t>>();
        const bool ok = !patch.contains("error");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            csv << layers[i] << ',' << (ok ? num(patch.at("mean")[i].get<double>()) : "") << ','
                << (ok ? num(patch.at("ci")[i][0].get<double>()) : "") << ','
                << (ok ? num(patch.at("ci")[i][1].get<double>()) : "") << ','
                << patch.at("n_prompts").get<std::size_t>() << '\n';
        }
        break;
    }
    }
    const fs::path p = config_.output_dir / "figures" / (to_string(f) + ".csv");
    write_text(p, csv.str());
    return p;
}

std::vector<fs::path> Pipeline::report() {
    json stages;
    for (Stage s : kAllStages) {
        try {
            stages[to_string(s)] = load_stage(s);
        } catch (const DependencyError& e) {
            throw DependencyError("report requires stage '" + to_string(s) + "': " + e.what());
        }
    }
    const auto& ds = inputs().dataset;
    const std::size_t L = inputs().model.config.n_layers;
    const auto pressure = records_in_order(stages["pressure"], ds, "pressure");
    const auto samples = records_in_order(stages["sample"], ds, "sample");
    const auto lens = records_in_order(stages["lens"], ds, "lens");
    const auto attention = records_in_order(stages["attention"], ds, "attention");
    const auto cls = records_in_order(stages["classify"], ds, "classify");
    const json& patch = stages["patch"];

    std::map<std::string, std::map<std::size_t, double>> patch_by_prompt;
    if (patch.contains("results")) {
        for (const auto& r : patch["results"]) {
            patch_by_prompt[r.at("id").get<std::string>()][r.at("layer").get<std::size_t>()] =
                r.at("delta_p_patch").get<double>();
        }
    }

    // Joined per-prompt records with cross-module consistency checks.
    json records = json::array();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double p0 = pressure[i].at("p0").get<double>();
        const double p1 = pressure[i].at("p1").get<double>();
        const double dp = pressure[i].at("delta_p").get<double>();
        if (std::abs(dp - (p0 - p1)) > 1e-12) {
            throw ConsistencyError("prompt '" + ds[i].id + "': delta_p != p0 - p1");
        }
        const double tmf = attention[i].at("tmf").get<double>();
        const double nf = attention[i].at("nf").get<double>();
        const double pi = attention[i].at("pi").get<double>();
        if (std::abs(pi - (tmf - nf)) > 1e-12) throw ConsistencyError("prompt '" + ds[i].id + "': pi != tmf - nf");
        json rec = {{"id", ds[i].id},
                    {"category", to_string(ds[i].category)},
                    {"target", ds[i].target},
                    {"p0", p0},
                    {"p1", p1},
                    {"delta_p", dp},
                    {"violation_rate", samples[i].at("rate")},
                    {"attention",
                     {{"iar", attention[i].at("iar")}, {"nf", nf}, {"tmf", tmf}, {"pi", pi}}},
                    {"layer_trace", lens[i].at("negative")},
                    {"label", cls[i].at("label")}};
        const auto it = patch_by_prompt.find(ds[i].id);
        if (it != patch_by_prompt.end()) {
            json curve = json::array();
            for (const auto& [layer, d] : it->second) curve.push_back({{"layer", layer}, {"delta_p_patch", d}});
            rec["patch_curve"] = curve;
        }
        records.push_back(std::move(rec));
    }

    json suppression;
    for (bool group : {false, true}) {
        std::vector<double> p0, p1, dp;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (cls[i].at("violated").get<bool>() != group) continue;
            p0.push_back(pressure[i].at("p0").get<double>());
            p1.push_back(pressure[i].at("p1").get<double>());
            dp.push_back(pressure[i].at("delta_p").get<double>());
        }
        BootstrapParams bp = config_.bootstrap;
        bp.seed = splitmix64(config_.seed ^ (0x5B9ULL + group));
        const Interval ci = bootstrap_ci(std::span<const double>(dp), mean_of, bp);
        suppression[outcome_name(group)] = {{"n", dp.size()},
                                            {"mean_p0", mean_of(p0)},
                                            {"mean_p1", mean_of(p1)},
                                            {"mean_delta_p", mean_of(dp)},
                                            {"ci_delta_p", interval_json(ci)}};
    }

    json patching;
    if (patch.contains("error")) {
        patching = {{"error", patch["error"]}, {"layers", patch["layers"]}, {"n_prompts", 0}};
    } else {
        patching = {{"layers", patch["layers"]},
                    {"mean", patch["mean"]},
                    {"ci", patch["ci"]},
                    {"crossover_layer", patch["crossover_layer"]},
                    {"n_prompts", patch["n_prompts"]},
                    {"threshold", patch["threshold"]},
                    {"positions", patch["positions"]}};
    }

    const json& counts = stages["classify"]["counts"];
    const std::size_t n_fail = counts.at("priming").get<std::size_t>() + counts.at("override").get<std::size_t>() +
                               counts.at("unclassified").get<std::size_t>();
    json fractions;
    for (const char* k : {"priming", "override", "unclassified"}) {
        fractions[k] = n_fail == 0 ? json(nullptr)
                                   : json(static_cast<double>(counts.at(k).get<std::size_t>()) /
                                          static_cast<double>(n_fail));
    }

    json stage_keys;
    for (Stage s : kAllStages) stage_keys[to_string(s)] = stages[to_string(s)]["cache_key"];

    json summary;
    summary["fit"] = stages["fit"]["fit"];
    summary["bins"] = stages["fit"]["bins"];
    summary["suppression"] = suppression;
    summary["patching"] = patching;
    summary["taxonomy"] = {{"counts", counts},
                           {"n_failures", n_fail},
                           {"fractions", fractions},
                           {"window", stages["classify"]["window"]},
                           {"tau", stages["classify"]["tau"]}};
    summary["meta"] = {{"n_prompts", ds.size()},
                       {"n_layers", L},
                       {"seed", config_.seed},
                       {"settings", config_.settings_json()},
                       {"stage_keys", stage_keys},
                       {"format", kFormatVersion}};

    std::vector<fs::path> written;
    written.push_back(config_.output_dir / "summary.json");
    write_json(written.back(), summary);
    written.push_back(config_.output_dir / "analysis.json");
    write_json(written.back(), {{"records", records}});
    for (Figure f : kAllFigures) written.push_back(emit_figure(f));
    return written;
}

} // namespace nclens
