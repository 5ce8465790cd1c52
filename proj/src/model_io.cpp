#include "nclens/model_io.hpp"

#include "nclens/errors.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace nclens {

namespace {

using nlohmann::json;

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

std::uint64_t read_le64(std::string_view bytes) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[i]);
    return v;
}

double half_to_double(std::uint16_t h) {
    const int sign = (h >> 15) & 1;
    const int exp = (h >> 10) & 0x1F;
    const int mant = h & 0x3FF;
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(mant), -24);
    } else if (exp == 31) {
        v = mant == 0 ? INFINITY : NAN;
    } else {
        v = std::ldexp(static_cast<double>(mant | 0x400), exp - 25);
    }
    return sign ? -v : v;
}

float read_f32(const unsigned char* p) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) |
                         (static_cast<std::uint32_t>(p[3]) << 24);
    return std::bit_cast<float>(bits);
}

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F32") return 4;
    if (dtype == "F16" || dtype == "BF16") return 2;
    throw LoadError("unsupported tensor dtype '" + dtype + "'");
}

NormKind parse_norm(const std::string& s) {
    if (s == "rms") return NormKind::rms;
    if (s == "layernorm") return NormKind::layernorm;
    throw ConfigError("norm_kind must be 'rms' or 'layernorm', got '" + s + "'");
}

PositionKind parse_position(const std::string& s) {
    if (s == "rotary") return PositionKind::rotary;
    if (s == "learned") return PositionKind::learned;
    throw ConfigError("position_kind must be 'rotary' or 'learned', got '" + s + "'");
}

FfnKind parse_ffn(const std::string& s) {
    if (s == "swiglu") return FfnKind::swiglu;
    if (s == "gelu") return FfnKind::gelu;
    throw ConfigError("ffn_kind must be 'swiglu' or 'gelu', got '" + s + "'");
}

template <class T>
T required(const json& j, const char* key) {
    if (!j.contains(key)) throw ConfigError(std::string("model config missing field '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config field '") + key + "': " + e.what());
    }
}

template <class T>
T optional_field(const json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config field '") + key + "': " + e.what());
    }
}

class TensorTaker {
public:
    explicit TensorTaker(TensorArchive& archive) : archive_(archive) {}

    Vector vector(const std::string& name, std::size_t dim) {
        ArchiveTensor& t = take(name, {dim});
        return std::move(t.values);
    }

    Matrix matrix(const std::string& name, std::size_t rows, std::size_t cols) {
        ArchiveTensor& t = take(name, {rows, cols});
        return Matrix(rows, cols, std::move(t.values));
    }

    bool has(const std::string& name) const { return archive_.tensors.count(name) > 0; }

    std::vector<std::string> leftovers() const {
        std::vector<std::string> out;
        for (const auto& [name, _] : archive_.tensors) {
            if (!used_.count(name)) out.push_back(name);
        }
        return out;
    }

private:
    ArchiveTensor& take(const std::string& name, const std::vector<std::size_t>& shape) {
        auto it = archive_.tensors.find(name);
        if (it == archive_.tensors.end()) throw LoadError("missing tensor '" + name + "'");
        if (it->second.shape != shape) {
            throw ShapeError("tensor '" + name + "': expected shape " + shape_str(shape) +
                             ", got " + shape_str(it->second.shape));
        }
        used_.insert(name);
        return it->second;
    }

    TensorArchive& archive_;
    std::set<std::string> used_;
};

} // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (n_heads == 0 || head_dim == 0) throw ConfigError("n_heads and head_dim must be positive");
    if (n_heads * head_dim != d_model) {
        std::ostringstream msg;
        msg << "n_heads*head_dim (" << n_heads * head_dim << ") != d_model (" << d_model << ")";
        throw ConfigError(msg.str());
    }
    if (n_kv_heads == 0 || n_heads % n_kv_heads != 0) {
        throw ConfigError("n_kv_heads must divide n_heads");
    }
    if (position_kind == PositionKind::rotary && head_dim % 2 != 0) {
        throw ConfigError("rotary positions need an even head_dim");
    }
    if (position_kind == PositionKind::learned && max_positions == 0) {
        throw ConfigError("learned positions need max_positions > 0");
    }
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (!(norm_eps >= 0.0)) throw ConfigError("norm_eps must be non-negative");
    if (!chat_template.empty()) {
        const auto first = chat_template.find(kChatPlaceholder);
        if (first == std::string::npos ||
            chat_template.find(kChatPlaceholder, first + 1) != std::string::npos) {
            throw ConfigError("chat_template must contain exactly one {{user}} placeholder");
        }
    }
    if (eos_token_id && *eos_token_id >= vocab_size) {
        throw ConfigError("eos_token_id out of vocabulary range");
    }
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.n_layers = required<std::size_t>(j, "n_layers");
    c.d_model = required<std::size_t>(j, "d_model");
    c.n_heads = required<std::size_t>(j, "n_heads");
    c.head_dim = required<std::size_t>(j, "head_dim");
    c.d_ff = required<std::size_t>(j, "d_ff");
    c.vocab_size = required<std::size_t>(j, "vocab_size");
    c.n_kv_heads = optional_field<std::size_t>(j, "n_kv_heads", c.n_heads);
    c.norm_kind = parse_norm(optional_field<std::string>(j, "norm_kind", "rms"));
    c.norm_eps = optional_field<double>(j, "norm_eps", 1e-6);
    c.position_kind = parse_position(optional_field<std::string>(j, "position_kind", "rotary"));
    c.rope_theta = optional_field<double>(j, "rope_theta", 10000.0);
    c.max_positions = optional_field<std::size_t>(j, "max_positions", 0);
    c.ffn_kind = parse_ffn(optional_field<std::string>(j, "ffn_kind", "swiglu"));
    c.attn_bias = optional_field<bool>(j, "attn_bias", false);
    c.tie_embeddings = optional_field<bool>(j, "tie_embeddings", false);
    c.chat_template = optional_field<std::string>(j, "chat_template", "");
    if (j.contains("eos_token_id") && !j.at("eos_token_id").is_null()) {
        c.eos_token_id = j.at("eos_token_id").get<TokenId>();
    }
    c.validate();
    return c;
}

json ModelConfig::to_json() const {
    json j;
    j["n_layers"] = n_layers;
    j["d_model"] = d_model;
    j["n_heads"] = n_heads;
    j["n_kv_heads"] = n_kv_heads;
    j["head_dim"] = head_dim;
    j["d_ff"] = d_ff;
    j["vocab_size"] = vocab_size;
    j["norm_kind"] = norm_kind == NormKind::rms ? "rms" : "layernorm";
    j["norm_eps"] = norm_eps;
    j["position_kind"] = position_kind == PositionKind::rotary ? "rotary" : "learned";
    j["rope_theta"] = rope_theta;
    j["max_positions"] = max_positions;
    j["ffn_kind"] = ffn_kind == FfnKind::swiglu ? "swiglu" : "gelu";
    j["attn_bias"] = attn_bias;
    j["tie_embeddings"] = tie_embeddings;
    if (!chat_template.empty()) j["chat_template"] = chat_template;
    if (eos_token_id) j["eos_token_id"] = *eos_token_id;
    return j;
}

std::string apply_chat_template(const ModelConfig& config, std::string_view user_text) {
    if (config.chat_template.empty()) return std::string(user_text);
    std::string out = config.chat_template;
    out.replace(out.find(kChatPlaceholder), kChatPlaceholder.size(), user_text);
    return out;
}

TensorArchive parse_tensor_archive(std::string_view bytes) {
    if (bytes.size() < 8) throw LoadError("tensor archive shorter than its 8-byte header length");
    const std::uint64_t header_len = read_le64(bytes);
    if (header_len > bytes.size() - 8) throw LoadError("tensor archive header length exceeds file size");
    json header;
    try {
        header = json::parse(bytes.substr(8, header_len));
    } catch (const json::exception& e) {
        throw ParseError(std::string("tensor archive header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw ParseError("tensor archive header must be a JSON object");
    const std::string_view buffer = bytes.substr(8 + header_len);

    TensorArchive archive;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            archive.metadata = entry;
            continue;
        }
        ArchiveTensor t;
        std::vector<std::uint64_t> offsets;
        try {
            t.dtype = entry.at("dtype").get<std::string>();
            t.shape = entry.at("shape").get<std::vector<std::size_t>>();
            offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
        } catch (const json::exception& e) {
            throw ParseError("tensor '" + name + "' header entry malformed: " + e.what());
        }
        if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > buffer.size()) {
            throw LoadError("tensor '" + name + "' has invalid data_offsets");
        }
        std::size_t count = 1;
        for (std::size_t d : t.shape) count *= d;
        const std::size_t width = dtype_size(t.dtype);
        if (offsets[1] - offsets[0] != count * width) {
            throw ShapeError("tensor '" + name + "' byte length does not match shape " +
                             shape_str(t.shape));
        }
        const auto* p = reinterpret_cast<const unsigned char*>(buffer.data() + offsets[0]);
        t.values.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            const unsigned char* q = p + i * width;
            if (t.dtype == "F32") {
                t.values[i] = read_f32(q);
            } else if (t.dtype == "F16") {
                t.values[i] = half_to_double(static_cast<std::uint16_t>(q[0] | (q[1] << 8)));
            } else {
                const std::uint32_t bits = (static_cast<std::uint32_t>(q[0]) << 16) |
                                           (static_cast<std::uint32_t>(q[1]) << 24);
                t.values[i] = std::bit_cast<float>(bits);
            }
        }
        archive.tensors.emplace(name, std::move(t));
    }
    return archive;
}

std::string serialize_tensor_archive(const std::map<std::string, ArchiveTensor>& tensors,
                                     const json& metadata) {
    json header = json::object();
    std::string buffer;
    for (const auto& [name, t] : tensors) {
        std::size_t count = 1;
        for (std::size_t d : t.shape) count *= d;
        if (count != t.values.size()) {
            throw ShapeError("tensor '" + name + "' values do not match shape " + shape_str(t.shape));
        }
        const std::size_t begin = buffer.size();
        for (double v : t.values) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            for (int b = 0; b < 4; ++b) buffer.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
        }
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {begin, buffer.size()}}};
    }
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');
    std::string out;
    const std::uint64_t n = text.size();
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((n >> (8 * b)) & 0xFF));
    out += text;
    out += buffer;
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> expected_tensor_names(const ModelConfig& c) {
    std::vector<std::string> names{"embedding", "final_norm"};
    if (c.position_kind == PositionKind::learned) names.push_back("position_embedding");
    if (!c.tie_embeddings) names.push_back("unembedding");
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        for (const char* s : {"attn_norm", "attn.q", "attn.k", "attn.v", "attn.o", "ffn_norm",
                              "ffn.up", "ffn.down"}) {
            names.push_back(p + s);
        }
        if (c.ffn_kind == FfnKind::swiglu) names.push_back(p + "ffn.gate");
        if (c.attn_bias) {
            for (const char* s : {"attn.q_bias", "attn.k_bias", "attn.v_bias"}) names.push_back(p + s);
        }
    }
    return names;
}

Model load_model(std::string_view config_json, std::string_view archive_bytes) {
    json cj;
    try {
        cj = json::parse(config_json);
    } catch (const json::exception& e) {
        throw ParseError(std::string("model config is not valid JSON: ") + e.what());
    }
    Model m;
    m.config = ModelConfig::from_json(cj);
    const ModelConfig& c = m.config;

    TensorArchive archive = parse_tensor_archive(archive_bytes);
    TensorTaker take(archive);
    const std::size_t d = c.d_model;
    const std::size_t kv = c.n_kv_heads * c.head_dim;

    m.embedding = take.matrix("embedding", c.vocab_size, d);
    if (c.position_kind == PositionKind::learned) {
        m.position_embedding = take.matrix("position_embedding", c.max_positions, d);
    }
    m.layers.resize(c.n_layers);
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        LayerWeights& w = m.layers[i];
        w.attn_norm = take.vector(p + "attn_norm", d);
        w.wq = take.matrix(p + "attn.q", d, d);
        w.wk = take.matrix(p + "attn.k", kv, d);
        w.wv = take.matrix(p + "attn.v", kv, d);
        w.wo = take.matrix(p + "attn.o", d, d);
        if (c.attn_bias) {
            w.bq = take.vector(p + "attn.q_bias", d);
            w.bk = take.vector(p + "attn.k_bias", kv);
            w.bv = take.vector(p + "attn.v_bias", kv);
        }
        w.ffn_norm = take.vector(p + "ffn_norm", d);
        if (c.ffn_kind == FfnKind::swiglu) w.w_gate = take.matrix(p + "ffn.gate", c.d_ff, d);
        w.w_up = take.matrix(p + "ffn.up", c.d_ff, d);
        w.w_down = take.matrix(p + "ffn.down", d, c.d_ff);
    }
    m.final_norm = take.vector("final_norm", d);
    if (!c.tie_embeddings) m.unembedding_storage = take.matrix("unembedding", c.vocab_size, d);

    for (const std::string& name : take.leftovers()) {
        m.warnings.push_back("unknown tensor '" + name + "' ignored");
    }
    for (const auto& v : {std::cref(m.final_norm)}) require_finite(v.get(), "final_norm");
    for (const LayerWeights& w : m.layers) {
        require_finite(w.attn_norm, "attn_norm");
        require_finite(w.ffn_norm, "ffn_norm");
        require_finite(w.bq, "attn bias");
        require_finite(w.bk, "attn bias");
        require_finite(w.bv, "attn bias");
    }
    return m;
}

Model load_model(const std::filesystem::path& config_path,
                 const std::filesystem::path& weights_path) {
    const std::string config = read_file(config_path);
    const std::string weights = read_file(weights_path);
    return load_model(std::string_view(config), std::string_view(weights));
}

} // namespace nclens
