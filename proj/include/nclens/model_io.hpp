#pragma once

#include "nclens/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace nclens {

using TokenId = std::uint32_t;

enum class PositionKind { rotary, learned };
enum class FfnKind { swiglu, gelu };

struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t n_kv_heads = 0; // grouped-query attention; defaults to n_heads
    std::size_t head_dim = 0;
    std::size_t d_ff = 0;
    std::size_t vocab_size = 0;
    NormKind norm_kind = NormKind::rms;
    double norm_eps = 1e-6;
    PositionKind position_kind = PositionKind::rotary;
    double rope_theta = 10000.0;
    std::size_t max_positions = 0; // required for learned positions
    FfnKind ffn_kind = FfnKind::swiglu;
    bool attn_bias = false;
    bool tie_embeddings = false;
    // Text with exactly one "{{user}}" placeholder; empty means no wrapping.
    std::string chat_template;
    std::optional<TokenId> eos_token_id;

    // Throws ConfigError when an invariant fails.
    void validate() const;

    static ModelConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    bool operator==(const ModelConfig&) const = default;
};

inline constexpr std::string_view kChatPlaceholder = "{{user}}";

// Wraps a condition text in the configured chat template (identity when unset).
std::string apply_chat_template(const ModelConfig& config, std::string_view user_text);

struct LayerWeights {
    Vector attn_norm;
    Matrix wq, wk, wv, wo; // (out x in)
    Vector bq, bk, bv;     // empty unless attn_bias
    Vector ffn_norm;
    Matrix w_gate; // swiglu only
    Matrix w_up;
    Matrix w_down;

    bool operator==(const LayerWeights&) const = default;
};

class Model {
public:
    ModelConfig config;
    Matrix embedding;           // vocab x d_model
    Matrix position_embedding;  // max_positions x d_model, learned positions only
    std::vector<LayerWeights> layers;
    Vector final_norm;
    Matrix unembedding_storage; // empty when tied
    std::vector<std::string> warnings;

    // W_U (vocab x d_model). Aliases the embedding when embeddings are tied.
    const Matrix& unembedding() const {
        return config.tie_embeddings ? embedding : unembedding_storage;
    }

    bool operator==(const Model&) const = default;
};

// One named tensor from a safetensors-layout archive, widened to double.
struct ArchiveTensor {
    std::string dtype;
    std::vector<std::size_t> shape;
    std::vector<double> values;
};

struct TensorArchive {
    std::map<std::string, ArchiveTensor> tensors;
    nlohmann::json metadata = nlohmann::json::object();
};

// 8-byte LE header length, JSON header, raw little-endian buffer.
// Accepts F32, F16 and BF16.
TensorArchive parse_tensor_archive(std::string_view bytes);

// Serialises tensors as F32. Header keys are sorted, so output is deterministic.
std::string serialize_tensor_archive(const std::map<std::string, ArchiveTensor>& tensors,
                                     const nlohmann::json& metadata = nlohmann::json::object());

std::string read_file(const std::filesystem::path& path);

std::vector<std::string> expected_tensor_names(const ModelConfig& config);

Model load_model(std::string_view config_json, std::string_view archive_bytes);
Model load_model(const std::filesystem::path& config_path,
                 const std::filesystem::path& weights_path);

} // namespace nclens
