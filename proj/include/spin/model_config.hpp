#pragma once

#include <cstddef>
#include <cstdint>

#include <json.hpp>

namespace spin {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 8;
    std::size_t d_model = 64;
    std::size_t d_ffn = 256;
    std::size_t vocab_size = 256;
    std::size_t max_seq_len = 512;
    float rope_base = 10000.0f;

    std::size_t head_dim() const { return d_model / n_heads; }

    // Throws ConfigValueError naming the offending field ("model.<field>").
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
// Strict: unknown keys are rejected. `prefix` is prepended to key names in
// error messages.
ModelConfig model_config_from_json(const nlohmann::json& j,
                                   const std::string& prefix = "model.config");

}  // namespace spin
