#include "spin/model_config.hpp"

#include <set>
#include <string>

#include "spin/errors.hpp"

namespace spin {

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* key) {
        if (v == 0) {
            throw ConfigValueError(std::string("model.config.") + key, "must be >= 1");
        }
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_ffn, "d_ffn");
    positive(vocab_size, "vocab_size");
    if (max_seq_len < 2) {
        throw ConfigValueError("model.config.max_seq_len", "must be >= 2");
    }
    if (d_model % n_heads != 0) {
        throw ConfigValueError("model.config.n_heads", "must divide d_model exactly");
    }
    if (head_dim() % 2 != 0) {
        throw ConfigValueError("model.config.n_heads",
                               "head dimension d_model/n_heads must be even for rotary encoding");
    }
    if (!(rope_base > 1.0f)) {
        throw ConfigValueError("model.config.rope_base", "must be > 1");
    }
}

nlohmann::json to_json(const ModelConfig& c) {
    return {
        {"n_layers", c.n_layers},   {"n_heads", c.n_heads},
        {"d_model", c.d_model},     {"d_ffn", c.d_ffn},
        {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
        {"rope_base", c.rope_base},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) {
        throw ConfigValueError(prefix, "expected an object");
    }
    static const std::set<std::string> known = {"n_layers", "n_heads", "d_model", "d_ffn",
                                                "vocab_size", "max_seq_len", "rope_base"};
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) {
            throw ConfigValueError(prefix + "." + key, "unknown key");
        }
    }
    ModelConfig c;
    auto count = [&](const char* key, std::size_t& out) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_number_integer() || v.get<long long>() < 0) {
            throw ConfigValueError(prefix + "." + key, "expected a non-negative integer");
        }
        out = v.get<std::size_t>();
    };
    count("n_layers", c.n_layers);
    count("n_heads", c.n_heads);
    count("d_model", c.d_model);
    count("d_ffn", c.d_ffn);
    count("vocab_size", c.vocab_size);
    count("max_seq_len", c.max_seq_len);
    if (j.contains("rope_base")) {
        if (!j.at("rope_base").is_number()) {
            throw ConfigValueError(prefix + ".rope_base", "expected a number");
        }
        c.rope_base = j.at("rope_base").get<float>();
    }
    try {
        c.validate();
    } catch (const ConfigValueError& e) {
        // re-key under the caller's prefix
        std::string key = e.key();
        const std::string base = "model.config";
        if (key.rfind(base, 0) == 0) key = prefix + key.substr(base.size());
        throw ConfigValueError(key, std::string(e.what()).substr(e.key().size() + 2));
    }
    return c;
}

}  // namespace spin
