#include "spin/rigged.hpp"

#include <cmath>

#include "spin/errors.hpp"
#include "spin/rng.hpp"

namespace spin {

Checkpoint make_uniform_attention_checkpoint(const ModelConfig& config, std::uint64_t seed) {
    Checkpoint ckpt = init_checkpoint(config, seed);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        auto& wq = ckpt.mutable_tensor("layers." + std::to_string(l) + ".wq");
        std::fill(wq.data.begin(), wq.data.end(), 0.0f);
    }
    ckpt.validate();
    return ckpt;
}

Checkpoint make_planted_bias_checkpoint(const ModelConfig& config, std::uint64_t seed,
                                        std::span<const std::size_t> heads, float gain,
                                        PlantedAxes axes) {
    if (axes.vision_axis >= config.d_model || axes.shared_axis >= config.d_model ||
        axes.vision_axis == axes.shared_axis) {
        throw ConfigError("planted axes must be two distinct embedding dimensions");
    }
    Checkpoint ckpt = init_checkpoint(config, seed);
    const std::size_t d = config.d_model;
    const std::size_t dk = config.head_dim();

    auto& emb = ckpt.mutable_tensor("tok_embeddings");
    for (std::size_t t = 0; t < config.vocab_size; ++t) {
        emb.data[t * d + axes.vision_axis] = 0.0f;
        emb.data[t * d + axes.shared_axis] = axes.magnitude;
    }

    auto& wq = ckpt.mutable_tensor("layers.0.wq");
    auto& wk = ckpt.mutable_tensor("layers.0.wk");
    for (std::size_t row = 0; row < d; ++row) {
        for (auto* w : {&wq, &wk}) {
            w->data[row * d + axes.vision_axis] = 0.0f;
            w->data[row * d + axes.shared_axis] = 0.0f;
        }
    }
    for (std::size_t h : heads) {
        if (h >= config.n_heads) throw ConfigError("planted head index out of range");
        for (std::size_t row = h * dk; row < (h + 1) * dk; ++row) {
            std::fill_n(wq.data.begin() + static_cast<std::ptrdiff_t>(row * d), d, 0.0f);
            std::fill_n(wk.data.begin() + static_cast<std::ptrdiff_t>(row * d), d, 0.0f);
        }
        const std::size_t slow = h * dk + dk - 2;
        wq.data[slow * d + axes.shared_axis] = gain;
        wk.data[slow * d + axes.vision_axis] = gain;
    }
    ckpt.validate();
    return ckpt;
}

std::vector<float> planted_vision_embeddings(const ModelConfig& config, std::size_t n_vision,
                                             std::uint64_t seed, PlantedAxes axes) {
    SplitMix64 rng(seed);
    const std::size_t d = config.d_model;
    const float s = 1.0f / std::sqrt(static_cast<float>(d));
    std::vector<float> out(n_vision * d);
    for (std::size_t i = 0; i < n_vision; ++i) {
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] = s * (2.0f * rng.uniform_float() - 1.0f);
        out[i * d + axes.vision_axis] = axes.magnitude;
        out[i * d + axes.shared_axis] = axes.magnitude;
    }
    return out;
}

}  // namespace spin
