#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spin/checkpoint.hpp"

namespace spin {

// Random checkpoint with every Wq zeroed: all attention logits are 0, so
// each query spreads its mass uniformly over the cached positions.
Checkpoint make_uniform_attention_checkpoint(const ModelConfig& config, std::uint64_t seed);

// Embedding-space directions used by the planted-alignment construction.
struct PlantedAxes {
    std::size_t vision_axis = 0;  // set only in vision embeddings
    std::size_t shared_axis = 1;  // set in every embedding
    float magnitude = 1.0f;
};

// Random checkpoint rewired so that, in the first layer, each head listed in
// `heads` has a large positive q.k against every vision key and no other
// head sees the planted axes:
//  - every text embedding gets `shared_axis` = magnitude, `vision_axis` = 0;
//  - a planted head's query reads `shared_axis` and its key reads
//    `vision_axis`, both through the first slot of its slowest rotary pair
//    so the dot product stays positive across relative positions;
//  - other heads' Wq/Wk columns for both axes are zeroed.
// Only layer 0 sees raw embeddings, so only layer 0 is planted.
Checkpoint make_planted_bias_checkpoint(const ModelConfig& config, std::uint64_t seed,
                                        std::span<const std::size_t> heads, float gain = 1.0f,
                                        PlantedAxes axes = {});

// n_vision x d_model embeddings carrying both planted axes plus uniform
// noise of amplitude 1/sqrt(d_model).
std::vector<float> planted_vision_embeddings(const ModelConfig& config, std::size_t n_vision,
                                             std::uint64_t seed, PlantedAxes axes = {});

}  // namespace spin
