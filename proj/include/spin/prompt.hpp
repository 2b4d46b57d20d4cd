#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spin/model_config.hpp"

namespace spin {

// Half-open range [start, end) of vision positions.
struct VisionSpan {
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - start; }
    bool contains(std::size_t pos) const { return pos >= start && pos < end; }
    friend bool operator==(const VisionSpan&, const VisionSpan&) = default;
};

// Input sequence for a vision-language decoder. Text positions carry token
// ids; vision positions carry pre-projected embeddings of width d_model.
struct MultimodalPrompt {
    std::vector<TokenId> tokens;  // one entry per position; ignored inside the span
    std::vector<float> vision;    // span.size() x d_model, row-major
    VisionSpan span;

    std::size_t size() const { return tokens.size(); }
    bool is_vision(std::size_t pos) const { return span.contains(pos); }
    std::span<const float> vision_row(std::size_t pos, std::size_t d_model) const;

    // Throws DataError when the span is empty or out of range, the vision
    // block has the wrong size, or a text id is outside the vocabulary.
    void validate(const ModelConfig& config) const;
};

// Layout: vision block first, then `text` (system prompt + instruction).
MultimodalPrompt make_prompt(std::vector<float> vision, std::size_t d_model,
                             std::span<const TokenId> text);

}  // namespace spin
