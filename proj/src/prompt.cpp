#include "spin/prompt.hpp"

#include <string>

#include "spin/errors.hpp"

namespace spin {

std::span<const float> MultimodalPrompt::vision_row(std::size_t pos, std::size_t d_model) const {
    return std::span<const float>(vision).subspan((pos - span.start) * d_model, d_model);
}

void MultimodalPrompt::validate(const ModelConfig& config) const {
    if (!(span.start < span.end && span.end <= tokens.size())) {
        throw DataError("vision span [" + std::to_string(span.start) + ", " +
                        std::to_string(span.end) + ") is invalid for a prompt of length " +
                        std::to_string(tokens.size()));
    }
    if (vision.size() != span.size() * config.d_model) {
        throw ShapeError("vision block holds " + std::to_string(vision.size()) +
                         " values, expected " + std::to_string(span.size()) + " x " +
                         std::to_string(config.d_model));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!span.contains(i) && tokens[i] >= config.vocab_size) {
            throw DataError("token id " + std::to_string(tokens[i]) + " at position " +
                            std::to_string(i) + " is outside the vocabulary");
        }
    }
    if (tokens.size() >= config.max_seq_len) {
        throw GenerationLengthError("prompt length " + std::to_string(tokens.size()) +
                                    " leaves no room below max_seq_len " +
                                    std::to_string(config.max_seq_len));
    }
}

MultimodalPrompt make_prompt(std::vector<float> vision, std::size_t d_model,
                             std::span<const TokenId> text) {
    MultimodalPrompt p;
    const std::size_t n_vision = d_model ? vision.size() / d_model : 0;
    p.tokens.assign(n_vision, 0);
    p.tokens.insert(p.tokens.end(), text.begin(), text.end());
    p.vision = std::move(vision);
    p.span = {0, n_vision};
    return p;
}

}  // namespace spin
