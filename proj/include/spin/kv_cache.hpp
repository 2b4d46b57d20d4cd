#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spin/model_config.hpp"

namespace spin {

// Per-layer, per-head key and value rows (post-rotary keys). One row per
// processed position. Each generation stream owns its own cache.
class KvCache {
public:
    explicit KvCache(const ModelConfig& config);

    std::size_t n_layers() const { return n_layers_; }
    std::size_t n_heads() const { return n_heads_; }
    std::size_t head_dim() const { return head_dim_; }

    // Rows held by layer 0; all layers agree between forward steps.
    std::size_t length() const { return lengths_.front(); }
    std::size_t length(std::size_t layer) const { return lengths_[layer]; }

    // Appends one row per head. `keys` and `values` are n_heads x head_dim.
    void append(std::size_t layer, std::span<const float> keys, std::span<const float> values);

    // length(layer) x head_dim, row-major.
    std::span<const float> keys(std::size_t layer, std::size_t head) const;
    std::span<const float> values(std::size_t layer, std::size_t head) const;

private:
    std::size_t slot(std::size_t layer, std::size_t head) const { return layer * n_heads_ + head; }

    std::size_t n_layers_;
    std::size_t n_heads_;
    std::size_t head_dim_;
    std::vector<std::size_t> lengths_;
    std::vector<std::vector<float>> keys_;
    std::vector<std::vector<float>> values_;
};

}  // namespace spin
