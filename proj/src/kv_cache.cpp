#include "spin/kv_cache.hpp"

#include "spin/errors.hpp"

namespace spin {

KvCache::KvCache(const ModelConfig& config)
    : n_layers_(config.n_layers),
      n_heads_(config.n_heads),
      head_dim_(config.head_dim()),
      lengths_(config.n_layers, 0),
      keys_(config.n_layers * config.n_heads),
      values_(config.n_layers * config.n_heads) {}

void KvCache::append(std::size_t layer, std::span<const float> keys, std::span<const float> values) {
    if (keys.size() != n_heads_ * head_dim_ || values.size() != n_heads_ * head_dim_) {
        throw ShapeError("kv append expects " + std::to_string(n_heads_ * head_dim_) + " values");
    }
    for (std::size_t h = 0; h < n_heads_; ++h) {
        auto k = keys.subspan(h * head_dim_, head_dim_);
        auto v = values.subspan(h * head_dim_, head_dim_);
        keys_[slot(layer, h)].insert(keys_[slot(layer, h)].end(), k.begin(), k.end());
        values_[slot(layer, h)].insert(values_[slot(layer, h)].end(), v.begin(), v.end());
    }
    ++lengths_[layer];
}

std::span<const float> KvCache::keys(std::size_t layer, std::size_t head) const {
    return keys_[slot(layer, head)];
}

std::span<const float> KvCache::values(std::size_t layer, std::size_t head) const {
    return values_[slot(layer, head)];
}

}  // namespace spin
