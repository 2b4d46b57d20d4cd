#include "spin/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spin/errors.hpp"
#include "spin/kernels.hpp"

namespace spin {

std::size_t HeadMask::kept_count() const {
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), 1.0f));
}

Model::Model(std::shared_ptr<const Checkpoint> checkpoint)
    : checkpoint_(std::move(checkpoint)), config_(checkpoint_->config()) {
    auto data = [&](const std::string& name) -> std::span<const float> {
        return checkpoint_->tensor(name).data;
    };
    tok_embeddings_ = data("tok_embeddings");
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        layers_.push_back({data(p + "attn_norm"), data(p + "wq"), data(p + "wk"), data(p + "wv"),
                           data(p + "wo"), data(p + "ffn_norm"), data(p + "w1"), data(p + "w2")});
    }
    final_norm_ = data("norm");
    output_ = data("output");

    const std::size_t dk = config_.head_dim();
    for (std::size_t i = 0; i < dk / 2; ++i) {
        inv_freq_.push_back(std::pow(static_cast<double>(config_.rope_base),
                                     -2.0 * static_cast<double>(i) / static_cast<double>(dk)));
    }
}

std::span<const float> Model::token_embedding(TokenId id) const {
    if (id >= config_.vocab_size) {
        throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(config_.vocab_size));
    }
    return tok_embeddings_.subspan(static_cast<std::size_t>(id) * config_.d_model, config_.d_model);
}

void Model::apply_rotary(std::span<float> x, std::size_t position) const {
    const std::size_t dk = config_.head_dim();
    for (std::size_t i = 0; i < dk / 2; ++i) {
        const double angle = static_cast<double>(position) * inv_freq_[i];
        const float c = static_cast<float>(std::cos(angle));
        const float s = static_cast<float>(std::sin(angle));
        for (std::size_t h = 0; h < config_.n_heads; ++h) {
            float& a = x[h * dk + 2 * i];
            float& b = x[h * dk + 2 * i + 1];
            const float a0 = a;
            const float b0 = b;
            a = a0 * c - b0 * s;
            b = a0 * s + b0 * c;
        }
    }
}

void Model::attend(std::span<const float> queries, const KvCache& cache, std::size_t layer,
                   std::vector<float>& logits, std::vector<float>& probs,
                   std::vector<float>& heads) const {
    const std::size_t H = config_.n_heads;
    const std::size_t dk = config_.head_dim();
    const std::size_t n = cache.length(layer);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
    logits.resize(H * n);
    probs.resize(H * n);
    heads.assign(H * dk, 0.0f);
    for (std::size_t h = 0; h < H; ++h) {
        const float* q = queries.data() + h * dk;
        const float* keys = cache.keys(layer, h).data();
        const float* values = cache.values(layer, h).data();
        float* row = logits.data() + h * n;
        float* p = probs.data() + h * n;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = kernels::dot(q, keys + j * dk, dk);
            p[j] = row[j] * scale;
        }
        kernels::softmax(std::span<float>(p, n));
        float* out = heads.data() + h * dk;
        for (std::size_t j = 0; j < n; ++j) {
            const float w = p[j];
            const float* v = values + j * dk;
            for (std::size_t c = 0; c < dk; ++c) out[c] += w * v[c];
        }
    }
}

void Model::project_out(std::size_t layer, std::span<const float> heads, const HeadMask* mask,
                        std::span<float> out) const {
    if (mask == nullptr) {
        kernels::matvec(layers_[layer].wo, heads, out);
        return;
    }
    const std::size_t dk = config_.head_dim();
    std::vector<float> scaled(heads.begin(), heads.end());
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
        const float m = mask->m[h];
        for (std::size_t c = 0; c < dk; ++c) scaled[h * dk + c] *= m;
    }
    kernels::matvec(layers_[layer].wo, scaled, out);
}

std::vector<float> Model::attention_step(std::span<const float> queries, const KvCache& cache,
                                         std::size_t layer, const HeadMask* mask) const {
    if (queries.size() != config_.d_model) {
        throw ConfigError("query state has " + std::to_string(queries.size()) +
                          " values, model expects " + std::to_string(config_.d_model));
    }
    if (layer >= config_.n_layers) throw ConfigError("layer index out of range");
    if (mask && mask->size() != config_.n_heads) {
        throw ConfigError("head mask has " + std::to_string(mask->size()) + " entries, model has " +
                          std::to_string(config_.n_heads) + " heads");
    }
    if (cache.length(layer) == 0) throw Error("attention_step needs at least one cached row");
    std::vector<float> logits, probs, heads;
    attend(queries, cache, layer, logits, probs, heads);
    std::vector<float> out(config_.d_model);
    project_out(layer, heads, mask, out);
    return out;
}

std::vector<float> Model::forward_step(std::span<const float> embedding, const StepContext& ctx,
                                       KvCache& cache, StepHook* hook) const {
    const std::size_t d = config_.d_model;
    if (embedding.size() != d) {
        throw ConfigError("input embedding has " + std::to_string(embedding.size()) +
                          " values, model expects " + std::to_string(d));
    }
    if (cache.length() >= config_.max_seq_len) {
        throw GenerationLengthError("sequence length would exceed max_seq_len " +
                                    std::to_string(config_.max_seq_len));
    }
    if (ctx.position != cache.length()) {
        throw Error("step position " + std::to_string(ctx.position) + " does not match cache length " +
                    std::to_string(cache.length()));
    }

    std::vector<float> x(embedding.begin(), embedding.end());
    std::vector<float> xn(d), q(d), k(d), v(d), attn_out(d);
    std::vector<float> ffn_hidden(config_.d_ffn);
    std::vector<float> logits, probs, heads;
    HeadMask mask = HeadMask::ones(config_.n_heads);

    if (hook) hook->begin_step(ctx);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const auto& w = layers_[l];
        kernels::rmsnorm(x, w.attn_norm, xn);
        kernels::matvec(w.wq, xn, q);
        kernels::matvec(w.wk, xn, k);
        kernels::matvec(w.wv, xn, v);
        apply_rotary(q, ctx.position);
        apply_rotary(k, ctx.position);
        cache.append(l, k, v);

        attend(q, cache, l, logits, probs, heads);
        const HeadMask* applied = nullptr;
        if (hook) {
            const LayerAttention view{l,      ctx,   config_.n_heads, config_.head_dim(),
                                      cache.length(l), q, logits, probs, cache};
            if (hook->layer_mask(view, mask)) applied = &mask;
        }
        project_out(l, heads, applied, attn_out);
        for (std::size_t i = 0; i < d; ++i) x[i] += attn_out[i];

        kernels::rmsnorm(x, w.ffn_norm, xn);
        kernels::matvec(w.w1, xn, ffn_hidden);
        for (float& h : ffn_hidden) h = kernels::gelu(h);
        kernels::matvec(w.w2, ffn_hidden, attn_out);
        for (std::size_t i = 0; i < d; ++i) x[i] += attn_out[i];
    }
    if (hook) hook->end_step();

    kernels::rmsnorm(x, final_norm_, xn);
    std::vector<float> out(config_.vocab_size);
    kernels::matvec(output_, xn, out);
    return out;
}

std::vector<float> Model::prefill(const MultimodalPrompt& prompt, KvCache& cache, StepHook* hook) const {
    prompt.validate(config_);
    std::vector<float> logits;
    const std::size_t base = cache.length();
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        StepContext ctx;
        ctx.position = base + i;
        ctx.vision = {base + prompt.span.start, base + prompt.span.end};
        ctx.kind = prompt.is_vision(i) ? PositionKind::vision : PositionKind::prompt_text;
        ctx.produces_output = (i + 1 == prompt.size());
        const auto emb = prompt.is_vision(i) ? prompt.vision_row(i, config_.d_model)
                                             : token_embedding(prompt.tokens[i]);
        logits = forward_step(emb, ctx, cache, hook);
    }
    return logits;
}

}  // namespace spin
