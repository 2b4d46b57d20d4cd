#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "spin/checkpoint.hpp"
#include "spin/kv_cache.hpp"
#include "spin/prompt.hpp"

namespace spin {

// Per-head output multipliers for one layer at one query position.
struct HeadMask {
    std::vector<float> m;

    static HeadMask ones(std::size_t n_heads) { return {std::vector<float>(n_heads, 1.0f)}; }
    std::size_t size() const { return m.size(); }
    bool kept(std::size_t head) const { return m[head] == 1.0f; }
    std::size_t kept_count() const;
    friend bool operator==(const HeadMask&, const HeadMask&) = default;
};

enum class PositionKind { vision, prompt_text, generated };

struct StepContext {
    std::size_t position = 0;
    PositionKind kind = PositionKind::prompt_text;
    VisionSpan vision;
    // True when this query's logits select an output token: the last prompt
    // position and every generated token fed back in.
    bool produces_output = false;
};

// Everything a hook may inspect about one layer's attention at one step.
// Row h of `logits`/`probs` covers all seq_len cached positions (causal).
struct LayerAttention {
    std::size_t layer;  // 0-based
    const StepContext& step;
    std::size_t n_heads;
    std::size_t head_dim;
    std::size_t seq_len;
    std::span<const float> queries;  // n_heads x head_dim, post-rotary
    std::span<const float> logits;   // n_heads x seq_len, raw q.k (unscaled)
    std::span<const float> probs;    // n_heads x seq_len, softmax(q.k / sqrt(head_dim))
    const KvCache& cache;

    std::span<const float> query(std::size_t h) const { return queries.subspan(h * head_dim, head_dim); }
    std::span<const float> head_logits(std::size_t h) const { return logits.subspan(h * seq_len, seq_len); }
    std::span<const float> head_probs(std::size_t h) const { return probs.subspan(h * seq_len, seq_len); }
};

// Per-stream callback consulted by forward_step once per layer, after the
// per-head outputs are computed and before they are combined by Wo.
class StepHook {
public:
    virtual ~StepHook() = default;

    virtual void begin_step(const StepContext&) {}
    // Fill `mask` and return true to scale head outputs; return false to
    // leave the layer untouched.
    virtual bool layer_mask(const LayerAttention& attn, HeadMask& mask) = 0;
    virtual void end_step() {}
    // Independent copy for a forked stream (beam search).
    virtual std::unique_ptr<StepHook> clone() const = 0;
};

// Pre-norm decoder-only transformer: RMSNorm, rotary q/k, GELU FFN, no
// biases, f32 throughout. Stateless apart from the immutable checkpoint, so
// one Model can serve any number of concurrent streams.
class Model {
public:
    explicit Model(std::shared_ptr<const Checkpoint> checkpoint);

    const ModelConfig& config() const { return config_; }
    const Checkpoint& checkpoint() const { return *checkpoint_; }
    KvCache new_cache() const { return KvCache(config_); }

    std::span<const float> token_embedding(TokenId id) const;

    // Processes one position whose input embedding is `embedding`; appends
    // its keys/values to every layer of `cache` and returns next-token
    // logits. `ctx.position` must equal cache.length().
    std::vector<float> forward_step(std::span<const float> embedding, const StepContext& ctx,
                                    KvCache& cache, StepHook* hook) const;

    // Runs every prompt position through forward_step; returns the logits
    // of the last position.
    std::vector<float> prefill(const MultimodalPrompt& prompt, KvCache& cache, StepHook* hook) const;

    // Multi-head attention of already-projected queries (n_heads x head_dim)
    // over the rows held in `cache` for `layer`, followed by the Wo
    // projection. With `mask` set, head i is scaled by mask->m[i] first.
    std::vector<float> attention_step(std::span<const float> queries, const KvCache& cache,
                                      std::size_t layer, const HeadMask* mask) const;

private:
    struct LayerWeights {
        std::span<const float> attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2;
    };

    // Fills logits/probs (n_heads x seq) and heads (n_heads x head_dim).
    void attend(std::span<const float> queries, const KvCache& cache, std::size_t layer,
                std::vector<float>& logits, std::vector<float>& probs,
                std::vector<float>& heads) const;
    void project_out(std::size_t layer, std::span<const float> heads, const HeadMask* mask,
                     std::span<float> out) const;
    void apply_rotary(std::span<float> x, std::size_t position) const;

    std::shared_ptr<const Checkpoint> checkpoint_;
    ModelConfig config_;
    std::span<const float> tok_embeddings_;
    std::vector<LayerWeights> layers_;
    std::span<const float> final_norm_;
    std::span<const float> output_;
    std::vector<double> inv_freq_;
};

}  // namespace spin
