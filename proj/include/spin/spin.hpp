#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "spin/model.hpp"

namespace spin {

enum class ScoringStrategy { image_attention, total_attention, query_norm, key_norm };
enum class ApplyTo { generated_text_queries_only, all_text_queries };

std::string_view to_string(ScoringStrategy s);
std::string_view to_string(ApplyTo a);
// Throw ConfigError on an unknown tag.
ScoringStrategy parse_strategy(std::string_view tag);
ApplyTo parse_apply_to(std::string_view tag);

// Inclusive, 1-indexed layer range.
struct LayerRange {
    std::size_t lo = 1;
    std::size_t hi = 1;
    friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

struct SpinConfig {
    ScoringStrategy strategy = ScoringStrategy::image_attention;
    double r = 0.0;      // suppressed-head ratio, [0, 1)
    double alpha = 0.0;  // multiplier for suppressed heads, [0, 1]
    std::optional<LayerRange> layers;  // unset: every layer
    ApplyTo apply_to = ApplyTo::all_text_queries;
    // Rank heads by post-softmax vision mass instead of raw q.k sums.
    bool post_softmax = false;

    // K = H - round(r * H), clamped to [1, H].
    std::size_t kept_heads(std::size_t n_heads) const;
    bool covers_layer(std::size_t layer) const;  // 0-based layer index
    // Whether a query at this step is subject to suppression.
    bool covers(const StepContext& step) const;
    // Throws ConfigValueError keyed "spin.<field>".
    void validate(std::size_t n_layers) const;

    friend bool operator==(const SpinConfig&, const SpinConfig&) = default;
};

nlohmann::json to_json(const SpinConfig& c);
SpinConfig spin_config_from_json(const nlohmann::json& j, const std::string& prefix = "spin");

// Sum of raw q.k over the vision span for one head; `keys` is n x head_dim.
float image_attention_score(std::span<const float> query, std::span<const float> keys,
                            VisionSpan span);

// One score per head: sum over vision keys of q^i . k_j^i (pre-softmax).
// `queries` is n_heads x head_dim. Throws SpanError when the span is empty
// or reaches past the cached rows of `layer`.
std::vector<float> score_heads_image_attention(std::span<const float> queries,
                                               const KvCache& cache, std::size_t layer,
                                               VisionSpan span);

// query_norm: ||q^i||; key_norm: mean over cached rows of ||k_j^i||;
// total_attention: sum over every cached row of q^i . k_j^i.
// Throws ConfigError for image_attention (use the function above).
std::vector<float> score_heads_alternative(ScoringStrategy strategy,
                                           std::span<const float> queries,
                                           const KvCache& cache, std::size_t layer);

// Indices of the k highest scores, ordered by (score desc, index asc); ties
// go to the lower head index.
std::vector<std::size_t> select_top_k(std::span<const float> scores, std::size_t k);

// m_i = 1 for the top-K heads, alpha otherwise. Layers outside the configured
// range get an all-ones mask.
HeadMask build_mask(std::span<const float> scores, const SpinConfig& config, std::size_t layer);

// Kept/suppressed pattern of one traced query step, all layers.
struct MaskStep {
    std::string stream;
    std::size_t position = 0;
    PositionKind kind = PositionKind::generated;
    double alpha = 0.0;
    std::vector<std::vector<std::uint8_t>> kept;  // n_layers x n_heads, 1 = kept
};

nlohmann::json to_json(const MaskStep& step);
MaskStep mask_step_from_json(const nlohmann::json& j);

class MaskSink {
public:
    virtual ~MaskSink() = default;
    virtual void record(const MaskStep& step) = 0;
};

// In-memory sink.
class MaskRecorder : public MaskSink {
public:
    void record(const MaskStep& step) override;
    std::vector<MaskStep> steps() const;

private:
    mutable std::mutex mu_;
    std::vector<MaskStep> steps_;
};

// Appends one JSON object per traced step to a file.
class MaskTraceWriter : public MaskSink {
public:
    explicit MaskTraceWriter(const std::filesystem::path& path);
    void record(const MaskStep& step) override;

private:
    std::mutex mu_;
    std::ofstream out_;
};

// Scores heads and builds a fresh mask for every covered query and layer.
// Vision queries and uncovered text queries run unmasked.
class SpinHook : public StepHook {
public:
    SpinHook(SpinConfig config, std::size_t n_layers, std::size_t n_heads,
             std::shared_ptr<MaskSink> sink = nullptr, std::string stream = {});

    void begin_step(const StepContext& ctx) override;
    bool layer_mask(const LayerAttention& attn, HeadMask& mask) override;
    void end_step() override;
    std::unique_ptr<StepHook> clone() const override;

    const SpinConfig& config() const { return config_; }
    void set_stream(std::string stream) { stream_ = std::move(stream); }

private:
    std::vector<float> scores(const LayerAttention& attn) const;

    SpinConfig config_;
    std::size_t n_layers_;
    std::size_t n_heads_;
    std::shared_ptr<MaskSink> sink_;
    std::string stream_;
    bool active_ = false;
    MaskStep current_;
};

}  // namespace spin
