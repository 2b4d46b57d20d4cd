#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spin/decoding.hpp"
#include "spin/spin.hpp"

namespace spin {

// ---- attention profile -----------------------------------------------------

struct AttentionShare {
    double vision = 0.0;  // mean post-softmax mass on vision positions
    double text = 0.0;    // mean mass on every other position
};

struct AttentionProfile {
    std::vector<AttentionShare> layers;
    std::uint64_t steps = 0;  // query steps averaged over
    std::size_t n_heads = 0;
};

// Running sums shared by every clone of an AttentionProfiler.
struct ProfileAccumulator {
    std::vector<double> vision_sum;
    std::vector<double> text_sum;
    std::uint64_t steps = 0;
    std::size_t n_heads = 0;

    AttentionProfile finish() const;
};

// Observes (never masks) the queries that select output tokens: the last
// prompt position and each generated token.
class AttentionProfiler : public StepHook {
public:
    AttentionProfiler(std::shared_ptr<ProfileAccumulator> acc, std::size_t n_layers,
                      std::size_t n_heads);
    void begin_step(const StepContext& ctx) override;
    bool layer_mask(const LayerAttention& attn, HeadMask& mask) override;
    void end_step() override;
    std::unique_ptr<StepHook> clone() const override;

private:
    std::shared_ptr<ProfileAccumulator> acc_;
    bool active_ = false;
};

// Generates from every prompt and averages per layer over steps, heads and
// records. `spin` installs head suppression alongside the profiler. Throws
// DataError for an empty corpus.
AttentionProfile profile_attention(const Model& model, std::span<const MultimodalPrompt> prompts,
                                   const DecodeConfig& decode,
                                   const std::optional<SpinConfig>& spin = std::nullopt);

// Step-weighted mean of profiles from disjoint runs.
AttentionProfile merge_profiles(std::span<const AttentionProfile> parts);

nlohmann::json to_json(const AttentionProfile& p);
// "layer,head,value" rows: head column "vision" / "text".
std::string profile_to_csv(const AttentionProfile& p);

// ---- head-mask heatmap -----------------------------------------------------

struct MaskHeatmap {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::uint64_t steps = 0;
    std::vector<std::uint64_t> kept;  // n_layers x n_heads counts

    double value(std::size_t layer, std::size_t head) const {
        return steps ? static_cast<double>(kept[layer * n_heads + head]) / static_cast<double>(steps)
                     : 0.0;
    }
};

std::vector<MaskStep> read_mask_trace(const std::filesystem::path& path);

// Entry (l, h) = fraction of steps with head h kept at layer l. Throws
// DataError when steps disagree on (n_layers, n_heads) or there are none.
MaskHeatmap aggregate_masks(std::span<const MaskStep> steps);
MaskHeatmap aggregate_mask_traces(std::span<const std::filesystem::path> traces);

nlohmann::json to_json(const MaskHeatmap& h);
std::string heatmap_to_csv(const MaskHeatmap& h);

// ---- three-stage selection -------------------------------------------------

struct EvalSummary {
    double cs = 0.0;  // CHAIR_s in [0, 1]
    double ci = 0.0;
    double f1 = 0.0;  // in [0, 1]
};

struct SearchSpace {
    std::vector<double> r_grid;
    std::vector<LayerRange> layer_ranges;  // empty: default_layer_candidates()
    std::vector<double> alpha_grid;
    double max_f1_drop = 0.03;  // stage-1 constraint, F1 as a fraction
    double lambda = 1.0;        // stage-3 weight on F1 loss
    ScoringStrategy strategy = ScoringStrategy::image_attention;
    ApplyTo apply_to = ApplyTo::all_text_queries;
};

SearchSpace search_space_from_json(const nlohmann::json& j);

// Prefixes {1..L0} and suffixes {L0..L} for L0 in {L/2, 5L/8, 3L/4, L}.
std::vector<LayerRange> default_layer_candidates(std::size_t n_layers);

struct SweepPoint {
    int stage = 0;
    SpinConfig config;
    EvalSummary eval;
    bool feasible = true;  // stage 1: F1 drop within max_f1_drop
    double objective = 0.0;
};

struct SweepResult {
    EvalSummary baseline;
    std::vector<SweepPoint> points;
    SpinConfig stage1;
    SpinConfig stage2;
    SpinConfig stage3;  // final selection
};

using SweepEvaluator = std::function<EvalSummary(const SpinConfig&)>;

// Stage 1: sweep r with alpha = 0 over every layer; lowest C_s among points
// whose F1 drop is within max_f1_drop (smallest drop if none qualify).
// Stage 2: fix r, sweep layer ranges; lowest C_s. Stage 3: fix both, sweep
// alpha; lowest C_s + lambda * (F1_baseline - F1). Ties keep grid order.
SweepResult tune_three_stage(const SweepEvaluator& evaluate, const EvalSummary& baseline,
                             const SearchSpace& space, std::size_t n_layers);

nlohmann::json to_json(const SweepResult& r);

}  // namespace spin
