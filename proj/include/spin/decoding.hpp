#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "spin/model.hpp"
#include "spin/rng.hpp"
#include "spin/spin.hpp"

namespace spin {

enum class DecodeStrategy { greedy, beam, nucleus };

std::string_view to_string(DecodeStrategy s);
DecodeStrategy parse_decode_strategy(std::string_view tag);

struct DecodeConfig {
    DecodeStrategy strategy = DecodeStrategy::greedy;
    std::size_t beam_width = 5;
    double nucleus_p = 0.9;
    double repetition_penalty = 1.0;
    std::size_t max_new_tokens = 64;
    TokenId eos_id = 1;
    std::uint64_t seed = 0;

    // Throws ConfigValueError keyed "decode.<field>".
    void validate() const;
    friend bool operator==(const DecodeConfig&, const DecodeConfig&) = default;
};

nlohmann::json to_json(const DecodeConfig& c);
DecodeConfig decode_config_from_json(const nlohmann::json& j, const std::string& prefix = "decode");

struct GenerationResult {
    std::vector<TokenId> tokens;  // includes eos when generation stopped on it
    std::string text;             // filled by callers that own a token table
    double prefill_latency_s = 0.0;
    std::vector<double> step_latency_s;  // one sample per emitted token
    bool hit_eos = false;
    bool overflow = false;  // stopped because the context reached max_seq_len
    double score = 0.0;     // beam: length-normalised log-prob of the returned beam
    // beam: per step, cumulative log-probs of the surviving beams in rank order
    std::vector<std::vector<double>> beam_history;

    std::size_t new_tokens() const { return tokens.size(); }
    double decode_latency_s() const;
};

// One generation stream: the logits for the next token plus whatever state
// produced them.
class SequenceState {
public:
    virtual ~SequenceState() = default;
    virtual std::span<const float> logits() const = 0;
    virtual bool can_append() const = 0;
    // Feeds a generated token and recomputes logits.
    virtual void append(TokenId token) = 0;
    virtual std::unique_ptr<SequenceState> clone() const = 0;
};

class SequenceModel {
public:
    virtual ~SequenceModel() = default;
    // Prefills the prompt. `stream` labels mask traces.
    virtual std::unique_ptr<SequenceState> start(const MultimodalPrompt& prompt,
                                                 std::string_view stream) const = 0;
};

using HookFactory = std::function<std::unique_ptr<StepHook>(std::string_view stream)>;

// Runs every StepHook in order; the last hook that supplies a mask wins.
class HookChain : public StepHook {
public:
    explicit HookChain(std::vector<std::unique_ptr<StepHook>> hooks) : hooks_(std::move(hooks)) {}
    void begin_step(const StepContext& ctx) override;
    bool layer_mask(const LayerAttention& attn, HeadMask& mask) override;
    void end_step() override;
    std::unique_ptr<StepHook> clone() const override;

private:
    std::vector<std::unique_ptr<StepHook>> hooks_;
};

// The transformer, optionally with SPIN head suppression installed.
class EngineModel : public SequenceModel {
public:
    explicit EngineModel(const Model& model, HookFactory hooks = nullptr);
    EngineModel(const Model& model, const SpinConfig& spin, std::shared_ptr<MaskSink> sink = nullptr);

    std::unique_ptr<SequenceState> start(const MultimodalPrompt& prompt,
                                         std::string_view stream) const override;
    const Model& model() const { return model_; }

private:
    const Model& model_;
    HookFactory hooks_;
};

// Two full forward passes per step: one on the prompt, one with the vision
// embeddings zeroed; logits are (1 + w) * l_image - w * l_blind. Stands in
// for contrastive-decoding baselines when measuring throughput.
class ContrastiveModel : public SequenceModel {
public:
    ContrastiveModel(const Model& model, float weight = 1.0f) : model_(model), weight_(weight) {}
    std::unique_ptr<SequenceState> start(const MultimodalPrompt& prompt,
                                         std::string_view stream) const override;

private:
    const Model& model_;
    float weight_;
};

// For every token id present in `generated`: z -> z / penalty when z > 0,
// z -> z * penalty otherwise.
void apply_repetition_penalty(std::span<float> logits, std::span<const TokenId> generated,
                              float penalty);

// Highest logit, lowest id on ties.
TokenId argmax(std::span<const float> logits);

// Minimal prefix of ids ordered by (logit desc, id asc) whose probability
// mass reaches p (all ids when rounding keeps the total below p).
std::vector<TokenId> nucleus_set(std::span<const float> probs, std::span<const float> logits,
                                 float p);

// Draws from the renormalised nucleus with one uniform_float() of `rng`.
TokenId sample_nucleus(std::span<const float> logits, float p, SplitMix64& rng);

GenerationResult decode_greedy(const SequenceModel& model, const MultimodalPrompt& prompt,
                               const DecodeConfig& config, std::string_view stream = {});
GenerationResult decode_beam(const SequenceModel& model, const MultimodalPrompt& prompt,
                             const DecodeConfig& config, std::string_view stream = {});
GenerationResult decode_nucleus(const SequenceModel& model, const MultimodalPrompt& prompt,
                                const DecodeConfig& config, std::string_view stream = {});
// Dispatches on config.strategy.
GenerationResult decode(const SequenceModel& model, const MultimodalPrompt& prompt,
                        const DecodeConfig& config, std::string_view stream = {});

}  // namespace spin
