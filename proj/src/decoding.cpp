#include "spin/decoding.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_set>

#include "spin/errors.hpp"
#include "spin/kernels.hpp"

namespace spin {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

class EngineState : public SequenceState {
public:
    EngineState(const Model& model, std::unique_ptr<StepHook> hook)
        : model_(&model), cache_(model.new_cache()), hook_(std::move(hook)) {}

    EngineState(const EngineState& other)
        : model_(other.model_),
          cache_(other.cache_),
          hook_(other.hook_ ? other.hook_->clone() : nullptr),
          vision_(other.vision_),
          logits_(other.logits_) {}

    void prefill(const MultimodalPrompt& prompt) {
        vision_ = prompt.span;
        logits_ = model_->prefill(prompt, cache_, hook_.get());
    }

    std::span<const float> logits() const override { return logits_; }

    bool can_append() const override { return cache_.length() < model_->config().max_seq_len; }

    void append(TokenId token) override {
        StepContext ctx;
        ctx.position = cache_.length();
        ctx.kind = PositionKind::generated;
        ctx.vision = vision_;
        ctx.produces_output = true;
        logits_ = model_->forward_step(model_->token_embedding(token), ctx, cache_, hook_.get());
    }

    std::unique_ptr<SequenceState> clone() const override {
        return std::make_unique<EngineState>(*this);
    }

private:
    const Model* model_;
    KvCache cache_;
    std::unique_ptr<StepHook> hook_;
    VisionSpan vision_;
    std::vector<float> logits_;
};

class ContrastiveState : public SequenceState {
public:
    ContrastiveState(std::unique_ptr<SequenceState> image, std::unique_ptr<SequenceState> blind,
                     float weight)
        : image_(std::move(image)), blind_(std::move(blind)), weight_(weight) {
        combine();
    }

    std::span<const float> logits() const override { return logits_; }
    bool can_append() const override { return image_->can_append() && blind_->can_append(); }

    void append(TokenId token) override {
        image_->append(token);
        blind_->append(token);
        combine();
    }

    std::unique_ptr<SequenceState> clone() const override {
        return std::make_unique<ContrastiveState>(image_->clone(), blind_->clone(), weight_);
    }

private:
    void combine() {
        const auto a = image_->logits();
        const auto b = blind_->logits();
        logits_.resize(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            logits_[i] = (1.0f + weight_) * a[i] - weight_ * b[i];
        }
    }

    std::unique_ptr<SequenceState> image_;
    std::unique_ptr<SequenceState> blind_;
    float weight_;
    std::vector<float> logits_;
};

std::vector<float> penalised_logits(const SequenceState& state, std::span<const TokenId> generated,
                                    const DecodeConfig& config) {
    std::vector<float> logits(state.logits().begin(), state.logits().end());
    apply_repetition_penalty(logits, generated, static_cast<float>(config.repetition_penalty));
    return logits;
}

std::vector<float> softmax_copy(std::span<const float> logits) {
    std::vector<float> p(logits.begin(), logits.end());
    kernels::softmax(p);
    return p;
}

// Shared loop for the single-stream strategies.
template <typename Pick>
GenerationResult decode_single(const SequenceModel& model, const MultimodalPrompt& prompt,
                               const DecodeConfig& config, std::string_view stream, Pick pick) {
    config.validate();
    GenerationResult result;
    const auto t0 = Clock::now();
    auto state = model.start(prompt, stream);
    result.prefill_latency_s = seconds_since(t0);

    while (result.tokens.size() < config.max_new_tokens) {
        const auto ts = Clock::now();
        const auto logits = penalised_logits(*state, result.tokens, config);
        const TokenId token = pick(std::span<const float>(logits));
        result.tokens.push_back(token);
        if (token == config.eos_id) {
            result.hit_eos = true;
        } else if (result.tokens.size() < config.max_new_tokens) {
            if (!state->can_append()) {
                result.overflow = true;
            } else {
                state->append(token);
            }
        }
        result.step_latency_s.push_back(seconds_since(ts));
        if (result.hit_eos || result.overflow) break;
    }
    return result;
}

}  // namespace

std::string_view to_string(DecodeStrategy s) {
    switch (s) {
        case DecodeStrategy::greedy: return "greedy";
        case DecodeStrategy::beam: return "beam";
        case DecodeStrategy::nucleus: return "nucleus";
    }
    return "?";
}

DecodeStrategy parse_decode_strategy(std::string_view tag) {
    for (auto s : {DecodeStrategy::greedy, DecodeStrategy::beam, DecodeStrategy::nucleus}) {
        if (to_string(s) == tag) return s;
    }
    throw ConfigValueError("decode.strategy", "unknown decoding strategy '" + std::string(tag) + "'");
}

void DecodeConfig::validate() const {
    if (beam_width < 1) throw ConfigValueError("decode.beam_width", "must be >= 1");
    if (!(nucleus_p > 0.0 && nucleus_p <= 1.0)) {
        throw ConfigValueError("decode.nucleus_p", "must satisfy 0 < p <= 1");
    }
    if (!(repetition_penalty >= 1.0)) {
        throw ConfigValueError("decode.repetition_penalty", "must be >= 1");
    }
    if (max_new_tokens < 1) throw ConfigValueError("decode.max_new_tokens", "must be >= 1");
}

nlohmann::json to_json(const DecodeConfig& c) {
    return {{"strategy", to_string(c.strategy)},
            {"beam_width", c.beam_width},
            {"nucleus_p", c.nucleus_p},
            {"repetition_penalty", c.repetition_penalty},
            {"max_new_tokens", c.max_new_tokens},
            {"eos_id", c.eos_id},
            {"seed", c.seed}};
}

DecodeConfig decode_config_from_json(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) throw ConfigValueError(prefix, "expected an object");
    static const std::set<std::string> known = {"strategy", "beam_width", "nucleus_p",
                                                "repetition_penalty", "max_new_tokens",
                                                "eos_id", "seed"};
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigValueError(prefix + "." + key, "unknown key");
    }
    DecodeConfig c;
    auto count = [&](const char* key, auto& out) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_number_integer() || v.get<long long>() < 0) {
            throw ConfigValueError(prefix + "." + key, "expected a non-negative integer");
        }
        out = v.get<std::remove_reference_t<decltype(out)>>();
    };
    auto real = [&](const char* key, double& out) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number()) throw ConfigValueError(prefix + "." + key, "expected a number");
        out = j.at(key).get<double>();
    };
    if (j.contains("strategy")) {
        if (!j.at("strategy").is_string()) {
            throw ConfigValueError(prefix + ".strategy", "expected a string");
        }
        try {
            c.strategy = parse_decode_strategy(j.at("strategy").get<std::string>());
        } catch (const ConfigValueError&) {
            throw ConfigValueError(prefix + ".strategy", "unknown decoding strategy");
        }
    }
    count("beam_width", c.beam_width);
    real("nucleus_p", c.nucleus_p);
    real("repetition_penalty", c.repetition_penalty);
    count("max_new_tokens", c.max_new_tokens);
    count("eos_id", c.eos_id);
    count("seed", c.seed);
    try {
        c.validate();
    } catch (const ConfigValueError& e) {
        const std::string field = e.key().substr(e.key().find('.') + 1);
        throw ConfigValueError(prefix + "." + field, std::string(e.what()).substr(e.key().size() + 2));
    }
    return c;
}

double GenerationResult::decode_latency_s() const {
    return std::accumulate(step_latency_s.begin(), step_latency_s.end(), 0.0);
}

void HookChain::begin_step(const StepContext& ctx) {
    for (auto& h : hooks_) h->begin_step(ctx);
}

bool HookChain::layer_mask(const LayerAttention& attn, HeadMask& mask) {
    bool any = false;
    for (auto& h : hooks_) any = h->layer_mask(attn, mask) || any;
    return any;
}

void HookChain::end_step() {
    for (auto& h : hooks_) h->end_step();
}

std::unique_ptr<StepHook> HookChain::clone() const {
    std::vector<std::unique_ptr<StepHook>> copies;
    for (const auto& h : hooks_) copies.push_back(h->clone());
    return std::make_unique<HookChain>(std::move(copies));
}

EngineModel::EngineModel(const Model& model, HookFactory hooks)
    : model_(model), hooks_(std::move(hooks)) {}

EngineModel::EngineModel(const Model& model, const SpinConfig& spin, std::shared_ptr<MaskSink> sink)
    : model_(model) {
    spin.validate(model.config().n_layers);
    const auto layers = model.config().n_layers;
    const auto heads = model.config().n_heads;
    hooks_ = [spin, layers, heads, sink](std::string_view stream) -> std::unique_ptr<StepHook> {
        return std::make_unique<SpinHook>(spin, layers, heads, sink, std::string(stream));
    };
}

std::unique_ptr<SequenceState> EngineModel::start(const MultimodalPrompt& prompt,
                                                  std::string_view stream) const {
    auto state = std::make_unique<EngineState>(model_, hooks_ ? hooks_(stream) : nullptr);
    state->prefill(prompt);
    return state;
}

std::unique_ptr<SequenceState> ContrastiveModel::start(const MultimodalPrompt& prompt,
                                                       std::string_view) const {
    auto image = std::make_unique<EngineState>(model_, nullptr);
    image->prefill(prompt);
    MultimodalPrompt blind = prompt;
    std::fill(blind.vision.begin(), blind.vision.end(), 0.0f);
    auto blind_state = std::make_unique<EngineState>(model_, nullptr);
    blind_state->prefill(blind);
    return std::make_unique<ContrastiveState>(std::move(image), std::move(blind_state), weight_);
}

void apply_repetition_penalty(std::span<float> logits, std::span<const TokenId> generated,
                              float penalty) {
    if (penalty == 1.0f) return;
    std::unordered_set<TokenId> seen(generated.begin(), generated.end());
    for (TokenId t : seen) {
        if (t >= logits.size()) continue;
        float& z = logits[t];
        z = z > 0.0f ? z / penalty : z * penalty;
    }
}

TokenId argmax(std::span<const float> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
}

std::vector<TokenId> nucleus_set(std::span<const float> probs, std::span<const float> logits,
                                 float p) {
    std::vector<TokenId> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
    float mass = 0.0f;
    std::size_t n = 0;
    while (n < order.size()) {
        mass += probs[order[n]];
        ++n;
        if (mass >= p) break;
    }
    order.resize(n);
    return order;
}

TokenId sample_nucleus(std::span<const float> logits, float p, SplitMix64& rng) {
    const auto probs = softmax_copy(logits);
    const auto set = nucleus_set(probs, logits, p);
    float total = 0.0f;
    for (TokenId t : set) total += probs[t];
    const float u = rng.uniform_float() * total;
    float acc = 0.0f;
    for (TokenId t : set) {
        acc += probs[t];
        if (u < acc) return t;
    }
    return set.back();
}

GenerationResult decode_greedy(const SequenceModel& model, const MultimodalPrompt& prompt,
                               const DecodeConfig& config, std::string_view stream) {
    return decode_single(model, prompt, config, stream,
                         [](std::span<const float> logits) { return argmax(logits); });
}

GenerationResult decode_nucleus(const SequenceModel& model, const MultimodalPrompt& prompt,
                                const DecodeConfig& config, std::string_view stream) {
    SplitMix64 rng(config.seed);
    const auto p = static_cast<float>(config.nucleus_p);
    return decode_single(model, prompt, config, stream, [&](std::span<const float> logits) {
        return sample_nucleus(logits, p, rng);
    });
}

GenerationResult decode_beam(const SequenceModel& model, const MultimodalPrompt& prompt,
                             const DecodeConfig& config, std::string_view stream) {
    config.validate();
    struct Beam {
        std::unique_ptr<SequenceState> state;
        std::vector<TokenId> tokens;
        double logprob = 0.0;
    };
    struct Candidate {
        std::size_t beam;
        TokenId token;
        double logprob;
    };
    struct Finished {
        std::vector<TokenId> tokens;
        double logprob;
        bool eos;
    };
    auto normalised = [](double logprob, std::size_t len) {
        return logprob / static_cast<double>(std::max<std::size_t>(len, 1));
    };

    GenerationResult result;
    const auto t0 = Clock::now();
    std::vector<Beam> live;
    live.push_back({model.start(prompt, stream), {}, 0.0});
    result.prefill_latency_s = seconds_since(t0);

    const std::size_t width = config.beam_width;
    std::vector<Finished> finished;
    bool stopped_early = false;

    for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
        const auto ts = Clock::now();
        std::vector<Candidate> candidates;
        for (std::size_t b = 0; b < live.size(); ++b) {
            const auto logits = penalised_logits(*live[b].state, live[b].tokens, config);
            double mx = logits[0];
            for (float z : logits) mx = std::max(mx, static_cast<double>(z));
            double sum = 0.0;
            for (float z : logits) sum += std::exp(static_cast<double>(z) - mx);
            const double lse = mx + std::log(sum);

            std::vector<TokenId> ids(logits.size());
            std::iota(ids.begin(), ids.end(), 0);
            const std::size_t take = std::min(ids.size(), 2 * width);
            std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take), ids.end(),
                              [&](TokenId a, TokenId c) {
                                  if (logits[a] != logits[c]) return logits[a] > logits[c];
                                  return a < c;
                              });
            for (std::size_t i = 0; i < take; ++i) {
                const TokenId t = ids[i];
                candidates.push_back({b, t, live[b].logprob + (static_cast<double>(logits[t]) - lse)});
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Candidate& a, const Candidate& c) { return a.logprob > c.logprob; });

        std::vector<Candidate> next;
        for (const auto& c : candidates) {
            if (c.token == config.eos_id) {
                auto tokens = live[c.beam].tokens;
                tokens.push_back(c.token);
                finished.push_back({std::move(tokens), c.logprob, true});
            } else {
                next.push_back(c);
            }
            if (next.size() == width) break;
        }

        std::vector<double> ranked;
        for (const auto& c : next) ranked.push_back(c.logprob);
        result.beam_history.push_back(std::move(ranked));

        const bool last_step = step + 1 == config.max_new_tokens;
        bool overflow = false;
        for (const auto& c : next) {
            if (!live[c.beam].state->can_append()) overflow = true;
        }
        if (finished.size() >= width || next.empty()) {
            stopped_early = true;
        } else if (last_step || overflow) {
            for (const auto& c : next) {
                auto tokens = live[c.beam].tokens;
                tokens.push_back(c.token);
                finished.push_back({std::move(tokens), c.logprob, false});
            }
            result.overflow = overflow && !last_step;
        } else {
            // The first child of a parent reuses its state; later ones clone it.
            std::vector<bool> taken(live.size(), false);
            std::vector<Beam> children(next.size());
            for (std::size_t i = next.size(); i-- > 0;) {
                const auto& c = next[i];
                bool first_use = true;
                for (std::size_t k = 0; k < i; ++k) {
                    if (next[k].beam == c.beam) first_use = false;
                }
                children[i].tokens = live[c.beam].tokens;
                children[i].tokens.push_back(c.token);
                children[i].logprob = c.logprob;
                if (first_use && !taken[c.beam]) {
                    children[i].state = std::move(live[c.beam].state);
                    taken[c.beam] = true;
                } else {
                    children[i].state = live[c.beam].state->clone();
                }
            }
            for (std::size_t i = 0; i < children.size(); ++i) children[i].state->append(next[i].token);
            live = std::move(children);
        }
        result.step_latency_s.push_back(seconds_since(ts));
        if (stopped_early || last_step || result.overflow) break;
    }

    std::size_t best = 0;
    for (std::size_t i = 1; i < finished.size(); ++i) {
        if (normalised(finished[i].logprob, finished[i].tokens.size()) >
            normalised(finished[best].logprob, finished[best].tokens.size())) {
            best = i;
        }
    }
    if (!finished.empty()) {
        result.tokens = finished[best].tokens;
        result.hit_eos = finished[best].eos;
        result.score = normalised(finished[best].logprob, finished[best].tokens.size());
    }
    // Latency samples are per emitted token of the returned beam.
    const double total = result.decode_latency_s();
    const std::size_t n = std::max<std::size_t>(result.tokens.size(), 1);
    result.step_latency_s.assign(n, total / static_cast<double>(n));
    if (result.tokens.empty()) result.step_latency_s.clear();
    return result;
}

GenerationResult decode(const SequenceModel& model, const MultimodalPrompt& prompt,
                        const DecodeConfig& config, std::string_view stream) {
    switch (config.strategy) {
        case DecodeStrategy::greedy: return decode_greedy(model, prompt, config, stream);
        case DecodeStrategy::beam: return decode_beam(model, prompt, config, stream);
        case DecodeStrategy::nucleus: return decode_nucleus(model, prompt, config, stream);
    }
    throw ConfigError("unknown decoding strategy");
}

}  // namespace spin
