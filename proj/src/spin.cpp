#include "spin/spin.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "spin/errors.hpp"
#include "spin/kernels.hpp"

namespace spin {

std::string_view to_string(ScoringStrategy s) {
    switch (s) {
        case ScoringStrategy::image_attention: return "image_attention";
        case ScoringStrategy::total_attention: return "total_attention";
        case ScoringStrategy::query_norm: return "query_norm";
        case ScoringStrategy::key_norm: return "key_norm";
    }
    return "?";
}

std::string_view to_string(ApplyTo a) {
    return a == ApplyTo::all_text_queries ? "all_text_queries" : "generated_text_queries_only";
}

ScoringStrategy parse_strategy(std::string_view tag) {
    for (auto s : {ScoringStrategy::image_attention, ScoringStrategy::total_attention,
                   ScoringStrategy::query_norm, ScoringStrategy::key_norm}) {
        if (to_string(s) == tag) return s;
    }
    throw ConfigValueError("spin.strategy", "unknown scoring strategy '" + std::string(tag) + "'");
}

ApplyTo parse_apply_to(std::string_view tag) {
    if (tag == "all_text_queries") return ApplyTo::all_text_queries;
    if (tag == "generated_text_queries_only") return ApplyTo::generated_text_queries_only;
    throw ConfigValueError("spin.apply_to", "unknown value '" + std::string(tag) + "'");
}

std::size_t SpinConfig::kept_heads(std::size_t n_heads) const {
    const auto suppressed = static_cast<long long>(std::llround(r * static_cast<double>(n_heads)));
    const long long k = static_cast<long long>(n_heads) - suppressed;
    return static_cast<std::size_t>(std::clamp<long long>(k, 1, static_cast<long long>(n_heads)));
}

bool SpinConfig::covers_layer(std::size_t layer) const {
    if (!layers) return true;
    return layer + 1 >= layers->lo && layer + 1 <= layers->hi;
}

bool SpinConfig::covers(const StepContext& step) const {
    switch (step.kind) {
        case PositionKind::vision: return false;
        case PositionKind::prompt_text:
            return apply_to == ApplyTo::all_text_queries && step.position >= step.vision.end;
        case PositionKind::generated: return step.position >= step.vision.end;
    }
    return false;
}

void SpinConfig::validate(std::size_t n_layers) const {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigValueError("spin.r", "must satisfy 0 <= r < 1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigValueError("spin.alpha", "must satisfy 0 <= alpha <= 1");
    }
    if (layers) {
        if (layers->lo < 1 || layers->lo > layers->hi || layers->hi > n_layers) {
            throw ConfigValueError("spin.layer_range",
                                   "must satisfy 1 <= lo <= hi <= n_layers (" +
                                       std::to_string(n_layers) + ")");
        }
    }
}

nlohmann::json to_json(const SpinConfig& c) {
    nlohmann::json j = {{"strategy", to_string(c.strategy)},
                        {"r", c.r},
                        {"alpha", c.alpha},
                        {"apply_to", to_string(c.apply_to)},
                        {"post_softmax", c.post_softmax}};
    if (c.layers) j["layer_range"] = {c.layers->lo, c.layers->hi};
    return j;
}

SpinConfig spin_config_from_json(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) throw ConfigValueError(prefix, "expected an object");
    static const std::set<std::string> known = {"strategy", "r", "alpha", "layer_range",
                                                "apply_to", "post_softmax"};
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigValueError(prefix + "." + key, "unknown key");
    }
    SpinConfig c;
    auto number = [&](const char* key) {
        if (!j.contains(key)) throw ConfigValueError(prefix + "." + key, "required");
        if (!j.at(key).is_number()) throw ConfigValueError(prefix + "." + key, "expected a number");
        return j.at(key).get<double>();
    };
    c.r = number("r");
    c.alpha = number("alpha");
    if (!(c.r >= 0.0 && c.r < 1.0)) throw ConfigValueError(prefix + ".r", "must satisfy 0 <= r < 1");
    if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) {
        throw ConfigValueError(prefix + ".alpha", "must satisfy 0 <= alpha <= 1");
    }
    try {
        if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
        if (j.contains("apply_to")) c.apply_to = parse_apply_to(j.at("apply_to").get<std::string>());
        if (j.contains("post_softmax")) c.post_softmax = j.at("post_softmax").get<bool>();
        if (j.contains("layer_range")) {
            const auto& lr = j.at("layer_range");
            if (!lr.is_array() || lr.size() != 2 || !lr[0].is_number_integer() ||
                !lr[1].is_number_integer() || lr[0].get<long long>() < 1) {
                throw ConfigValueError(prefix + ".layer_range", "expected [lo, hi] with lo >= 1");
            }
            c.layers = LayerRange{lr[0].get<std::size_t>(), lr[1].get<std::size_t>()};
            if (c.layers->lo > c.layers->hi) {
                throw ConfigValueError(prefix + ".layer_range", "lo must not exceed hi");
            }
        }
    } catch (const nlohmann::json::type_error& e) {
        throw ConfigValueError(prefix, std::string("wrong value type: ") + e.what());
    } catch (const ConfigValueError& e) {
        if (e.key().rfind(prefix, 0) == 0) throw;
        const std::string field = e.key().substr(e.key().find('.') + 1);
        throw ConfigValueError(prefix + "." + field, std::string(e.what()).substr(e.key().size() + 2));
    }
    return c;
}

float image_attention_score(std::span<const float> query, std::span<const float> keys,
                            VisionSpan span) {
    const std::size_t dk = query.size();
    float sum = 0.0f;
    for (std::size_t j = span.start; j < span.end; ++j) {
        sum += kernels::dot(query.data(), keys.data() + j * dk, dk);
    }
    return sum;
}

std::vector<float> score_heads_image_attention(std::span<const float> queries,
                                               const KvCache& cache, std::size_t layer,
                                               VisionSpan span) {
    if (span.size() == 0 || span.end > cache.length(layer)) {
        throw SpanError("vision span [" + std::to_string(span.start) + ", " +
                        std::to_string(span.end) + ") is outside the " +
                        std::to_string(cache.length(layer)) + " cached rows");
    }
    const std::size_t dk = cache.head_dim();
    std::vector<float> scores(cache.n_heads());
    for (std::size_t h = 0; h < cache.n_heads(); ++h) {
        scores[h] = image_attention_score(queries.subspan(h * dk, dk), cache.keys(layer, h), span);
    }
    return scores;
}

std::vector<float> score_heads_alternative(ScoringStrategy strategy,
                                           std::span<const float> queries,
                                           const KvCache& cache, std::size_t layer) {
    const std::size_t dk = cache.head_dim();
    const std::size_t n = cache.length(layer);
    std::vector<float> scores(cache.n_heads());
    for (std::size_t h = 0; h < cache.n_heads(); ++h) {
        const auto q = queries.subspan(h * dk, dk);
        const auto keys = cache.keys(layer, h);
        switch (strategy) {
            case ScoringStrategy::query_norm: scores[h] = std::sqrt(kernels::dot(q, q)); break;
            case ScoringStrategy::key_norm: {
                float sum = 0.0f;
                for (std::size_t j = 0; j < n; ++j) {
                    const float* k = keys.data() + j * dk;
                    sum += std::sqrt(kernels::dot(k, k, dk));
                }
                scores[h] = n ? sum / static_cast<float>(n) : 0.0f;
                break;
            }
            case ScoringStrategy::total_attention:
                scores[h] = image_attention_score(q, keys, VisionSpan{0, n});
                break;
            case ScoringStrategy::image_attention:
                throw ConfigError("image_attention scoring needs a vision span");
        }
    }
    return scores;
}

std::vector<std::size_t> select_top_k(std::span<const float> scores, std::size_t k) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    k = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

HeadMask build_mask(std::span<const float> scores, const SpinConfig& config, std::size_t layer) {
    HeadMask mask = HeadMask::ones(scores.size());
    if (!config.covers_layer(layer)) return mask;
    const std::size_t k = config.kept_heads(scores.size());
    if (k == scores.size()) return mask;
    std::fill(mask.m.begin(), mask.m.end(), static_cast<float>(config.alpha));
    for (std::size_t h : select_top_k(scores, k)) mask.m[h] = 1.0f;
    return mask;
}

nlohmann::json to_json(const MaskStep& s) {
    static const char* kinds[] = {"vision", "prompt_text", "generated"};
    return {{"stream", s.stream},
            {"position", s.position},
            {"kind", kinds[static_cast<int>(s.kind)]},
            {"alpha", s.alpha},
            {"kept", s.kept}};
}

MaskStep mask_step_from_json(const nlohmann::json& j) {
    MaskStep s;
    s.stream = j.at("stream").get<std::string>();
    s.position = j.at("position").get<std::size_t>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "vision") s.kind = PositionKind::vision;
    else if (kind == "prompt_text") s.kind = PositionKind::prompt_text;
    else if (kind == "generated") s.kind = PositionKind::generated;
    else throw DataError("unknown position kind '" + kind + "'");
    s.alpha = j.at("alpha").get<double>();
    s.kept = j.at("kept").get<std::vector<std::vector<std::uint8_t>>>();
    return s;
}

void MaskRecorder::record(const MaskStep& step) {
    std::lock_guard lock(mu_);
    steps_.push_back(step);
}

std::vector<MaskStep> MaskRecorder::steps() const {
    std::lock_guard lock(mu_);
    return steps_;
}

MaskTraceWriter::MaskTraceWriter(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw Error("cannot open mask trace " + path.string());
}

void MaskTraceWriter::record(const MaskStep& step) {
    const std::string line = to_json(step).dump();
    std::lock_guard lock(mu_);
    out_ << line << '\n';
    out_.flush();
}

SpinHook::SpinHook(SpinConfig config, std::size_t n_layers, std::size_t n_heads,
                   std::shared_ptr<MaskSink> sink, std::string stream)
    : config_(config),
      n_layers_(n_layers),
      n_heads_(n_heads),
      sink_(std::move(sink)),
      stream_(std::move(stream)) {
    config_.validate(n_layers);
}

void SpinHook::begin_step(const StepContext& ctx) {
    active_ = config_.covers(ctx);
    if (active_ && sink_) {
        current_.stream = stream_;
        current_.position = ctx.position;
        current_.kind = ctx.kind;
        current_.alpha = config_.alpha;
        current_.kept.assign(n_layers_, std::vector<std::uint8_t>(n_heads_, 1));
    }
}

std::vector<float> SpinHook::scores(const LayerAttention& attn) const {
    std::vector<float> out(attn.n_heads);
    const VisionSpan span = config_.strategy == ScoringStrategy::image_attention
                                ? attn.step.vision
                                : VisionSpan{0, attn.seq_len};
    switch (config_.strategy) {
        case ScoringStrategy::image_attention:
        case ScoringStrategy::total_attention:
            // Same q.k values the attention kernel produced, summed in index order.
            for (std::size_t h = 0; h < attn.n_heads; ++h) {
                const auto row = config_.post_softmax ? attn.head_probs(h) : attn.head_logits(h);
                float sum = 0.0f;
                for (std::size_t j = span.start; j < span.end; ++j) sum += row[j];
                out[h] = sum;
            }
            return out;
        case ScoringStrategy::query_norm:
        case ScoringStrategy::key_norm:
            return score_heads_alternative(config_.strategy, attn.queries, attn.cache, attn.layer);
    }
    return out;
}

bool SpinHook::layer_mask(const LayerAttention& attn, HeadMask& mask) {
    if (!active_ || !config_.covers_layer(attn.layer)) return false;
    const std::size_t k = config_.kept_heads(n_heads_);
    mask = HeadMask::ones(n_heads_);
    if (k == n_heads_) return true;
    // The trace records the top-K selection itself, so it stays meaningful
    // when alpha == 1.
    std::fill(mask.m.begin(), mask.m.end(), static_cast<float>(config_.alpha));
    if (sink_) std::fill(current_.kept[attn.layer].begin(), current_.kept[attn.layer].end(), 0);
    for (std::size_t h : select_top_k(scores(attn), k)) {
        mask.m[h] = 1.0f;
        if (sink_) current_.kept[attn.layer][h] = 1;
    }
    return true;
}

void SpinHook::end_step() {
    if (active_ && sink_) sink_->record(current_);
    active_ = false;
}

std::unique_ptr<StepHook> SpinHook::clone() const {
    return std::make_unique<SpinHook>(*this);
}

}  // namespace spin
