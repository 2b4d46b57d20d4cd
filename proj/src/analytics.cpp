#include "spin/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "spin/errors.hpp"

namespace spin {

AttentionProfile ProfileAccumulator::finish() const {
    AttentionProfile p;
    p.steps = steps;
    p.n_heads = n_heads;
    const double denom = static_cast<double>(steps) * static_cast<double>(n_heads);
    for (std::size_t l = 0; l < vision_sum.size(); ++l) {
        p.layers.push_back({steps ? vision_sum[l] / denom : 0.0, steps ? text_sum[l] / denom : 0.0});
    }
    return p;
}

AttentionProfiler::AttentionProfiler(std::shared_ptr<ProfileAccumulator> acc, std::size_t n_layers,
                                     std::size_t n_heads)
    : acc_(std::move(acc)) {
    if (acc_->vision_sum.empty()) {
        acc_->vision_sum.assign(n_layers, 0.0);
        acc_->text_sum.assign(n_layers, 0.0);
        acc_->n_heads = n_heads;
    }
}

void AttentionProfiler::begin_step(const StepContext& ctx) {
    active_ = ctx.produces_output;
}

bool AttentionProfiler::layer_mask(const LayerAttention& attn, HeadMask&) {
    if (!active_) return false;
    const VisionSpan span = attn.step.vision;
    double vision = 0.0, text = 0.0;
    for (std::size_t h = 0; h < attn.n_heads; ++h) {
        const auto p = attn.head_probs(h);
        for (std::size_t j = 0; j < attn.seq_len; ++j) {
            (span.contains(j) ? vision : text) += p[j];
        }
    }
    acc_->vision_sum[attn.layer] += vision;
    acc_->text_sum[attn.layer] += text;
    return false;
}

void AttentionProfiler::end_step() {
    if (active_) ++acc_->steps;
    active_ = false;
}

std::unique_ptr<StepHook> AttentionProfiler::clone() const {
    return std::make_unique<AttentionProfiler>(*this);
}

AttentionProfile profile_attention(const Model& model, std::span<const MultimodalPrompt> prompts,
                                   const DecodeConfig& decode_config, const std::optional<SpinConfig>& spin) {
    if (prompts.empty()) throw DataError("attention profile needs at least one prompt");
    const auto& cfg = model.config();
    auto acc = std::make_shared<ProfileAccumulator>();
    if (spin) spin->validate(cfg.n_layers);
    EngineModel engine(model, [&](std::string_view stream) -> std::unique_ptr<StepHook> {
        std::vector<std::unique_ptr<StepHook>> hooks;
        hooks.push_back(std::make_unique<AttentionProfiler>(acc, cfg.n_layers, cfg.n_heads));
        if (spin) {
            hooks.push_back(std::make_unique<SpinHook>(*spin, cfg.n_layers, cfg.n_heads, nullptr,
                                                       std::string(stream)));
        }
        return std::make_unique<HookChain>(std::move(hooks));
    });
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        decode(engine, prompts[i], decode_config, "profile-" + std::to_string(i));
    }
    return acc->finish();
}

AttentionProfile merge_profiles(std::span<const AttentionProfile> parts) {
    AttentionProfile out;
    if (parts.empty()) return out;
    out.layers.assign(parts.front().layers.size(), {});
    out.n_heads = parts.front().n_heads;
    for (const auto& p : parts) {
        if (p.layers.size() != out.layers.size()) throw DataError("profiles disagree on layer count");
        out.steps += p.steps;
    }
    if (out.steps == 0) return out;
    for (const auto& p : parts) {
        const double w = static_cast<double>(p.steps) / static_cast<double>(out.steps);
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            out.layers[l].vision += w * p.layers[l].vision;
            out.layers[l].text += w * p.layers[l].text;
        }
    }
    return out;
}

nlohmann::json to_json(const AttentionProfile& p) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        layers.push_back({{"layer", l + 1}, {"vision", p.layers[l].vision}, {"text", p.layers[l].text}});
    }
    return {{"steps", p.steps}, {"n_heads", p.n_heads}, {"layers", layers}};
}

std::string profile_to_csv(const AttentionProfile& p) {
    std::ostringstream out;
    out.precision(17);
    out << "layer,head,value\n";
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        out << l + 1 << ",vision," << p.layers[l].vision << "\n";
        out << l + 1 << ",text," << p.layers[l].text << "\n";
    }
    return out.str();
}

std::vector<MaskStep> read_mask_trace(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open mask trace " + path.string());
    std::vector<MaskStep> steps;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        try {
            steps.push_back(mask_step_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string(), n, e.what());
        } catch (const DataError& e) {
            throw DataError(path.string(), n, e.what());
        }
    }
    return steps;
}

MaskHeatmap aggregate_masks(std::span<const MaskStep> steps) {
    if (steps.empty()) throw DataError("no traced steps to aggregate");
    MaskHeatmap h;
    h.n_layers = steps.front().kept.size();
    h.n_heads = h.n_layers ? steps.front().kept.front().size() : 0;
    if (h.n_layers == 0 || h.n_heads == 0) throw DataError("traced step has an empty mask");
    h.kept.assign(h.n_layers * h.n_heads, 0);
    for (const auto& s : steps) {
        if (s.kept.size() != h.n_layers) {
            throw DataError("traced step has " + std::to_string(s.kept.size()) + " layers, expected " +
                            std::to_string(h.n_layers));
        }
        for (std::size_t l = 0; l < h.n_layers; ++l) {
            if (s.kept[l].size() != h.n_heads) {
                throw DataError("traced step has " + std::to_string(s.kept[l].size()) +
                                " heads, expected " + std::to_string(h.n_heads));
            }
            for (std::size_t i = 0; i < h.n_heads; ++i) h.kept[l * h.n_heads + i] += s.kept[l][i] ? 1 : 0;
        }
        ++h.steps;
    }
    return h;
}

MaskHeatmap aggregate_mask_traces(std::span<const std::filesystem::path> traces) {
    std::vector<MaskStep> all;
    for (const auto& p : traces) {
        auto steps = read_mask_trace(p);
        all.insert(all.end(), std::make_move_iterator(steps.begin()), std::make_move_iterator(steps.end()));
    }
    return aggregate_masks(all);
}

nlohmann::json to_json(const MaskHeatmap& h) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t l = 0; l < h.n_layers; ++l) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t i = 0; i < h.n_heads; ++i) row.push_back(h.value(l, i));
        rows.push_back(row);
    }
    return {{"n_layers", h.n_layers}, {"n_heads", h.n_heads}, {"steps", h.steps}, {"kept_fraction", rows}};
}

std::string heatmap_to_csv(const MaskHeatmap& h) {
    std::ostringstream out;
    out.precision(17);
    out << "layer,head,value\n";
    for (std::size_t l = 0; l < h.n_layers; ++l) {
        for (std::size_t i = 0; i < h.n_heads; ++i) out << l + 1 << "," << i << "," << h.value(l, i) << "\n";
    }
    return out.str();
}

std::vector<LayerRange> default_layer_candidates(std::size_t n_layers) {
    std::vector<LayerRange> out;
    auto add = [&](LayerRange r) {
        if (std::find(out.begin(), out.end(), r) == out.end()) out.push_back(r);
    };
    const double L = static_cast<double>(n_layers);
    std::vector<std::size_t> cuts;
    for (double f : {0.5, 0.625, 0.75, 1.0}) {
        cuts.push_back(std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(f * L)), 1, n_layers));
    }
    for (auto c : cuts) add({1, c});
    for (auto c : cuts) add({c, n_layers});
    return out;
}

SearchSpace search_space_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"r", "layer_ranges", "alpha", "max_f1_drop",
                                                "lambda", "strategy", "apply_to"};
    if (!j.is_object()) throw ConfigValueError("space", "expected an object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigValueError("space." + key, "unknown key");
    }
    SearchSpace s;
    try {
        s.r_grid = j.at("r").get<std::vector<double>>();
        s.alpha_grid = j.at("alpha").get<std::vector<double>>();
        if (j.contains("layer_ranges")) {
            for (const auto& lr : j.at("layer_ranges")) {
                s.layer_ranges.push_back({lr.at(0).get<std::size_t>(), lr.at(1).get<std::size_t>()});
            }
        }
        if (j.contains("max_f1_drop")) s.max_f1_drop = j.at("max_f1_drop").get<double>();
        if (j.contains("lambda")) s.lambda = j.at("lambda").get<double>();
        if (j.contains("strategy")) s.strategy = parse_strategy(j.at("strategy").get<std::string>());
        if (j.contains("apply_to")) s.apply_to = parse_apply_to(j.at("apply_to").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigValueError("space", e.what());
    }
    return s;
}

// Absorbs rounding in F1 differences that land exactly on the threshold.
constexpr double kDropSlack = 1e-9;

SweepResult tune_three_stage(const SweepEvaluator& evaluate, const EvalSummary& baseline,
                             const SearchSpace& space, std::size_t n_layers) {
    if (space.r_grid.empty()) throw ConfigValueError("space.r", "grid is empty");
    if (space.alpha_grid.empty()) throw ConfigValueError("space.alpha", "grid is empty");
    const auto ranges = space.layer_ranges.empty() ? default_layer_candidates(n_layers) : space.layer_ranges;
    if (ranges.empty()) throw ConfigValueError("space.layer_ranges", "grid is empty");

    SweepResult result;
    result.baseline = baseline;
    std::map<std::string, EvalSummary> memo;
    auto run = [&](int stage, const SpinConfig& c) -> SweepPoint& {
        c.validate(n_layers);
        const std::string key = to_json(c).dump();
        auto it = memo.find(key);
        if (it == memo.end()) it = memo.emplace(key, evaluate(c)).first;
        SweepPoint p;
        p.stage = stage;
        p.config = c;
        p.eval = it->second;
        result.points.push_back(p);
        return result.points.back();
    };
    auto base_config = [&] {
        SpinConfig c;
        c.strategy = space.strategy;
        c.apply_to = space.apply_to;
        c.alpha = 0.0;
        c.layers = LayerRange{1, n_layers};
        return c;
    };

    // Stage 1
    std::optional<SweepPoint> best;
    std::optional<SweepPoint> least_drop;
    for (double r : space.r_grid) {
        SpinConfig c = base_config();
        c.r = r;
        SweepPoint& p = run(1, c);
        const double drop = baseline.f1 - p.eval.f1;
        p.feasible = drop <= space.max_f1_drop + kDropSlack;
        p.objective = p.eval.cs;
        if (p.feasible && (!best || p.eval.cs < best->eval.cs)) best = p;
        if (!least_drop || drop < baseline.f1 - least_drop->eval.f1) least_drop = p;
    }
    result.stage1 = (best ? *best : *least_drop).config;

    // Stage 2
    best.reset();
    for (const auto& lr : ranges) {
        SpinConfig c = result.stage1;
        c.layers = lr;
        SweepPoint& p = run(2, c);
        p.objective = p.eval.cs;
        if (!best || p.eval.cs < best->eval.cs) best = p;
    }
    result.stage2 = best->config;

    // Stage 3
    best.reset();
    for (double a : space.alpha_grid) {
        SpinConfig c = result.stage2;
        c.alpha = a;
        SweepPoint& p = run(3, c);
        p.objective = p.eval.cs + space.lambda * (baseline.f1 - p.eval.f1);
        if (!best || p.objective < best->objective) best = p;
    }
    result.stage3 = best->config;
    return result;
}

nlohmann::json to_json(const SweepResult& r) {
    auto summary = [](const EvalSummary& e) {
        return nlohmann::json{{"cs", e.cs}, {"ci", e.ci}, {"f1", e.f1}};
    };
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : r.points) {
        points.push_back({{"stage", p.stage},
                          {"config", to_json(p.config)},
                          {"eval", summary(p.eval)},
                          {"feasible", p.feasible},
                          {"objective", p.objective}});
    }
    return {{"baseline", summary(r.baseline)},
            {"points", points},
            {"selected", {{"stage1", to_json(r.stage1)},
                          {"stage2", to_json(r.stage2)},
                          {"stage3", to_json(r.stage3)}}}};
}

}  // namespace spin
