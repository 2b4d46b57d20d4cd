#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <map>

#include "helpers.hpp"
#include "spin/analytics.hpp"
#include "spin/errors.hpp"
#include "spin/rigged.hpp"

using namespace spin;
using namespace spin::testing;

namespace {

DecodeConfig greedy(std::size_t max_new) {
    DecodeConfig c;
    c.max_new_tokens = max_new;
    c.eos_id = 10000;  // never produced
    return c;
}

struct LastStepProbs : StepHook {
    bool active = false;
    std::vector<float> probs;
    void begin_step(const StepContext& ctx) override { active = ctx.produces_output; }
    bool layer_mask(const LayerAttention& a, HeadMask&) override {
        if (active) probs.assign(a.probs.begin(), a.probs.end());
        return false;
    }
    std::unique_ptr<StepHook> clone() const override { return std::make_unique<LastStepProbs>(*this); }
};

EvalSummary at(double cs, double f1) { return {cs, 0.0, f1}; }

struct StubEvaluator {
    std::map<std::string, EvalSummary> table;
    std::size_t calls = 0;
    static std::string key(const SpinConfig& c) {
        return std::to_string(c.r) + "|" + std::to_string(c.layers->lo) + "-" + std::to_string(c.layers->hi) + "|" +
               std::to_string(c.alpha);
    }
    EvalSummary operator()(const SpinConfig& c) {
        ++calls;
        return table.at(key(c));
    }
};

SpinConfig point(double r, LayerRange lr, double alpha) {
    SpinConfig c;
    c.r = r;
    c.layers = lr;
    c.alpha = alpha;
    return c;
}

}  // namespace

TEST_CASE("uniform attention spreads mass in proportion to position counts") {
    auto c = small_config();
    const auto model = std::make_shared<const Model>(
        std::make_shared<const Checkpoint>(make_uniform_attention_checkpoint(c, 4)));
    const std::size_t n_vision = 19, n_text = 6, max_new = 5;
    const std::vector<MultimodalPrompt> prompts = {random_prompt(c, n_vision, n_text, 2)};
    const auto profile = profile_attention(*model, prompts, greedy(max_new));
    // Steps: last prompt position, then max_new - 1 fed-back tokens.
    CHECK(profile.steps == max_new);
    double expect = 0;
    for (std::size_t s = 0; s < max_new; ++s) expect += double(n_vision) / double(n_vision + n_text + s);
    expect /= max_new;
    for (const auto& layer : profile.layers) {
        CHECK(layer.vision == doctest::Approx(expect).epsilon(1e-6));
        CHECK(layer.vision + layer.text == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("single layer, head and step gives that step's span mass") {
    ModelConfig c = small_config();
    c.n_layers = 1;
    c.n_heads = 1;
    const auto model = make_model(c, 6);
    const auto prompt = random_prompt(c, 5, 4, 8);
    const std::vector<MultimodalPrompt> prompts = {prompt};
    const auto profile = profile_attention(*model, prompts, greedy(1));
    REQUIRE(profile.steps == 1);
    LastStepProbs probe;
    auto cache = model->new_cache();
    model->prefill(prompt, cache, &probe);
    double mass = 0;
    for (std::size_t j = prompt.span.start; j < prompt.span.end; ++j) mass += probe.probs[j];
    CHECK(profile.layers[0].vision == doctest::Approx(mass).epsilon(1e-9));
}

TEST_CASE("profiles over two records are the step-weighted mean") {
    const auto c = small_config();
    const auto model = make_model(c, 6);
    const auto a = random_prompt(c, 6, 3, 1);
    const auto b = random_prompt(c, 4, 7, 2);
    const std::vector<MultimodalPrompt> both = {a, b};
    const std::vector<MultimodalPrompt> only_a = {a};
    const std::vector<MultimodalPrompt> only_b = {b};
    const auto pa = profile_attention(*model, only_a, greedy(3));
    const auto pb = profile_attention(*model, only_b, greedy(6));
    const auto joint = profile_attention(*model, both, greedy(3));
    const std::vector<AttentionProfile> parts = {pa, pb};
    const auto merged = merge_profiles(parts);
    CHECK(merged.steps == 9);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const double expect = (3 * pa.layers[l].vision + 6 * pb.layers[l].vision) / 9;
        CHECK(merged.layers[l].vision == doctest::Approx(expect).epsilon(1e-12));
        CHECK(merged.layers[l].vision + merged.layers[l].text == doctest::Approx(1.0).epsilon(1e-6));
    }
    const auto pb3 = profile_attention(*model, only_b, greedy(3));
    const std::vector<AttentionProfile> same_len = {pa, pb3};
    const auto m3 = merge_profiles(same_len);
    CHECK(joint.steps == 6);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        CHECK(joint.layers[l].vision == doctest::Approx(m3.layers[l].vision).epsilon(1e-9));
    }
}

TEST_CASE("profile rejects an empty corpus and observes without masking") {
    const auto c = small_config();
    const auto model = make_model(c, 6);
    CHECK_THROWS_AS(profile_attention(*model, std::vector<MultimodalPrompt>{}, greedy(2)), DataError);
    const auto prompt = random_prompt(c, 4, 4, 1);
    const EngineModel plain(*model);
    const auto base = decode(plain, prompt, greedy(6));
    auto acc = std::make_shared<ProfileAccumulator>();
    const EngineModel observed(*model, [&](std::string_view) -> std::unique_ptr<StepHook> {
        return std::make_unique<AttentionProfiler>(acc, c.n_layers, c.n_heads);
    });
    CHECK(decode(observed, prompt, greedy(6)).tokens == base.tokens);
    const auto p = acc->finish();
    const auto json = to_json(p);
    CHECK(json["layers"].size() == c.n_layers);
    CHECK(profile_to_csv(p).rfind("layer,head,value\n", 0) == 0);
}

TEST_CASE("heatmap of an r = 0 run is all ones") {
    const auto c = small_config();
    const auto model = make_model(c, 6);
    auto rec = std::make_shared<MaskRecorder>();
    SpinConfig s;
    s.r = 0.0;
    const EngineModel engine(*model, s, rec);
    decode(engine, random_prompt(c, 4, 4, 1), greedy(4), "a");
    const auto steps = rec->steps();
    const auto h = aggregate_masks(steps);
    CHECK(h.steps == steps.size());
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (std::size_t i = 0; i < c.n_heads; ++i) CHECK(h.value(l, i) == 1.0);
    }
}

TEST_CASE("heatmap entries: single steps, layer ranges and merged traces") {
    const auto c = small_config();
    const auto model = make_model(c, 6);
    SpinConfig s;
    s.r = 0.5;
    s.layers = LayerRange{2, 2};
    TempDir dir;
    std::vector<std::filesystem::path> paths;
    std::vector<MaskStep> all;
    for (int run = 0; run < 2; ++run) {
        const auto path = dir / ("t" + std::to_string(run) + ".jsonl");
        {
            auto writer = std::make_shared<MaskTraceWriter>(path);
            const EngineModel engine(*model, s, writer);
            decode(engine, random_prompt(c, 3, 2 + run, run), greedy(3 + 2 * run), "run" + std::to_string(run));
        }
        auto steps = read_mask_trace(path);
        const std::vector<MaskStep> first = {steps.front()};
        const auto single = aggregate_masks(first);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            for (std::size_t i = 0; i < c.n_heads; ++i) CHECK((single.value(l, i) == 0.0 || single.value(l, i) == 1.0));
        }
        all.insert(all.end(), steps.begin(), steps.end());
        paths.push_back(path);
    }
    const auto merged = aggregate_mask_traces(paths);
    CHECK(merged.steps == all.size());
    for (std::size_t i = 0; i < c.n_heads; ++i) {
        std::uint64_t kept = 0;
        for (const auto& st : all) kept += st.kept[1][i];
        CHECK(merged.value(1, i) == double(kept) / double(all.size()));
        CHECK(merged.value(0, i) == 1.0);
    }
    double row = 0;
    for (std::size_t i = 0; i < c.n_heads; ++i) row += merged.value(1, i);
    CHECK(row == doctest::Approx(2.0));  // two of four heads kept per step
    CHECK(heatmap_to_csv(merged).rfind("layer,head,value\n", 0) == 0);
    CHECK(to_json(merged)["kept_fraction"].size() == c.n_layers);
}

TEST_CASE("heatmap rejects mismatched shapes and malformed traces") {
    MaskStep a;
    a.kept = {{1, 0}, {1, 1}};
    MaskStep b;
    b.kept = {{1, 0, 1}, {1, 1, 1}};
    const std::vector<MaskStep> mixed = {a, b};
    CHECK_THROWS_AS(aggregate_masks(mixed), DataError);
    CHECK_THROWS_AS(aggregate_masks(std::vector<MaskStep>{}), DataError);
    TempDir dir;
    {
        std::ofstream out(dir / "bad.jsonl");
        out << to_json(a).dump() << "\n" << "{not json\n";
    }
    try {
        read_mask_trace(dir / "bad.jsonl");
        FAIL("expected an error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("bad.jsonl:2") != std::string::npos);
    }
}

TEST_CASE("default layer candidates") {
    const std::vector<LayerRange> expect = {{1, 4}, {1, 5}, {1, 6}, {1, 8}, {4, 8}, {5, 8}, {6, 8}, {8, 8}};
    CHECK(default_layer_candidates(8) == expect);
    const auto two = default_layer_candidates(2);
    CHECK(two == std::vector<LayerRange>{{1, 1}, {1, 2}, {2, 2}});
}

TEST_CASE("tuner: single-point grids select that point everywhere") {
    StubEvaluator ev;
    ev.table[StubEvaluator::key(point(0.5, {1, 4}, 0.0))] = at(0.25, 0.5);
    SearchSpace space;
    space.r_grid = {0.5};
    space.layer_ranges = {{1, 4}};
    space.alpha_grid = {0.0};
    const auto r = tune_three_stage(std::ref(ev), at(0.5, 0.5), space, 4);
    CHECK(r.stage1 == point(0.5, {1, 4}, 0.0));
    CHECK(r.stage2 == r.stage1);
    CHECK(r.stage3 == r.stage1);
    CHECK(r.points.size() == 3);
    CHECK(ev.calls == 1);  // memoised
}

TEST_CASE("tuner: stage selections follow the F1 constraint and the scalarisation") {
    StubEvaluator ev;
    const LayerRange all{1, 4};
    // Baseline F1 0.8; drops: 0.25 -> 0.01, 0.5 -> 0.03 (on the limit), 0.75 -> 0.1.
    ev.table[StubEvaluator::key(point(0.25, all, 0.0))] = at(0.40, 0.79);
    ev.table[StubEvaluator::key(point(0.5, all, 0.0))] = at(0.30, 0.77);
    ev.table[StubEvaluator::key(point(0.75, all, 0.0))] = at(0.10, 0.70);
    ev.table[StubEvaluator::key(point(0.5, {1, 2}, 0.0))] = at(0.35, 0.78);
    ev.table[StubEvaluator::key(point(0.5, {3, 4}, 0.0))] = at(0.25, 0.75);
    ev.table[StubEvaluator::key(point(0.5, {3, 4}, 0.25))] = at(0.28125, 0.78125);
    ev.table[StubEvaluator::key(point(0.5, {3, 4}, 0.5))] = at(0.3125, 0.8);
    SearchSpace space;
    space.r_grid = {0.25, 0.5, 0.75};
    space.layer_ranges = {{1, 2}, all, {3, 4}};
    space.alpha_grid = {0.0, 0.25, 0.5};
    const EvalSummary base = at(0.5, 0.8);

    auto r = tune_three_stage(std::ref(ev), base, space, 4);
    CHECK(r.stage1 == point(0.5, all, 0.0));
    CHECK(r.stage2 == point(0.5, {3, 4}, 0.0));
    // Objectives: 0.25 + 0.05, 0.28125 + 0.01875, 0.3125 + 0 -> first of the 0.3 tie.
    CHECK(r.stage3 == point(0.5, {3, 4}, 0.0));
    CHECK(ev.calls == 7);  // (0.5, all, 0) evaluated once across stages 1 and 2

    space.lambda = 0.0;
    CHECK(tune_three_stage(std::ref(ev), base, space, 4).stage3 == point(0.5, {3, 4}, 0.0));
    space.lambda = 4.0;  // 0.45, 0.35625, 0.3125
    CHECK(tune_three_stage(std::ref(ev), base, space, 4).stage3 == point(0.5, {3, 4}, 0.5));

    space.max_f1_drop = 0.02;
    space.lambda = 1.0;
    ev.table[StubEvaluator::key(point(0.25, {1, 2}, 0.0))] = at(0.4, 0.8);
    ev.table[StubEvaluator::key(point(0.25, {3, 4}, 0.0))] = at(0.4, 0.8);
    ev.table[StubEvaluator::key(point(0.25, {1, 2}, 0.25))] = at(0.4, 0.8);
    ev.table[StubEvaluator::key(point(0.25, {1, 2}, 0.5))] = at(0.4, 0.8);
    const auto strict = tune_three_stage(std::ref(ev), base, space, 4);
    CHECK(strict.stage1 == point(0.25, all, 0.0));
    for (const auto& p : strict.points) {
        if (p.stage == 1) CHECK(p.feasible == (p.config.r == 0.25));
    }
}

TEST_CASE("tuner: falls back to the smallest F1 drop when nothing is feasible") {
    StubEvaluator ev;
    const LayerRange all{1, 2};
    ev.table[StubEvaluator::key(point(0.25, all, 0.0))] = at(0.1, 0.5);
    ev.table[StubEvaluator::key(point(0.5, all, 0.0))] = at(0.2, 0.6);
    SearchSpace space;
    space.r_grid = {0.25, 0.5};
    space.layer_ranges = {all};
    space.alpha_grid = {0.0};
    const auto r = tune_three_stage(std::ref(ev), at(0.5, 0.9), space, 2);
    CHECK(r.stage1.r == 0.5);
    CHECK_FALSE(r.points[0].feasible);
    CHECK_FALSE(r.points[1].feasible);
}

TEST_CASE("tuner: empty grids and determinism") {
    StubEvaluator ev;
    SearchSpace space;
    space.alpha_grid = {0.0};
    CHECK_THROWS_AS(tune_three_stage(std::ref(ev), at(0, 0), space, 4), ConfigValueError);
    space.r_grid = {0.5};
    space.alpha_grid = {};
    CHECK_THROWS_AS(tune_three_stage(std::ref(ev), at(0, 0), space, 4), ConfigValueError);

    auto synthetic = [](const SpinConfig& c) {
        return at(0.5 - c.r / 2 + c.alpha / 4 + double(c.layers->lo) / 64, 0.8 - c.r / 8);
    };
    SearchSpace full;
    full.r_grid = {0.125, 0.25, 0.5};
    full.alpha_grid = {0.0, 0.5};
    const auto a = tune_three_stage(synthetic, at(0.6, 0.8), full, 8);
    const auto b = tune_three_stage(synthetic, at(0.6, 0.8), full, 8);
    CHECK(to_json(a) == to_json(b));
    CHECK(a.points.size() == 3 + 8 + 2);
    bool found = false;
    for (const auto& p : a.points) found = found || p.config == a.stage3;
    CHECK(found);
}

TEST_CASE("search space parsing") {
    const auto s = search_space_from_json(
        {{"r", {0.25, 0.5}}, {"alpha", {0.0}}, {"layer_ranges", {{1, 2}}}, {"lambda", 2.0}, {"strategy", "query_norm"}});
    CHECK(s.r_grid.size() == 2);
    CHECK(s.layer_ranges == std::vector<LayerRange>{{1, 2}});
    CHECK(s.lambda == 2.0);
    CHECK(s.strategy == ScoringStrategy::query_norm);
    CHECK_THROWS_AS(search_space_from_json({{"r", {0.5}}}), ConfigValueError);
    CHECK_THROWS_AS(search_space_from_json({{"r", {0.5}}, {"alpha", {0.0}}, {"beta", 1}}), ConfigValueError);
}
