#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "helpers.hpp"
#include "spin/decoding.hpp"
#include "spin/errors.hpp"
#include "spin/rigged.hpp"
#include "spin/spin.hpp"

using namespace spin;
using spin::testing::make_model;
using spin::testing::random_prompt;
using spin::testing::small_config;

namespace {

KvCache cache_from_keys(const ModelConfig& c, const std::vector<std::vector<float>>& rows) {
    KvCache cache(c);
    for (const auto& row : rows) {
        for (std::size_t l = 0; l < c.n_layers; ++l) cache.append(l, row, row);
    }
    return cache;
}

SpinConfig spin_config(double r, double alpha) {
    SpinConfig s;
    s.r = r;
    s.alpha = alpha;
    return s;
}

// Runs a SpinHook and, at every layer it masks, recomputes the mask from the
// standalone scoring function.
class CrossCheckHook : public StepHook {
public:
    explicit CrossCheckHook(SpinHook inner) : inner_(std::move(inner)) {}
    void begin_step(const StepContext& ctx) override { inner_.begin_step(ctx); }
    bool layer_mask(const LayerAttention& attn, HeadMask& mask) override {
        const bool applied = inner_.layer_mask(attn, mask);
        if (applied) {
            const auto scores = score_heads_image_attention(attn.queries, attn.cache, attn.layer, attn.step.vision);
            const auto expected = build_mask(scores, inner_.config(), attn.layer);
            CHECK(expected == mask);
            ++checked;
        }
        return applied;
    }
    void end_step() override { inner_.end_step(); }
    std::unique_ptr<StepHook> clone() const override { return std::make_unique<CrossCheckHook>(*this); }
    std::size_t checked = 0;

private:
    SpinHook inner_;
};

}  // namespace

TEST_CASE("image attention score sums raw q.k over the vision span") {
    const std::vector<float> q = {1.0f, 2.0f};
    const std::vector<float> keys = {1, 0, 0, 1, 1, 1, 2, 2};  // rows (1,0) (0,1) (1,1) (2,2)
    CHECK(image_attention_score(q, keys, {1, 3}) == 5.0f);       // 2 + 3
    CHECK(image_attention_score(q, keys, {0, 4}) == 12.0f);      // 1 + 2 + 3 + 6
    CHECK(image_attention_score(q, keys, {3, 4}) == 6.0f);
}

TEST_CASE("per-head scores match a naive double loop") {
    auto c = small_config();
    SplitMix64 rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.uniform_index(16);
        std::vector<std::vector<float>> rows(n, std::vector<float>(c.d_model));
        for (auto& row : rows) {
            for (auto& v : row) v = 2.0f * rng.uniform_float() - 1.0f;
        }
        std::vector<float> q(c.d_model);
        for (auto& v : q) v = 2.0f * rng.uniform_float() - 1.0f;
        const std::size_t start = rng.uniform_index(n);
        const std::size_t end = start + 1 + rng.uniform_index(n - start);
        const auto cache = cache_from_keys(c, rows);
        const auto scores = score_heads_image_attention(q, cache, 1, {start, end});
        const std::size_t dk = c.head_dim();
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            double expect = 0;
            for (std::size_t j = start; j < end; ++j) {
                for (std::size_t i = 0; i < dk; ++i) expect += double(q[h * dk + i]) * rows[j][h * dk + i];
            }
            CHECK(scores[h] == doctest::Approx(expect).epsilon(1e-5).scale(1.0));
        }
    }
}

TEST_CASE("scoring rejects spans outside the cache") {
    const auto c = small_config();
    const auto cache = cache_from_keys(c, std::vector<std::vector<float>>(3, std::vector<float>(c.d_model, 1.0f)));
    const std::vector<float> q(c.d_model, 1.0f);
    CHECK_THROWS_AS(score_heads_image_attention(q, cache, 0, {2, 2}), SpanError);
    CHECK_THROWS_AS(score_heads_image_attention(q, cache, 0, {1, 4}), SpanError);
    CHECK_THROWS_AS(score_heads_alternative(ScoringStrategy::image_attention, q, cache, 0), ConfigError);
}

TEST_CASE("alternative strategies") {
    auto c = small_config();
    c.n_heads = 2;
    c.d_model = 4;
    std::vector<std::vector<float>> rows = {{3, 4, 0, 1}, {0, 0, 1, 0}};
    const auto cache = cache_from_keys(c, rows);
    const std::vector<float> q = {1, 0, 2, 2};
    const auto qn = score_heads_alternative(ScoringStrategy::query_norm, q, cache, 0);
    CHECK(qn[0] == doctest::Approx(1.0));
    CHECK(qn[1] == doctest::Approx(std::sqrt(8.0)));
    const auto kn = score_heads_alternative(ScoringStrategy::key_norm, q, cache, 0);
    CHECK(kn[0] == doctest::Approx(2.5));  // (5 + 0) / 2
    CHECK(kn[1] == doctest::Approx(1.0));  // (1 + 1) / 2
    const auto total = score_heads_alternative(ScoringStrategy::total_attention, q, cache, 0);
    CHECK(total[0] == doctest::Approx(3.0));
    CHECK(total[1] == doctest::Approx(4.0));
}

TEST_CASE("kept head count") {
    CHECK(spin_config(0.0, 0).kept_heads(8) == 8);
    CHECK(spin_config(0.5, 0).kept_heads(8) == 4);
    CHECK(spin_config(0.25, 0).kept_heads(8) == 6);
    CHECK(spin_config(0.3, 0).kept_heads(8) == 6);    // round(2.4) = 2
    CHECK(spin_config(0.125, 0).kept_heads(4) == 3);  // round(0.5) = 1
    CHECK(spin_config(0.99, 0).kept_heads(4) == 1);   // clamped
    CHECK(spin_config(0.5, 0).kept_heads(1) == 1);
}

TEST_CASE("top-k selection breaks ties toward the lower index") {
    const std::vector<float> s = {3, 1, 2, 5};
    CHECK(select_top_k(s, 2) == std::vector<std::size_t>{0, 3});
    const std::vector<float> flat = {1, 1, 1, 1};
    CHECK(select_top_k(flat, 2) == std::vector<std::size_t>{0, 1});
    const std::vector<float> partial = {0, 2, 2, 1};
    CHECK(select_top_k(partial, 1) == std::vector<std::size_t>{1});
    CHECK(select_top_k(s, 0).empty());
}

TEST_CASE("mask construction") {
    const std::vector<float> s = {0.1f, 0.9f, 0.5f, 0.3f};
    auto cfg = spin_config(0.5, 0.25);
    CHECK(build_mask(s, cfg, 0).m == std::vector<float>{0.25f, 1.0f, 1.0f, 0.25f});
    cfg.layers = LayerRange{2, 3};
    CHECK(build_mask(s, cfg, 0).m == std::vector<float>(4, 1.0f));
    CHECK(build_mask(s, cfg, 1).m == std::vector<float>{0.25f, 1.0f, 1.0f, 0.25f});
    CHECK(build_mask(s, cfg, 3).m == std::vector<float>(4, 1.0f));
    CHECK(build_mask(s, spin_config(0.0, 0.0), 0).m == std::vector<float>(4, 1.0f));
}

TEST_CASE("query coverage") {
    auto cfg = spin_config(0.5, 0.0);
    StepContext ctx;
    ctx.vision = {0, 4};
    ctx.position = 2;
    ctx.kind = PositionKind::vision;
    CHECK_FALSE(cfg.covers(ctx));
    ctx.position = 5;
    ctx.kind = PositionKind::prompt_text;
    CHECK(cfg.covers(ctx));
    ctx.kind = PositionKind::generated;
    CHECK(cfg.covers(ctx));
    cfg.apply_to = ApplyTo::generated_text_queries_only;
    CHECK(cfg.covers(ctx));
    ctx.kind = PositionKind::prompt_text;
    CHECK_FALSE(cfg.covers(ctx));
    // Text before the vision block never scores a span it cannot see.
    cfg.apply_to = ApplyTo::all_text_queries;
    ctx.vision = {3, 6};
    ctx.position = 1;
    CHECK_FALSE(cfg.covers(ctx));
}

TEST_CASE("hook masks equal the standalone score-and-select path") {
    const auto c = small_config();
    const auto model = make_model(c, 8);
    for (double r : {0.25, 0.5, 0.75}) {
        CrossCheckHook hook(SpinHook(spin_config(r, 0.1), c.n_layers, c.n_heads));
        auto cache = model->new_cache();
        const auto prompt = random_prompt(c, 6, 6, 3);
        model->prefill(prompt, cache, &hook);
        CHECK(hook.checked == 6 * c.n_layers);
    }
}

TEST_CASE("r = 0 and alpha = 1 leave logits bit-identical") {
    const auto c = small_config();
    const auto model = make_model(c, 8);
    const auto prompt = random_prompt(c, 5, 6, 1);
    auto base_cache = model->new_cache();
    const auto base = model->prefill(prompt, base_cache, nullptr);
    for (const auto& cfg : {spin_config(0.0, 0.0), spin_config(0.5, 1.0)}) {
        SpinHook hook(cfg, c.n_layers, c.n_heads);
        auto cache = model->new_cache();
        CHECK(model->prefill(prompt, cache, &hook) == base);
    }
    SpinHook active(spin_config(0.5, 0.0), c.n_layers, c.n_heads);
    auto cache = model->new_cache();
    CHECK(model->prefill(prompt, cache, &active) != base);
}

TEST_CASE("layers outside the range run unmasked") {
    const auto c = small_config();
    const auto model = make_model(c, 8);
    auto cfg = spin_config(0.5, 0.0);
    cfg.layers = LayerRange{2, 2};
    auto rec = std::make_shared<MaskRecorder>();
    SpinHook hook(cfg, c.n_layers, c.n_heads, rec, "s");
    auto cache = model->new_cache();
    model->prefill(random_prompt(c, 4, 3, 1), cache, &hook);
    const auto steps = rec->steps();
    REQUIRE(steps.size() == 3);
    for (const auto& s : steps) {
        CHECK(std::count(s.kept[0].begin(), s.kept[0].end(), 1) == 4);
        CHECK(std::count(s.kept[1].begin(), s.kept[1].end(), 1) == 2);
        CHECK(s.stream == "s");
        CHECK(s.kind == PositionKind::prompt_text);
    }
}

TEST_CASE("traces record the top-K choice even when alpha = 1") {
    const auto c = small_config();
    const auto model = make_model(c, 8);
    auto rec = std::make_shared<MaskRecorder>();
    const EngineModel engine(*model, spin_config(0.5, 1.0), rec);
    DecodeConfig dc;
    dc.max_new_tokens = 3;
    dc.eos_id = static_cast<TokenId>(c.vocab_size);  // unreachable
    const auto prompt = random_prompt(c, 4, 2, 1);
    const auto out = decode_greedy(engine, prompt, dc, "x");
    const auto steps = rec->steps();
    // Two prompt text positions plus the fed-back generated tokens.
    CHECK(steps.size() == 2 + out.tokens.size() - 1);
    for (const auto& s : steps) {
        for (const auto& layer : s.kept) CHECK(std::count(layer.begin(), layer.end(), 1) == 2);
    }
    CHECK(steps.back().kind == PositionKind::generated);
}

TEST_CASE("mask step JSON round-trip") {
    MaskStep s;
    s.stream = "img-1#pope0";
    s.position = 17;
    s.kind = PositionKind::generated;
    s.alpha = 0.25;
    s.kept = {{1, 0, 1}, {0, 1, 1}};
    const auto back = mask_step_from_json(to_json(s));
    CHECK(back.stream == s.stream);
    CHECK(back.position == s.position);
    CHECK(back.kind == s.kind);
    CHECK(back.alpha == s.alpha);
    CHECK(back.kept == s.kept);
}

TEST_CASE("spin config parsing and validation name the offending key") {
    auto key_of = [](const nlohmann::json& j) -> std::string {
        try {
            spin_config_from_json(j);
        } catch (const ConfigValueError& e) {
            return e.key();
        }
        return "";
    };
    CHECK(key_of({{"r", 1.2}, {"alpha", 0.0}}) == "spin.r");
    CHECK(key_of({{"alpha", 0.0}}) == "spin.r");
    CHECK(key_of({{"r", 0.5}, {"alpha", 2.0}}) == "spin.alpha");
    CHECK(key_of({{"r", 0.5}, {"alpha", 0.0}, {"heads", 3}}) == "spin.heads");
    CHECK(key_of({{"r", 0.5}, {"alpha", 0.0}, {"layer_range", {3, 2}}}) == "spin.layer_range");
    CHECK(key_of({{"r", 0.5}, {"alpha", 0.0}, {"strategy", "nope"}}) == "spin.strategy");

    const auto cfg = spin_config_from_json(
        {{"r", 0.5}, {"alpha", 0.1}, {"layer_range", {1, 2}}, {"strategy", "key_norm"}, {"apply_to", "generated_text_queries_only"}});
    CHECK(cfg.strategy == ScoringStrategy::key_norm);
    CHECK(cfg.apply_to == ApplyTo::generated_text_queries_only);
    CHECK(cfg.layers == LayerRange{1, 2});
    CHECK(spin_config_from_json(to_json(cfg)) == cfg);
    CHECK_NOTHROW(cfg.validate(2));
    try {
        cfg.validate(1);
        FAIL("expected an error");
    } catch (const ConfigValueError& e) {
        CHECK(e.key() == "spin.layer_range");
    }
    CHECK(spin_config_from_json({{"r", 0.0}, {"alpha", 0.0}}).apply_to == ApplyTo::all_text_queries);
}

TEST_CASE("planted heads win the image-attention ranking") {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 8;
    c.d_model = 64;
    c.d_ffn = 128;
    c.vocab_size = 40;
    c.max_seq_len = 128;
    const std::vector<std::size_t> planted = {2, 5};
    const auto ck = std::make_shared<const Checkpoint>(make_planted_bias_checkpoint(c, 3, planted, 4.0f));
    const Model model(ck);
    auto rec = std::make_shared<MaskRecorder>();
    auto cfg = spin_config(0.75, 0.0);  // keep 2 of 8
    const EngineModel engine(model, cfg, rec);
    DecodeConfig dc;
    dc.max_new_tokens = 8;
    dc.eos_id = 99;
    auto prompt = random_prompt(c, 12, 6, 5);
    prompt.vision = planted_vision_embeddings(c, 12, 5);
    decode_greedy(engine, prompt, dc, "p");
    const auto steps = rec->steps();
    REQUIRE(!steps.empty());
    std::size_t hits = 0;
    for (const auto& s : steps) {
        hits += s.kept[0][2] && s.kept[0][5];
    }
    CHECK(hits == steps.size());
}
