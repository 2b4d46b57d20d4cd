#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "spin/errors.hpp"
#include "spin/metrics.hpp"

using namespace spin;
using namespace spin::testing;

namespace {

CaptionRecord record(std::string caption, std::set<std::string> gt) {
    return {"r", std::move(caption), std::move(gt)};
}

PopeItem pope(bool gold_yes, std::string answer, PopeSplit split = PopeSplit::random) {
    return {"img", "dog", split, gold_yes, std::move(answer)};
}

}  // namespace

TEST_CASE("object extraction folds synonyms and keeps every mention") {
    ObjectVocabulary v;
    v.add("dog", "dog");
    v.add("puppy", "dog");
    const auto m = extract_objects("a dog and a puppy", v);
    CHECK(m.objects == std::set<std::string>{"dog"});
    CHECK(m.instances == std::vector<std::string>{"dog", "dog"});
    CHECK(extract_objects("", v).objects.empty());
    CHECK(extract_objects("A DOG!", v).instances.size() == 1);
}

TEST_CASE("object extraction prefers the longest phrase") {
    ObjectVocabulary v;
    v.add("hot dog", "hot dog");
    v.add("dog", "dog");
    const auto m = extract_objects("a hot dog", v);
    CHECK(m.objects == std::set<std::string>{"hot dog"});
    CHECK(m.instances.size() == 1);
    CHECK(extract_objects("hot, dog", v).objects == std::set<std::string>{"hot dog"});  // punctuation is stripped first
    CHECK(extract_objects("hot and dog", v).objects == std::set<std::string>{"dog"});
}

TEST_CASE("vocabulary invariants") {
    ObjectVocabulary v;
    v.add("puppy", "dog");
    CHECK(v.is_canonical("dog"));
    CHECK_FALSE(v.is_canonical("puppy"));
    CHECK_THROWS_AS(v.add("puppy", "cat"), DataError);  // surface already mapped
    CHECK_THROWS_AS(v.add("dog", "canine"), DataError);  // canonical cannot be a synonym
    CHECK_THROWS_AS(v.add("x", "puppy"), DataError);     // synonym cannot be canonical
    const auto back = ObjectVocabulary::parse_tsv(v.to_tsv());
    CHECK(back.to_tsv() == v.to_tsv());
    CHECK_THROWS_AS(ObjectVocabulary::parse_tsv("dog\tdog\nbroken line\n"), DataError);
    try {
        ObjectVocabulary::parse_tsv("dog\tdog\ncat\tcat\textra\n", "v.tsv");
        FAIL("expected an error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("v.tsv:2") != std::string::npos);
    }
}

TEST_CASE("CHAIR worked example") {
    ObjectVocabulary v;
    for (const char* n : {"dog", "cat", "chair"}) v.add(n, n);
    const std::vector<CaptionRecord> recs = {record("a dog and a cat", {"dog", "cat"}),
                                             record("a dog on a chair", {"dog"})};
    const auto r = chair_scores(recs, v);
    CHECK(r.cs == Ratio{1, 2});
    CHECK(r.ci == Ratio{1, 4});
    CHECK(r.ci.value() == 0.25);
    // |M & G| = 2 + 1, |M| = 2 + 2, |G| = 2 + 1
    CHECK(r.precision == Ratio{3, 4});
    CHECK(r.recall == Ratio{3, 3});
    CHECK(r.f1 == Ratio{6, 7});
}

TEST_CASE("CHAIR extremes") {
    ObjectVocabulary v;
    for (const char* n : {"dog", "cat", "chair"}) v.add(n, n);
    const std::vector<CaptionRecord> perfect = {record("a dog", {"dog"}), record("cat and chair", {"cat", "chair"})};
    const auto p = chair_scores(perfect, v);
    CHECK(p.cs.value() == 0.0);
    CHECK(p.ci.value() == 0.0);
    CHECK(p.f1.value() == 1.0);
    const std::vector<CaptionRecord> wrong = {record("a cat", {"dog"}), record("two chairs, a chair", {"dog"})};
    CHECK(chair_scores(wrong, v).ci.value() == 1.0);
    const std::vector<CaptionRecord> silent = {record("nothing here", {"dog"})};
    const auto s = chair_scores(silent, v);
    CHECK(s.ci == Ratio{0, 0});
    CHECK(s.cs == Ratio{0, 1});
    CHECK_THROWS_AS(chair_scores(std::vector<CaptionRecord>{}, v), DataError);
}

TEST_CASE("CHAIR equals a brute-force recount") {
    const auto vocab = oracle_vocabulary();
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        const auto caps = build_captions(seed, 1 + seed % 20);
        std::vector<CaptionRecord> recs;
        for (const auto& c : caps) recs.push_back(c.record);
        const auto r = chair_scores(recs, vocab);
        const auto o = recount_chair(caps);
        CHECK(r.cs == Ratio{o.hallucinated_captions, o.captions});
        CHECK(r.ci == Ratio{o.hallucinated_mentions, o.mentions});
        CHECK(r.precision == Ratio{o.tp, o.mentioned_set});
        CHECK(r.recall == Ratio{o.tp, o.gt_set});
        CHECK(r.f1 == Ratio{2 * o.tp, o.mentioned_set + o.gt_set});
        // F1 = 2PR / (P + R) as exact rationals.
        const auto& P = r.precision;
        const auto& R = r.recall;
        if (P.num && R.num) CHECK(r.f1.same_value(Ratio{2 * P.num * R.num, P.num * R.den + R.num * P.den}));
    }
}

TEST_CASE("POPE answer parsing") {
    CHECK(parse_pope_answer("Yes") == PopeAnswer::yes);
    CHECK(parse_pope_answer("I see no dog") == PopeAnswer::no);
    CHECK(parse_pope_answer("No, but yes") == PopeAnswer::no);
    CHECK(parse_pope_answer("yesterday") == PopeAnswer::unparsed);
    CHECK(parse_pope_answer("") == PopeAnswer::unparsed);
    CHECK(pope_question("dog") == "Is there a dog in the image?");
}

TEST_CASE("POPE worked example") {
    const std::vector<PopeItem> items = {pope(true, "Yes"), pope(false, "No"), pope(true, "No")};
    const auto r = pope_eval(items);
    CHECK(r.overall.accuracy() == Ratio{2, 3});
    CHECK(r.overall.precision().value() == 1.0);
    CHECK(r.overall.recall().same_value(Ratio{1, 2}));
    CHECK(r.overall.f1().same_value(Ratio{2, 3}));
    const std::vector<PopeItem> right = {pope(true, "yes"), pope(false, "no")};
    CHECK(pope_eval(right).overall.accuracy().value() == 1.0);
    CHECK(pope_eval(right).overall.f1().value() == 1.0);
}

TEST_CASE("unparsed POPE answers count as wrong") {
    const std::vector<PopeItem> items = {pope(true, "maybe"), pope(false, "hmm")};
    const auto r = pope_eval(items);
    CHECK(r.overall.unparsed == 2);
    CHECK(r.overall.fn == 1);
    CHECK(r.overall.fp == 1);
    CHECK(r.overall.accuracy() == Ratio{0, 2});
}

TEST_CASE("POPE equals a brute-force recount and overall sums the splits") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto built = build_pope(seed, 60);
        std::vector<PopeItem> items;
        for (const auto& b : built) items.push_back(b.item);
        const auto r = pope_eval(items);
        PopeCounts overall;
        const auto per = recount_pope(built, overall);
        auto same = [](const Confusion& c, const PopeCounts& o) {
            return c.tp == o.tp && c.fp == o.fp && c.tn == o.tn && c.fn == o.fn && c.unparsed == o.unparsed;
        };
        CHECK(same(r.overall, overall));
        Confusion sum;
        for (const auto& [split, c] : r.splits) {
            CHECK(same(c, per.at(split)));
            sum += c;
        }
        CHECK(sum == r.overall);
        CHECK(r.overall.accuracy() == Ratio{overall.tp + overall.tn, 60});
    }
}

TEST_CASE("multi-turn context layout and growth") {
    const std::size_t d = 2;
    const std::vector<float> vision(3 * d, 0.5f);
    const std::vector<TokenId> system = {5, 6};
    const std::vector<QaTurn> prior = {{{10, 11}, {20}}, {{12}, {21, 22}}, {{13, 14, 15}, {}}};
    const std::vector<TokenId> next = {16, 17};

    const auto first = build_multiturn_context(vision, d, system, {}, next, 100);
    CHECK(first.span == VisionSpan{0, 3});
    CHECK(std::vector<TokenId>(first.tokens.begin() + 3, first.tokens.end()) == std::vector<TokenId>{5, 6, 16, 17});

    const auto fourth = build_multiturn_context(vision, d, system, prior, next, 100);
    CHECK(std::vector<TokenId>(fourth.tokens.begin() + 3, fourth.tokens.end()) ==
          std::vector<TokenId>{5, 6, 10, 11, 20, 12, 21, 22, 13, 14, 15, 16, 17});

    std::size_t previous = 0;
    for (std::size_t t = 0; t <= prior.size(); ++t) {
        const auto p = build_multiturn_context(vision, d, system, std::span(prior).first(t), next, 100);
        std::size_t expect = 3 + system.size() + next.size();
        for (std::size_t j = 0; j < t; ++j) expect += prior[j].question.size() + prior[j].answer.size();
        CHECK(p.size() == expect);
        CHECK(p.size() > previous);
        previous = p.size();
    }
    CHECK_NOTHROW(build_multiturn_context(vision, d, system, prior, next, 17));
    CHECK_THROWS_AS(build_multiturn_context(vision, d, system, prior, next, 16), GenerationLengthError);
}

TEST_CASE("throughput pools tokens and seconds") {
    const std::vector<ThroughputSample> one = {{100, 2.0}};
    CHECK(*throughput(one) == 50.0);
    const std::vector<ThroughputSample> two = {{100, 2.0}, {50, 1.0}};
    CHECK(*throughput(two) == 50.0);
    const std::vector<ThroughputSample> none = {{0, 1.0}};
    CHECK_FALSE(throughput(none).has_value());
}
