#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "spin/prompt.hpp"

namespace spin {

// Exact count ratio; value() is 0 for an empty denominator.
struct Ratio {
    std::uint64_t num = 0;
    std::uint64_t den = 0;

    double value() const { return den ? static_cast<double>(num) / static_cast<double>(den) : 0.0; }
    // Equality of the rational numbers, not of the representation.
    bool same_value(const Ratio& o) const { return num * o.den == o.num * den; }
    friend bool operator==(const Ratio&, const Ratio&) = default;
};

nlohmann::json to_json(const Ratio& r);

// Canonical object names plus a flat surface -> canonical synonym map.
class ObjectVocabulary {
public:
    ObjectVocabulary() = default;

    // Lines "surface<TAB>canonical". Throws DataError with the line number.
    static ObjectVocabulary parse_tsv(std::string_view text, const std::string& source = "<memory>");
    static ObjectVocabulary load(const std::filesystem::path& path);
    std::string to_tsv() const;

    // Registers `canonical` (as its own surface form) and maps `surface` to
    // it. Throws DataError when `canonical` is already a synonym of another
    // name or `surface` already maps elsewhere.
    void add(const std::string& surface, const std::string& canonical);

    const std::set<std::string>& canonical_names() const { return canonical_; }
    bool is_canonical(const std::string& name) const { return canonical_.count(name) != 0; }
    // Canonical name for a normalised, space-joined surface phrase.
    std::optional<std::string> lookup(const std::string& phrase) const;
    std::size_t max_phrase_words() const { return max_words_; }

private:
    std::set<std::string> canonical_;
    std::map<std::string, std::string> surface_;  // ordered for stable output
    std::size_t max_words_ = 1;
};

struct ObjectMentions {
    std::set<std::string> objects;       // distinct canonical names
    std::vector<std::string> instances;  // one per mention, in caption order
};

// Lowercase, punctuation to spaces, then greedy longest match of vocabulary
// phrases over the word sequence.
ObjectMentions extract_objects(std::string_view caption, const ObjectVocabulary& vocab);

struct CaptionRecord {
    std::string image_id;
    std::string caption;
    std::set<std::string> gt_objects;
};

struct ChairReport {
    Ratio cs;         // captions with >= 1 hallucinated object / captions
    Ratio ci;         // hallucinated mentions / mentions
    Ratio precision;  // micro: sum |M & G| / sum |M| over mentioned-object sets
    Ratio recall;     // micro: sum |M & G| / sum |G|
    Ratio f1;         // 2 sum|M & G| / (sum|M| + sum|G|) == 2PR/(P+R)
    std::size_t captions = 0;
};

ChairReport chair_scores(std::span<const CaptionRecord> records, const ObjectVocabulary& vocab);

enum class PopeSplit { random, popular, adversarial };
std::string_view to_string(PopeSplit s);
PopeSplit parse_pope_split(std::string_view tag);

enum class PopeAnswer { yes, no, unparsed };

// First standalone "yes" or "no" word, case-insensitive.
PopeAnswer parse_pope_answer(std::string_view response);

// "Is there a <object> in the image?"
std::string pope_question(std::string_view object);

struct PopeItem {
    std::string image_id;
    std::string object;
    PopeSplit split = PopeSplit::random;
    bool gold_yes = true;
    std::string answer;
};

// "yes" is the positive class. Unparsed answers count as wrong (FN for a
// gold yes, FP for a gold no) and are tallied separately.
struct Confusion {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0, unparsed = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    Ratio accuracy() const { return {tp + tn, total()}; }
    Ratio precision() const { return {tp, tp + fp}; }
    Ratio recall() const { return {tp, tp + fn}; }
    Ratio f1() const { return {2 * tp, 2 * tp + fp + fn}; }

    Confusion& operator+=(const Confusion& o);
    friend bool operator==(const Confusion&, const Confusion&) = default;
};

struct PopeReport {
    std::map<PopeSplit, Confusion> splits;
    Confusion overall;
};

PopeReport pope_eval(std::span<const PopeItem> items);

struct QaTurn {
    std::vector<TokenId> question;
    std::vector<TokenId> answer;
};

// Vision block, system prompt, prior (question, answer) pairs in order, then
// the next question. Throws GenerationLengthError when the result would not
// leave room for one generated token below max_seq_len.
MultimodalPrompt build_multiturn_context(std::vector<float> vision, std::size_t d_model,
                                         std::span<const TokenId> system,
                                         std::span<const QaTurn> prior,
                                         std::span<const TokenId> next_question,
                                         std::size_t max_seq_len);

struct ThroughputSample {
    std::size_t tokens = 0;
    double seconds = 0.0;
};

// Pooled tokens / pooled seconds; nullopt when no token was generated.
std::optional<double> throughput(std::span<const ThroughputSample> samples);

}  // namespace spin
