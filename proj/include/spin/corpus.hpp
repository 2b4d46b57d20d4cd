#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "spin/metrics.hpp"
#include "spin/prompt.hpp"
#include "spin/tokens.hpp"

namespace spin {

struct PopeProbe {
    std::string object;
    PopeSplit split = PopeSplit::random;
    bool gold_yes = true;
};

// One JSONL line:
// {"id", "vision_embeddings": [[f32...]], "prompt_ids": [...],
//  "system_ids": [...] (optional), "gt_objects": [...],
//  "pope": [{"object", "gold", "split"}...]}
struct CorpusRecord {
    std::string id;
    std::size_t d_model = 0;
    std::vector<float> vision;  // n_vision x d_model
    std::vector<TokenId> system_ids;
    std::vector<TokenId> prompt_ids;
    std::vector<std::string> gt_objects;
    std::vector<PopeProbe> pope;

    std::size_t n_vision() const { return d_model ? vision.size() / d_model : 0; }
    // Vision block, system prompt, instruction.
    MultimodalPrompt caption_prompt() const;
};

nlohmann::json to_json(const CorpusRecord& r);
CorpusRecord corpus_record_from_json(const nlohmann::json& j);

// Strict JSONL: every line must be one complete record; errors carry the
// line number.
std::vector<CorpusRecord> parse_corpus(std::string_view text, const std::string& source = "<memory>");
std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path);
std::string serialize_corpus(const std::vector<CorpusRecord>& records);

struct SyntheticCorpusSpec {
    std::size_t n_images = 10;
    std::size_t vision_tokens = 16;
    std::size_t d_model = 64;
    std::size_t min_objects = 2;
    std::size_t max_objects = 4;
    double popularity_exponent = 1.0;  // object i drawn with weight 1/(i+1)^s
    float noise = 0.1f;
    std::size_t pope_per_image = 6;  // split evenly over splits, half yes / half no
    std::vector<PopeSplit> splits = {PopeSplit::random, PopeSplit::popular, PopeSplit::adversarial};
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> vocab_path;        // default: built-in object list
    std::optional<std::filesystem::path> cooccurrence_path;  // "a<TAB>b<TAB>count"; default: from planted sets

    // Throws ConfigValueError keyed "corpus.<field>".
    void validate() const;
};

struct SyntheticCorpus {
    std::vector<CorpusRecord> records;
    ObjectVocabulary vocab;
    TokenTable tokens;
};

ObjectVocabulary default_object_vocabulary();

// Word-level table covering the fixed prompts, POPE questions, yes/no and
// every vocabulary word; ids 0/1 are <unk>/<eos>.
TokenTable build_token_table(const ObjectVocabulary& vocab);

inline constexpr std::string_view kSystemPrompt = "a chat between a user and an assistant .";
inline constexpr std::string_view kCaptionInstruction = "user : describe this image in detail . assistant :";

// Each vision token is the mean of the planted objects' unit directions plus
// Gaussian noise; gt_objects lists the planted set. Pure function of `spec`.
// Throws ConfigValueError when the vocabulary is too small for the splits.
SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec);

// Writes corpus.jsonl, vocab.tsv and tokens.txt into `dir`.
void write_corpus_files(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

}  // namespace spin
