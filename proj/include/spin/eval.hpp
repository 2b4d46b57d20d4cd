#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spin/corpus.hpp"
#include "spin/metrics.hpp"
#include "spin/model.hpp"
#include "spin/run_config.hpp"

namespace spin {

struct CaptionOutput {
    std::string id;
    std::vector<TokenId> tokens;
    std::string text;
};

struct PopeOutput {
    std::string id;
    std::string object;
    PopeSplit split = PopeSplit::random;
    bool gold_yes = true;
    std::vector<TokenId> tokens;
    std::string answer;
};

struct RecordError {
    std::string id;
    std::string message;
};

struct EvalTiming {
    double wall_s = 0.0;
    double prefill_s = 0.0;
    double decode_s = 0.0;
    std::uint64_t generated_tokens = 0;
};

struct EvalReport {
    nlohmann::json config;  // fully resolved RunConfig
    std::string version = SPIN_VERSION;
    std::size_t records = 0;
    std::optional<ChairReport> chair;
    std::optional<PopeReport> pope;
    std::optional<double> mean_caption_length;  // tokens, eos excluded
    std::optional<double> throughput_tps;
    std::vector<CaptionOutput> captions;
    std::vector<PopeOutput> pope_answers;
    std::vector<RecordError> errors;
    EvalTiming timing;
};

// Loaded model, corpus and tables; evaluates any number of SPIN settings
// against them.
class Evaluator {
public:
    explicit Evaluator(RunConfig config);

    const RunConfig& config() const { return config_; }
    const Model& model() const { return *model_; }
    const std::vector<CorpusRecord>& records() const { return records_; }
    const TokenTable& tokens() const { return tokens_; }
    const ObjectVocabulary& vocab() const { return vocab_; }

    // Uses config().spin unless `spin` overrides it; `sink` receives mask
    // traces. Throws DataError when every record fails.
    EvalReport run(const std::optional<SpinConfig>& spin, std::shared_ptr<MaskSink> sink = nullptr) const;
    EvalReport run() const;

private:
    RunConfig config_;
    std::shared_ptr<const Model> model_;
    std::vector<CorpusRecord> records_;
    TokenTable tokens_;
    ObjectVocabulary vocab_;
};

// Loads everything, evaluates, writes the configured report files.
EvalReport run_eval(const RunConfig& config);

nlohmann::json to_json(const EvalReport& r);
// metric,value rows for every scalar in the report.
std::string report_to_csv(const EvalReport& r);
void write_reports(const EvalReport& r, const OutputSection& output);

}  // namespace spin
