#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "spin/decoding.hpp"
#include "spin/model_config.hpp"
#include "spin/spin.hpp"

namespace spin {

// Exactly one of `checkpoint` and `init_seed` is set; `config` accompanies
// `init_seed`.
struct ModelSection {
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::uint64_t> init_seed;
    std::optional<ModelConfig> config;
};

struct EvalSection {
    std::filesystem::path corpus;
    std::filesystem::path vocab;   // object vocabulary TSV
    std::filesystem::path tokens;  // token table
    bool chair = true;
    bool pope = true;
    bool include_prefill = false;  // count prefill time in throughput
    std::size_t workers = 1;
    std::size_t pope_max_new_tokens = 8;
    std::optional<std::size_t> max_records;
};

struct OutputSection {
    std::optional<std::filesystem::path> report_json;
    std::optional<std::filesystem::path> report_csv;
    std::optional<std::filesystem::path> trace_masks;
};

struct RunConfig {
    ModelSection model;
    std::optional<SpinConfig> spin;
    DecodeConfig decode;
    std::optional<EvalSection> eval;
    OutputSection output;
};

// Environment overrides: SPIN__SECTION__KEY=value (nested keys separated by
// "__", names matched case-insensitively). Values are parsed as JSON when
// possible and taken as strings otherwise.
void apply_env_overrides(nlohmann::json& config, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> spin_environment();

// Validates every section. Relative paths resolve against `base_dir`;
// referenced files must exist.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

// Throws ConfigFileMissing, ConfigSyntaxError or ConfigValueError.
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::map<std::string, std::string>& env = spin_environment());

// Fully resolved form (defaults filled, absolute paths); feeding it back to
// run_config_from_json reproduces the same RunConfig.
nlohmann::json to_json(const RunConfig& c);

// Model described by the model section (loads or initialises weights).
Checkpoint materialise_checkpoint(const ModelSection& model);
ModelConfig resolve_model_config(const ModelSection& model);

}  // namespace spin
