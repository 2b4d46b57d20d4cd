#include "spin/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "spin/checkpoint.hpp"
#include "spin/errors.hpp"

extern char** environ;

namespace spin {

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

void reject_unknown(const nlohmann::json& j, const std::string& prefix,
                    const std::set<std::string>& known) {
    if (!j.is_object()) throw ConfigValueError(prefix, "expected an object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigValueError(prefix + "." + key, "unknown key");
    }
}

std::filesystem::path existing_file(const nlohmann::json& j, const std::string& key,
                                    const std::filesystem::path& base_dir) {
    if (!j.is_string()) throw ConfigValueError(key, "expected a path string");
    std::filesystem::path p = j.get<std::string>();
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    if (!std::filesystem::exists(p)) throw ConfigValueError(key, "file not found: " + p.string());
    return std::filesystem::absolute(p).lexically_normal();
}

std::filesystem::path output_path(const nlohmann::json& j, const std::string& key,
                                  const std::filesystem::path& base_dir) {
    if (!j.is_string()) throw ConfigValueError(key, "expected a path string");
    std::filesystem::path p = j.get<std::string>();
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    return std::filesystem::absolute(p).lexically_normal();
}

bool boolean(const nlohmann::json& j, const std::string& key) {
    if (!j.is_boolean()) throw ConfigValueError(key, "expected true or false");
    return j.get<bool>();
}

std::size_t count(const nlohmann::json& j, const std::string& key) {
    if (!j.is_number_integer() || j.get<long long>() < 0) {
        throw ConfigValueError(key, "expected a non-negative integer");
    }
    return j.get<std::size_t>();
}

}  // namespace

std::map<std::string, std::string> spin_environment() {
    std::map<std::string, std::string> env;
    for (char** e = environ; e && *e; ++e) {
        std::string entry(*e);
        if (entry.rfind("SPIN__", 0) != 0) continue;
        const auto eq = entry.find('=');
        if (eq == std::string::npos) continue;
        env[entry.substr(0, eq)] = entry.substr(eq + 1);
    }
    return env;
}

void apply_env_overrides(nlohmann::json& config, const std::map<std::string, std::string>& env) {
    for (const auto& [name, raw] : env) {
        if (name.rfind("SPIN__", 0) != 0) continue;
        std::vector<std::string> path;
        std::string rest = name.substr(6);
        std::size_t pos;
        while ((pos = rest.find("__")) != std::string::npos) {
            path.push_back(lower(rest.substr(0, pos)));
            rest = rest.substr(pos + 2);
        }
        path.push_back(lower(rest));
        if (std::any_of(path.begin(), path.end(), [](const std::string& s) { return s.empty(); })) {
            throw ConfigValueError(name, "malformed override name");
        }
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::parse_error&) {
            value = raw;
        }
        nlohmann::json* node = &config;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            if (!node->is_object()) throw ConfigValueError(name, "override path crosses a non-object");
            node = &(*node)[path[i]];
            if (node->is_null()) *node = nlohmann::json::object();
        }
        if (!node->is_object()) throw ConfigValueError(name, "override path crosses a non-object");
        (*node)[path.back()] = value;
    }
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    reject_unknown(j, "config", {"model", "spin", "decode", "eval", "output"});
    RunConfig c;

    if (!j.contains("model")) throw ConfigValueError("model", "section is required");
    const auto& m = j.at("model");
    reject_unknown(m, "model", {"checkpoint", "init_seed", "config"});
    const bool has_ckpt = m.contains("checkpoint");
    const bool has_seed = m.contains("init_seed");
    if (has_ckpt == has_seed) {
        throw ConfigValueError("model", "exactly one of model.checkpoint and model.init_seed must be set");
    }
    if (has_ckpt) {
        if (m.contains("config")) {
            throw ConfigValueError("model.config", "not allowed with model.checkpoint");
        }
        c.model.checkpoint = existing_file(m.at("checkpoint"), "model.checkpoint", base_dir);
    } else {
        const auto& seed = m.at("init_seed");
        if (!seed.is_number_integer() || (!seed.is_number_unsigned() && seed.get<long long>() < 0)) {
            throw ConfigValueError("model.init_seed", "expected a non-negative integer");
        }
        c.model.init_seed = m.at("init_seed").get<std::uint64_t>();
        c.model.config = m.contains("config") ? model_config_from_json(m.at("config")) : ModelConfig{};
        c.model.config->validate();
    }
    const ModelConfig model_config = resolve_model_config(c.model);

    if (j.contains("decode")) c.decode = decode_config_from_json(j.at("decode"));
    if (c.decode.eos_id >= model_config.vocab_size) {
        throw ConfigValueError("decode.eos_id", "outside the model vocabulary");
    }

    if (j.contains("spin") && !j.at("spin").is_null()) {
        c.spin = spin_config_from_json(j.at("spin"));
        c.spin->validate(model_config.n_layers);
    }

    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        reject_unknown(e, "eval", {"corpus", "vocab", "tokens", "chair", "pope", "include_prefill",
                                   "workers", "pope_max_new_tokens", "max_records"});
        EvalSection ev;
        for (const char* key : {"corpus", "vocab", "tokens"}) {
            if (!e.contains(key)) throw ConfigValueError(std::string("eval.") + key, "required");
        }
        ev.corpus = existing_file(e.at("corpus"), "eval.corpus", base_dir);
        ev.vocab = existing_file(e.at("vocab"), "eval.vocab", base_dir);
        ev.tokens = existing_file(e.at("tokens"), "eval.tokens", base_dir);
        if (e.contains("chair")) ev.chair = boolean(e.at("chair"), "eval.chair");
        if (e.contains("pope")) ev.pope = boolean(e.at("pope"), "eval.pope");
        if (e.contains("include_prefill")) {
            ev.include_prefill = boolean(e.at("include_prefill"), "eval.include_prefill");
        }
        if (e.contains("workers")) ev.workers = count(e.at("workers"), "eval.workers");
        if (ev.workers < 1) throw ConfigValueError("eval.workers", "must be >= 1");
        if (e.contains("pope_max_new_tokens")) {
            ev.pope_max_new_tokens = count(e.at("pope_max_new_tokens"), "eval.pope_max_new_tokens");
            if (ev.pope_max_new_tokens < 1) {
                throw ConfigValueError("eval.pope_max_new_tokens", "must be >= 1");
            }
        }
        if (e.contains("max_records") && !e.at("max_records").is_null()) {
            ev.max_records = count(e.at("max_records"), "eval.max_records");
        }
        c.eval = ev;
    }

    if (j.contains("output")) {
        const auto& o = j.at("output");
        reject_unknown(o, "output", {"report_json", "report_csv", "trace_masks"});
        if (o.contains("report_json") && !o.at("report_json").is_null()) {
            c.output.report_json = output_path(o.at("report_json"), "output.report_json", base_dir);
        }
        if (o.contains("report_csv") && !o.at("report_csv").is_null()) {
            c.output.report_csv = output_path(o.at("report_csv"), "output.report_csv", base_dir);
        }
        if (o.contains("trace_masks") && !o.at("trace_masks").is_null()) {
            c.output.trace_masks = output_path(o.at("trace_masks"), "output.trace_masks", base_dir);
        }
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path,
                          const std::map<std::string, std::string>& env) {
    std::ifstream in(path);
    if (!in) throw ConfigFileMissing(path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigSyntaxError(path.string() + ": " + e.what());
    }
    apply_env_overrides(j, env);
    return run_config_from_json(j, std::filesystem::absolute(path).parent_path());
}

nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    if (c.model.checkpoint) {
        j["model"] = {{"checkpoint", c.model.checkpoint->string()}};
    } else {
        j["model"] = {{"init_seed", *c.model.init_seed}, {"config", to_json(*c.model.config)}};
    }
    if (c.spin) j["spin"] = to_json(*c.spin);
    j["decode"] = to_json(c.decode);
    if (c.eval) {
        const auto& e = *c.eval;
        j["eval"] = {{"corpus", e.corpus.string()},
                     {"vocab", e.vocab.string()},
                     {"tokens", e.tokens.string()},
                     {"chair", e.chair},
                     {"pope", e.pope},
                     {"include_prefill", e.include_prefill},
                     {"workers", e.workers},
                     {"pope_max_new_tokens", e.pope_max_new_tokens}};
        if (e.max_records) j["eval"]["max_records"] = *e.max_records;
    }
    nlohmann::json out = nlohmann::json::object();
    if (c.output.report_json) out["report_json"] = c.output.report_json->string();
    if (c.output.report_csv) out["report_csv"] = c.output.report_csv->string();
    if (c.output.trace_masks) out["trace_masks"] = c.output.trace_masks->string();
    j["output"] = out;
    return j;
}

ModelConfig resolve_model_config(const ModelSection& model) {
    if (model.checkpoint) {
        try {
            return read_checkpoint_config(*model.checkpoint);
        } catch (const DataError& e) {
            throw ConfigValueError("model.checkpoint", e.what());
        }
    }
    return model.config.value_or(ModelConfig{});
}

Checkpoint materialise_checkpoint(const ModelSection& model) {
    if (model.checkpoint) return load_checkpoint(*model.checkpoint);
    return init_checkpoint(model.config.value_or(ModelConfig{}), model.init_seed.value_or(0));
}

}  // namespace spin
