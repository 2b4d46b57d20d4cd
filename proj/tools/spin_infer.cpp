#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "spin/analytics.hpp"
#include "spin/checkpoint.hpp"
#include "spin/corpus.hpp"
#include "spin/decoding.hpp"
#include "spin/errors.hpp"
#include "spin/eval.hpp"
#include "spin/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spin;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kDataError = 3;
constexpr int kRuntimeError = 4;

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigFileMissing(path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigSyntaxError(path.string() + ": " + e.what());
    }
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << text;
}

// Inline JSON, a file holding the section, or a run config with a "spin" key.
SpinConfig parse_spin_arg(const std::string& arg) {
    json j;
    const auto first = arg.find_first_not_of(" \t\n");
    if (first != std::string::npos && arg[first] == '{') {
        try {
            j = json::parse(arg);
        } catch (const json::parse_error& e) {
            throw ConfigSyntaxError(std::string("--spin: ") + e.what());
        }
    } else {
        j = read_json_file(arg);
    }
    if (j.is_object() && j.contains("spin") && j["spin"].is_object()) j = j["spin"];
    return spin_config_from_json(j);
}

CorpusRecord read_prompt_record(const fs::path& path, const std::string& id) {
    const auto records = read_corpus(path);
    if (records.empty()) throw DataError(path.string() + ": no records");
    if (id.empty()) return records.front();
    for (const auto& r : records) {
        if (r.id == id) return r;
    }
    throw DataError(path.string() + ": no record with id '" + id + "'");
}

struct GenerateArgs {
    std::string ckpt, prompt, record_id, tokens, decode = "greedy", spin, trace_masks;
    std::size_t beam_width = 5, max_new = 64;
    double top_p = 0.9, rep_penalty = 1.0;
    std::uint64_t seed = 0;
    TokenId eos = 1;
};

int cmd_generate(const GenerateArgs& a) {
    auto ckpt = std::make_shared<const Checkpoint>(load_checkpoint(a.ckpt));
    const Model model(ckpt);
    const auto record = read_prompt_record(a.prompt, a.record_id);
    auto prompt = record.caption_prompt();
    prompt.validate(model.config());

    DecodeConfig dc;
    dc.strategy = parse_decode_strategy(a.decode);
    dc.beam_width = a.beam_width;
    dc.nucleus_p = a.top_p;
    dc.repetition_penalty = a.rep_penalty;
    dc.max_new_tokens = a.max_new;
    dc.eos_id = a.eos;
    dc.seed = a.seed;
    dc.validate();

    std::optional<SpinConfig> spin;
    if (!a.spin.empty()) {
        spin = parse_spin_arg(a.spin);
        spin->validate(model.config().n_layers);
    }
    std::shared_ptr<MaskSink> sink;
    if (!a.trace_masks.empty()) sink = std::make_shared<MaskTraceWriter>(a.trace_masks);
    const EngineModel engine = spin ? EngineModel(model, *spin, sink) : EngineModel(model);
    auto result = decode(engine, prompt, dc, record.id);

    json out = {{"id", record.id},
                {"tokens", result.tokens},
                {"hit_eos", result.hit_eos},
                {"overflow", result.overflow},
                {"decode", to_json(dc)},
                {"spin", spin ? to_json(*spin) : json(nullptr)},
                {"prefill_s", result.prefill_latency_s},
                {"decode_s", result.decode_latency_s()}};
    if (dc.strategy == DecodeStrategy::beam) out["score"] = result.score;
    if (!a.tokens.empty()) out["text"] = TokenTable::load(a.tokens).decode(result.tokens);
    std::cout << out.dump() << "\n";
    return kOk;
}

struct EvalArgs {
    std::string config, report_json, report_csv, trace_masks;
};

RunConfig load_with_overrides(const EvalArgs& a) {
    auto rc = load_run_config(a.config);
    if (!a.report_json.empty()) rc.output.report_json = fs::absolute(a.report_json);
    if (!a.report_csv.empty()) rc.output.report_csv = fs::absolute(a.report_csv);
    if (!a.trace_masks.empty()) rc.output.trace_masks = fs::absolute(a.trace_masks);
    return rc;
}

int cmd_eval(const EvalArgs& a) {
    const auto rc = load_with_overrides(a);
    const auto report = run_eval(rc);
    if (!rc.output.report_json) std::cout << to_json(report).dump(2) << "\n";
    for (const auto& e : report.errors) std::cerr << "record " << e.id << " failed: " << e.message << "\n";
    return kOk;
}

struct ProfileArgs {
    std::string config, out_json, out_csv;
    std::size_t samples = 0;
    bool no_spin = false;
};

int cmd_profile(const ProfileArgs& a) {
    const auto rc = load_run_config(a.config);
    if (!rc.eval) throw ConfigValueError("eval", "section is required for profiling");
    auto records = read_corpus(rc.eval->corpus);
    if (a.samples && records.size() > a.samples) records.resize(a.samples);
    const Model model(std::make_shared<const Checkpoint>(materialise_checkpoint(rc.model)));
    std::vector<MultimodalPrompt> prompts;
    for (const auto& r : records) {
        prompts.push_back(r.caption_prompt());
        prompts.back().validate(model.config());
    }
    const auto profile =
        profile_attention(model, prompts, rc.decode, a.no_spin ? std::nullopt : rc.spin);
    if (!a.out_json.empty()) write_file(a.out_json, to_json(profile).dump(2) + "\n");
    if (!a.out_csv.empty()) write_file(a.out_csv, profile_to_csv(profile));
    if (a.out_json.empty() && a.out_csv.empty()) std::cout << to_json(profile).dump(2) << "\n";
    return kOk;
}

struct HeatmapArgs {
    std::vector<std::string> traces;
    std::string out_json, out_csv;
};

int cmd_heatmap(const HeatmapArgs& a) {
    const std::vector<fs::path> paths(a.traces.begin(), a.traces.end());
    const auto heatmap = aggregate_mask_traces(paths);
    if (!a.out_json.empty()) write_file(a.out_json, to_json(heatmap).dump(2) + "\n");
    if (!a.out_csv.empty()) write_file(a.out_csv, heatmap_to_csv(heatmap));
    if (a.out_json.empty() && a.out_csv.empty()) std::cout << heatmap_to_csv(heatmap);
    return kOk;
}

struct TuneArgs {
    std::string config, space, out;
};

EvalSummary summarise(const EvalReport& r) {
    if (!r.chair) throw ConfigValueError("eval.chair", "tuning needs CHAIR metrics enabled");
    return {r.chair->cs.value(), r.chair->ci.value(), r.chair->f1.value()};
}

int cmd_tune(const TuneArgs& a) {
    const auto rc = load_run_config(a.config);
    const auto space = search_space_from_json(read_json_file(a.space));
    const Evaluator evaluator(rc);
    const auto baseline = summarise(evaluator.run(std::nullopt));
    const auto result = tune_three_stage(
        [&](const SpinConfig& c) { return summarise(evaluator.run(c)); }, baseline, space,
        evaluator.model().config().n_layers);
    json out = to_json(result);
    out["run_config"] = to_json(rc);
    out["version"] = SPIN_VERSION;
    if (!a.out.empty()) {
        write_file(a.out, out.dump(2) + "\n");
    } else {
        std::cout << out.dump(2) << "\n";
    }
    return kOk;
}

struct CorpusArgs {
    std::string out, vocab, cooccurrence;
    SyntheticCorpusSpec spec;
};

int cmd_make_corpus(CorpusArgs a) {
    if (!a.vocab.empty()) a.spec.vocab_path = a.vocab;
    if (!a.cooccurrence.empty()) a.spec.cooccurrence_path = a.cooccurrence;
    const auto corpus = generate_synthetic_corpus(a.spec);
    write_corpus_files(corpus, a.out);
    std::cout << "wrote " << corpus.records.size() << " records, " << corpus.tokens.size()
              << " tokens to " << a.out << "\n";
    return kOk;
}

struct InitArgs {
    std::string out, config;
    std::uint64_t seed = 0;
    ModelConfig model;
};

int cmd_init_ckpt(InitArgs a) {
    if (!a.config.empty()) {
        json j = read_json_file(a.config);
        if (j.contains("model") && j["model"].is_object()) j = j["model"];
        if (j.contains("config")) j = j["config"];
        a.model = model_config_from_json(j, "model.config");
    }
    a.model.validate();
    save_checkpoint(init_checkpoint(a.model, a.seed), a.out);
    std::cout << "wrote " << a.out << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toy multimodal decoder with per-query attention-head suppression"};
    app.set_version_flag("--version", std::string(SPIN_VERSION));
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Decode one corpus record");
    g->add_option("--ckpt", gen.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
    g->add_option("--prompt", gen.prompt, "Corpus JSONL holding the prompt record")->required()->check(CLI::ExistingFile);
    g->add_option("--record-id", gen.record_id, "Record id (default: first record)");
    g->add_option("--tokens", gen.tokens, "Token table for decoding text")->check(CLI::ExistingFile);
    g->add_option("--decode", gen.decode, "greedy|beam|nucleus")->check(CLI::IsMember({"greedy", "beam", "nucleus"}));
    g->add_option("--beam-width", gen.beam_width);
    g->add_option("--top-p", gen.top_p);
    g->add_option("--rep-penalty", gen.rep_penalty);
    g->add_option("--max-new", gen.max_new);
    g->add_option("--seed", gen.seed);
    g->add_option("--eos", gen.eos);
    g->add_option("--spin", gen.spin, "SPIN section as inline JSON or a JSON file");
    g->add_option("--trace-masks", gen.trace_masks, "Write per-step masks (JSONL)");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate a run config over its corpus");
    e->add_option("--config", ev.config)->required();
    e->add_option("--report-json", ev.report_json);
    e->add_option("--report-csv", ev.report_csv);
    e->add_option("--trace-masks", ev.trace_masks);

    ProfileArgs prof;
    auto* p = app.add_subcommand("profile", "Vision/text attention split per layer");
    p->add_option("--config", prof.config)->required();
    p->add_option("--samples", prof.samples, "Records to profile (0: all)");
    p->add_flag("--no-spin", prof.no_spin, "Ignore the config's spin section");
    p->add_option("--out-json", prof.out_json);
    p->add_option("--out-csv", prof.out_csv);

    HeatmapArgs heat;
    auto* h = app.add_subcommand("heatmap", "Aggregate mask traces into a layer x head heatmap");
    h->add_option("--trace", heat.traces, "Mask trace JSONL (repeatable)")->required()->check(CLI::ExistingFile);
    h->add_option("--out-json", heat.out_json);
    h->add_option("--out-csv", heat.out_csv);

    TuneArgs tune;
    auto* t = app.add_subcommand("tune", "Three-stage search over r, layer range and alpha");
    t->add_option("--config", tune.config)->required();
    t->add_option("--space", tune.space, "Search space JSON")->required();
    t->add_option("--out", tune.out);

    CorpusArgs corp;
    auto* c = app.add_subcommand("make-corpus", "Write a synthetic planted-object corpus");
    c->add_option("--out", corp.out, "Output directory")->required();
    c->add_option("--images", corp.spec.n_images);
    c->add_option("--vision-tokens", corp.spec.vision_tokens);
    c->add_option("--d-model", corp.spec.d_model);
    c->add_option("--min-objects", corp.spec.min_objects);
    c->add_option("--max-objects", corp.spec.max_objects);
    c->add_option("--popularity-exponent", corp.spec.popularity_exponent);
    c->add_option("--noise", corp.spec.noise);
    c->add_option("--pope-per-image", corp.spec.pope_per_image);
    c->add_option("--seed", corp.spec.seed);
    c->add_option("--vocab", corp.vocab, "Object vocabulary TSV")->check(CLI::ExistingFile);
    c->add_option("--cooccurrence", corp.cooccurrence, "Co-occurrence TSV")->check(CLI::ExistingFile);

    InitArgs init;
    auto* i = app.add_subcommand("init-ckpt", "Write a seeded random checkpoint");
    i->add_option("--out", init.out)->required();
    i->add_option("--seed", init.seed);
    i->add_option("--config", init.config, "JSON model config (or run config)");
    i->add_option("--layers", init.model.n_layers);
    i->add_option("--heads", init.model.n_heads);
    i->add_option("--d-model", init.model.d_model);
    i->add_option("--d-ffn", init.model.d_ffn);
    i->add_option("--vocab-size", init.model.vocab_size);
    i->add_option("--max-seq", init.model.max_seq_len);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (*g) return cmd_generate(gen);
        if (*e) return cmd_eval(ev);
        if (*p) return cmd_profile(prof);
        if (*h) return cmd_heatmap(heat);
        if (*t) return cmd_tune(tune);
        if (*c) return cmd_make_corpus(corp);
        if (*i) return cmd_init_ckpt(init);
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return kConfigError;
    } catch (const DataError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return kDataError;
    } catch (const SpanError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return kDataError;
    } catch (const GenerationLengthError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return kDataError;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kRuntimeError;
    }
    return kRuntimeError;
}
