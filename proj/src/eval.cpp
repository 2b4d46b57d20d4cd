#include "spin/eval.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include "spin/decoding.hpp"
#include "spin/errors.hpp"
#include "spin/rng.hpp"

namespace spin {

namespace {

struct RecordResult {
    std::optional<CaptionOutput> caption;
    std::vector<PopeOutput> pope;
    std::vector<GenerationResult> generations;
    std::optional<std::string> error;
};

std::vector<TokenId> strip_eos(std::vector<TokenId> tokens, TokenId eos) {
    if (!tokens.empty() && tokens.back() == eos) tokens.pop_back();
    return tokens;
}

std::string fmt(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

}  // namespace

Evaluator::Evaluator(RunConfig config)
    : config_(std::move(config)), tokens_({"<unk>", "<eos>"}) {
    if (!config_.eval) throw ConfigValueError("eval", "section is required for evaluation");
    const auto& ev = *config_.eval;
    model_ = std::make_shared<const Model>(
        std::make_shared<const Checkpoint>(materialise_checkpoint(config_.model)));
    records_ = read_corpus(ev.corpus);
    if (ev.max_records && records_.size() > *ev.max_records) records_.resize(*ev.max_records);
    if (records_.empty()) throw DataError("corpus " + ev.corpus.string() + " has no records");
    tokens_ = TokenTable::load(ev.tokens);
    vocab_ = ObjectVocabulary::load(ev.vocab);
    if (tokens_.size() > model_->config().vocab_size) {
        throw DataError("token table has " + std::to_string(tokens_.size()) +
                        " entries but the model vocabulary holds " +
                        std::to_string(model_->config().vocab_size));
    }
    for (const auto& r : records_) {
        for (const auto& o : r.gt_objects) {
            if (!vocab_.is_canonical(o)) {
                throw DataError("record '" + r.id + "': ground-truth object '" + o +
                                "' is not a canonical vocabulary name");
            }
        }
    }
}

EvalReport Evaluator::run() const { return run(config_.spin); }

EvalReport Evaluator::run(const std::optional<SpinConfig>& spin, std::shared_ptr<MaskSink> sink) const {
    const auto started = std::chrono::steady_clock::now();
    const auto& ev = *config_.eval;
    const Model& model = *model_;
    const std::size_t max_seq = model.config().max_seq_len;
    const EngineModel engine = spin ? EngineModel(model, *spin, sink) : EngineModel(model);

    RunConfig effective = config_;
    effective.spin = spin;

    const auto system_ids = tokens_.encode(kSystemPrompt);
    auto evaluate_record = [&](const CorpusRecord& rec) {
        RecordResult out;
        try {
            const std::uint64_t seed = derive_seed(config_.decode.seed, rec.id);
            if (ev.chair) {
                DecodeConfig dc = config_.decode;
                dc.seed = seed;
                auto prompt = rec.caption_prompt();
                prompt.validate(model.config());
                auto gen = decode(engine, prompt, dc, rec.id);
                CaptionOutput cap{rec.id, gen.tokens, tokens_.decode(gen.tokens)};
                gen.text = cap.text;
                out.caption = std::move(cap);
                out.generations.push_back(std::move(gen));
            }
            if (ev.pope) {
                std::vector<QaTurn> prior;
                const auto& sys = rec.system_ids.empty() ? system_ids : rec.system_ids;
                for (std::size_t t = 0; t < rec.pope.size(); ++t) {
                    const auto& probe = rec.pope[t];
                    const auto question =
                        tokens_.encode("user : " + pope_question(probe.object) + " assistant :");
                    auto prompt = build_multiturn_context(rec.vision, rec.d_model, sys, prior, question,
                                                          max_seq);
                    prompt.validate(model.config());
                    DecodeConfig dc = config_.decode;
                    dc.max_new_tokens = ev.pope_max_new_tokens;
                    const std::string stream = rec.id + "#pope" + std::to_string(t);
                    dc.seed = derive_seed(config_.decode.seed, stream);
                    auto gen = decode(engine, prompt, dc, stream);
                    gen.text = tokens_.decode(gen.tokens);
                    out.pope.push_back({rec.id, probe.object, probe.split, probe.gold_yes, gen.tokens, gen.text});
                    prior.push_back({question, strip_eos(gen.tokens, dc.eos_id)});
                    out.generations.push_back(std::move(gen));
                }
            }
        } catch (const std::exception& e) {
            out = RecordResult{};
            out.error = e.what();
        }
        return out;
    };

    std::vector<RecordResult> results(records_.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(ev.workers, records_.size()));
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < records_.size();) {
            results[i] = evaluate_record(records_[i]);
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    EvalReport report;
    report.config = to_json(effective);
    report.records = records_.size();
    std::vector<CaptionRecord> caption_records;
    std::vector<PopeItem> pope_items;
    std::vector<ThroughputSample> samples;
    std::uint64_t caption_tokens = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        auto& res = results[i];
        const auto& rec = records_[i];
        if (res.error) {
            report.errors.push_back({rec.id, *res.error});
            continue;
        }
        if (res.caption) {
            caption_tokens += strip_eos(res.caption->tokens, config_.decode.eos_id).size();
            caption_records.push_back({rec.id, res.caption->text,
                                       std::set<std::string>(rec.gt_objects.begin(), rec.gt_objects.end())});
            report.captions.push_back(std::move(*res.caption));
        }
        for (auto& p : res.pope) {
            pope_items.push_back({p.id, p.object, p.split, p.gold_yes, p.answer});
            report.pope_answers.push_back(std::move(p));
        }
        for (const auto& g : res.generations) {
            const double decode_s = g.decode_latency_s();
            report.timing.prefill_s += g.prefill_latency_s;
            report.timing.decode_s += decode_s;
            report.timing.generated_tokens += g.new_tokens();
            samples.push_back({g.new_tokens(), decode_s + (ev.include_prefill ? g.prefill_latency_s : 0.0)});
        }
    }
    if (report.errors.size() == records_.size()) {
        throw DataError("every record failed; first error: " + report.errors.front().message);
    }
    if (ev.chair && !caption_records.empty()) {
        report.chair = chair_scores(caption_records, vocab_);
        report.mean_caption_length =
            static_cast<double>(caption_tokens) / static_cast<double>(caption_records.size());
    }
    if (ev.pope && !pope_items.empty()) report.pope = pope_eval(pope_items);
    report.throughput_tps = throughput(samples);
    report.timing.wall_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

EvalReport run_eval(const RunConfig& config) {
    Evaluator evaluator(config);
    std::shared_ptr<MaskSink> sink;
    if (config.output.trace_masks) sink = std::make_shared<MaskTraceWriter>(*config.output.trace_masks);
    auto report = evaluator.run(config.spin, sink);
    sink.reset();
    write_reports(report, config.output);
    return report;
}

namespace {

nlohmann::json confusion_json(const Confusion& c) {
    return {{"tp", c.tp},
            {"fp", c.fp},
            {"tn", c.tn},
            {"fn", c.fn},
            {"unparsed", c.unparsed},
            {"accuracy", to_json(c.accuracy())},
            {"precision", to_json(c.precision())},
            {"recall", to_json(c.recall())},
            {"f1", to_json(c.f1())}};
}

template <class T>
nlohmann::json optional_json(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["version"] = r.version;
    j["config"] = r.config;
    j["notes"] = {
        {"chair_cs", "C_s counts captions containing at least one hallucinated object, per caption"},
        {"chair_f1", "micro-averaged over records: 2 sum|M&G| / (sum|M| + sum|G|)"},
        {"throughput", r.config.value("/eval/include_prefill"_json_pointer, false)
                           ? "generated tokens / (decode + prefill seconds)"
                           : "generated tokens / decode seconds (prefill excluded)"}};
    j["records"] = r.records;
    j["failed"] = r.errors.size();
    nlohmann::json metrics;
    if (r.chair) {
        metrics["chair"] = {{"cs", to_json(r.chair->cs)},
                            {"ci", to_json(r.chair->ci)},
                            {"precision", to_json(r.chair->precision)},
                            {"recall", to_json(r.chair->recall)},
                            {"f1", to_json(r.chair->f1)},
                            {"captions", r.chair->captions}};
    } else {
        metrics["chair"] = nullptr;
    }
    if (r.pope) {
        nlohmann::json splits = nlohmann::json::object();
        for (const auto& [split, c] : r.pope->splits) splits[std::string(to_string(split))] = confusion_json(c);
        metrics["pope"] = {{"splits", splits}, {"overall", confusion_json(r.pope->overall)}};
    } else {
        metrics["pope"] = nullptr;
    }
    metrics["mean_caption_length"] = optional_json(r.mean_caption_length);
    metrics["throughput_tps"] = optional_json(r.throughput_tps);
    j["metrics"] = metrics;

    auto& gens = j["generations"] = nlohmann::json::object();
    gens["captions"] = nlohmann::json::array();
    for (const auto& c : r.captions) gens["captions"].push_back({{"id", c.id}, {"tokens", c.tokens}, {"text", c.text}});
    gens["pope"] = nlohmann::json::array();
    for (const auto& p : r.pope_answers) {
        gens["pope"].push_back({{"id", p.id},
                                {"object", p.object},
                                {"split", to_string(p.split)},
                                {"gold", p.gold_yes ? "yes" : "no"},
                                {"tokens", p.tokens},
                                {"answer", p.answer}});
    }
    j["errors"] = nlohmann::json::array();
    for (const auto& e : r.errors) j["errors"].push_back({{"id", e.id}, {"message", e.message}});
    j["timing"] = {{"wall_s", r.timing.wall_s},
                   {"prefill_s", r.timing.prefill_s},
                   {"decode_s", r.timing.decode_s},
                   {"generated_tokens", r.timing.generated_tokens}};
    return j;
}

std::string report_to_csv(const EvalReport& r) {
    std::string out = "metric,value\n";
    auto row = [&](const std::string& name, double v) { out += name + "," + fmt(v) + "\n"; };
    row("records", static_cast<double>(r.records));
    row("failed", static_cast<double>(r.errors.size()));
    if (r.chair) {
        row("chair_cs", r.chair->cs.value());
        row("chair_ci", r.chair->ci.value());
        row("chair_precision", r.chair->precision.value());
        row("chair_recall", r.chair->recall.value());
        row("chair_f1", r.chair->f1.value());
    }
    if (r.pope) {
        auto confusion = [&](const std::string& prefix, const Confusion& c) {
            row(prefix + "_accuracy", c.accuracy().value());
            row(prefix + "_precision", c.precision().value());
            row(prefix + "_recall", c.recall().value());
            row(prefix + "_f1", c.f1().value());
            row(prefix + "_unparsed", static_cast<double>(c.unparsed));
        };
        for (const auto& [split, c] : r.pope->splits) confusion("pope_" + std::string(to_string(split)), c);
        confusion("pope_overall", r.pope->overall);
    }
    if (r.mean_caption_length) row("mean_caption_length", *r.mean_caption_length);
    if (r.throughput_tps) row("throughput_tps", *r.throughput_tps);
    row("wall_s", r.timing.wall_s);
    return out;
}

void write_reports(const EvalReport& r, const OutputSection& output) {
    auto write = [](const std::filesystem::path& path, const std::string& text) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + path.string() + " for writing");
        out << text;
    };
    if (output.report_json) write(*output.report_json, to_json(r).dump(2) + "\n");
    if (output.report_csv) write(*output.report_csv, report_to_csv(r));
}

}  // namespace spin
