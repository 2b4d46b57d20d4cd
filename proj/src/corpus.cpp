#include "spin/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "spin/errors.hpp"
#include "spin/rng.hpp"

namespace spin {

namespace {

double gaussian(SplitMix64& rng) {
    const double u1 = 1.0 - rng.uniform_double();  // (0, 1]
    const double u2 = rng.uniform_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string read_text(const std::filesystem::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw DataError(std::string("cannot open ") + what + " " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << text;
}

using Cooccurrence = std::map<std::pair<std::string, std::string>, double>;

Cooccurrence parse_cooccurrence(const std::filesystem::path& path, const ObjectVocabulary& vocab) {
    Cooccurrence table;
    std::istringstream in(read_text(path, "co-occurrence table"));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        std::istringstream fields(line);
        std::string a, b, count;
        if (!std::getline(fields, a, '\t') || !std::getline(fields, b, '\t') ||
            !std::getline(fields, count) || count.find('\t') != std::string::npos) {
            throw DataError(path.string(), n, "expected 'object<TAB>object<TAB>count'");
        }
        if (!vocab.is_canonical(a) || !vocab.is_canonical(b)) {
            throw DataError(path.string(), n, "objects must be canonical vocabulary names");
        }
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(count, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != count.size()) throw DataError(path.string(), n, "count is not a number");
        table[{a, b}] += v;
        table[{b, a}] += v;
    }
    return table;
}

}  // namespace

MultimodalPrompt CorpusRecord::caption_prompt() const {
    std::vector<TokenId> text(system_ids);
    text.insert(text.end(), prompt_ids.begin(), prompt_ids.end());
    return make_prompt(vision, d_model, text);
}

nlohmann::json to_json(const CorpusRecord& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < r.n_vision(); ++i) {
        rows.push_back(std::vector<float>(r.vision.begin() + static_cast<std::ptrdiff_t>(i * r.d_model),
                                          r.vision.begin() + static_cast<std::ptrdiff_t>((i + 1) * r.d_model)));
    }
    nlohmann::json pope = nlohmann::json::array();
    for (const auto& p : r.pope) {
        pope.push_back({{"object", p.object}, {"gold", p.gold_yes ? "yes" : "no"}, {"split", to_string(p.split)}});
    }
    nlohmann::json j = {{"id", r.id},
                        {"vision_embeddings", rows},
                        {"prompt_ids", r.prompt_ids},
                        {"gt_objects", r.gt_objects},
                        {"pope", pope}};
    if (!r.system_ids.empty()) j["system_ids"] = r.system_ids;
    return j;
}

CorpusRecord corpus_record_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"id", "vision_embeddings", "prompt_ids",
                                                "system_ids", "gt_objects", "pope"};
    if (!j.is_object()) throw DataError("record is not a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw DataError("unknown record key '" + key + "'");
    }
    CorpusRecord r;
    try {
        r.id = j.at("id").get<std::string>();
        const auto& rows = j.at("vision_embeddings");
        if (!rows.is_array() || rows.empty()) throw DataError("vision_embeddings must be a non-empty array");
        for (const auto& row : rows) {
            const auto values = row.get<std::vector<float>>();
            if (r.d_model == 0) r.d_model = values.size();
            if (values.empty() || values.size() != r.d_model) {
                throw DataError("vision_embeddings rows must share one non-zero width");
            }
            for (float v : values) {
                if (!std::isfinite(v)) throw DataError("vision_embeddings contains a non-finite value");
            }
            r.vision.insert(r.vision.end(), values.begin(), values.end());
        }
        r.prompt_ids = j.at("prompt_ids").get<std::vector<TokenId>>();
        if (j.contains("system_ids")) r.system_ids = j.at("system_ids").get<std::vector<TokenId>>();
        r.gt_objects = j.at("gt_objects").get<std::vector<std::string>>();
        if (r.gt_objects.empty()) throw DataError("gt_objects must not be empty");
        if (j.contains("pope")) {
            for (const auto& p : j.at("pope")) {
                PopeProbe probe;
                probe.object = p.at("object").get<std::string>();
                const auto gold = p.at("gold").get<std::string>();
                if (gold != "yes" && gold != "no") throw DataError("pope gold must be \"yes\" or \"no\"");
                probe.gold_yes = gold == "yes";
                probe.split = parse_pope_split(p.at("split").get<std::string>());
                r.pope.push_back(probe);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed record: ") + e.what());
    }
    return r;
}

std::vector<CorpusRecord> parse_corpus(std::string_view text, const std::string& source) {
    std::vector<CorpusRecord> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t n = 0;
    std::set<std::string> ids;
    while (std::getline(in, line)) {
        ++n;
        try {
            out.push_back(corpus_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(source, n, e.what());
        } catch (const DataError& e) {
            throw DataError(source, n, e.what());
        }
        if (!ids.insert(out.back().id).second) {
            throw DataError(source, n, "duplicate record id '" + out.back().id + "'");
        }
    }
    return out;
}

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path) {
    return parse_corpus(read_text(path, "corpus"), path.string());
}

std::string serialize_corpus(const std::vector<CorpusRecord>& records) {
    std::string out;
    for (const auto& r : records) out += to_json(r).dump() + "\n";
    return out;
}

void SyntheticCorpusSpec::validate() const {
    if (n_images < 1) throw ConfigValueError("corpus.n_images", "must be >= 1");
    if (vision_tokens < 1) throw ConfigValueError("corpus.vision_tokens", "must be >= 1");
    if (d_model < 1) throw ConfigValueError("corpus.d_model", "must be >= 1");
    if (min_objects < 1 || min_objects > max_objects) {
        throw ConfigValueError("corpus.min_objects", "must satisfy 1 <= min_objects <= max_objects");
    }
    if (splits.empty()) throw ConfigValueError("corpus.splits", "must not be empty");
    if (pope_per_image % (2 * splits.size()) != 0) {
        throw ConfigValueError("corpus.pope_per_image",
                               "must be a multiple of 2 x number of splits for yes/no balance");
    }
    if (!(noise >= 0.0f)) throw ConfigValueError("corpus.noise", "must be >= 0");
}

ObjectVocabulary default_object_vocabulary() {
    static const std::vector<std::pair<std::string, std::vector<std::string>>> objects = {
        {"person", {"man", "woman", "people", "boy", "girl", "child"}},
        {"dog", {"puppy"}},
        {"cat", {"kitten"}},
        {"car", {}},
        {"bus", {}},
        {"bicycle", {"bike"}},
        {"motorcycle", {"motorbike"}},
        {"truck", {}},
        {"boat", {"ship"}},
        {"bird", {}},
        {"horse", {"pony"}},
        {"sheep", {"lamb"}},
        {"cow", {"cattle"}},
        {"elephant", {}},
        {"zebra", {}},
        {"giraffe", {}},
        {"umbrella", {}},
        {"handbag", {"purse"}},
        {"chair", {}},
        {"couch", {"sofa"}},
        {"bed", {}},
        {"dining table", {"table"}},
        {"tv", {"television"}},
        {"laptop", {"computer"}},
        {"cell phone", {"phone"}},
        {"book", {}},
        {"clock", {}},
        {"vase", {}},
        {"cup", {"mug"}},
        {"fork", {}},
        {"knife", {}},
        {"spoon", {}},
        {"bowl", {}},
        {"banana", {}},
        {"apple", {}},
        {"pizza", {}},
        {"cake", {}},
        {"hot dog", {}},
        {"sandwich", {}},
        {"traffic light", {}},
        {"fire hydrant", {"hydrant"}},
        {"stop sign", {}},
        {"bench", {}},
        {"skateboard", {}},
        {"surfboard", {}},
        {"teddy bear", {}},
        {"toilet", {}},
        {"sink", {}},
        {"refrigerator", {"fridge"}},
        {"oven", {}},
    };
    ObjectVocabulary vocab;
    for (const auto& [canonical, synonyms] : objects) {
        vocab.add(canonical, canonical);
        for (const auto& s : synonyms) vocab.add(s, canonical);
    }
    return vocab;
}

TokenTable build_token_table(const ObjectVocabulary& vocab) {
    std::vector<std::string> words = {"<unk>", "<eos>"};
    std::set<std::string> seen(words.begin(), words.end());
    auto add_text = [&](std::string_view text) {
        for (auto& w : split_words(text)) {
            if (seen.insert(w).second) words.push_back(w);
        }
    };
    add_text("yes no");
    add_text(kSystemPrompt);
    add_text(kCaptionInstruction);
    add_text(pope_question("object"));
    add_text("there is are an the of on with and next to near in front behind picture photo "
             "scene shows image i see it this that some two three several small large white "
             "black red blue green sitting standing");
    for (const auto& surface : split_words(vocab.to_tsv())) add_text(surface);
    return TokenTable(std::move(words));
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
    spec.validate();
    SyntheticCorpus corpus{{}, spec.vocab_path ? ObjectVocabulary::load(*spec.vocab_path)
                                               : default_object_vocabulary(),
                           TokenTable({"<unk>", "<eos>"})};
    corpus.tokens = build_token_table(corpus.vocab);
    const std::vector<std::string> objects(corpus.vocab.canonical_names().begin(),
                                           corpus.vocab.canonical_names().end());
    const std::size_t n_obj = objects.size();
    const std::size_t per_split = spec.pope_per_image / spec.splits.size();
    const std::size_t yes_per_split = per_split / 2;
    const std::size_t no_per_split = per_split / 2;
    if (spec.max_objects > n_obj) {
        throw ConfigValueError("corpus.max_objects", "vocabulary has only " + std::to_string(n_obj) +
                                                         " objects");
    }
    if (n_obj < spec.max_objects + no_per_split) {
        throw ConfigValueError("corpus.pope_per_image",
                               "vocabulary too small for the requested negative probes");
    }

    SplitMix64 rng(spec.seed);
    std::vector<std::vector<float>> directions(n_obj, std::vector<float>(spec.d_model));
    for (auto& dir : directions) {
        double norm = 0.0;
        std::vector<double> g(spec.d_model);
        for (auto& v : g) {
            v = gaussian(rng);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (std::size_t c = 0; c < spec.d_model; ++c) dir[c] = static_cast<float>(g[c] / norm);
    }

    // Planted sets, popularity-weighted sampling without replacement.
    std::vector<double> weight(n_obj);
    for (std::size_t i = 0; i < n_obj; ++i) {
        weight[i] = 1.0 / std::pow(static_cast<double>(i + 1), spec.popularity_exponent);
    }
    std::vector<std::vector<std::size_t>> planted(spec.n_images);
    std::vector<std::size_t> frequency(n_obj, 0);
    for (auto& set : planted) {
        const std::size_t k = spec.min_objects + rng.uniform_index(spec.max_objects - spec.min_objects + 1);
        std::vector<double> w = weight;
        for (std::size_t pick = 0; pick < k; ++pick) {
            double total = 0.0;
            for (double x : w) total += x;
            double u = rng.uniform_double() * total;
            std::size_t chosen = n_obj - 1;
            for (std::size_t i = 0; i < n_obj; ++i) {
                if (w[i] == 0.0) continue;
                if (u < w[i]) {
                    chosen = i;
                    break;
                }
                u -= w[i];
            }
            while (w[chosen] == 0.0) chosen = (chosen + n_obj - 1) % n_obj;
            w[chosen] = 0.0;
            set.push_back(chosen);
            ++frequency[chosen];
        }
    }

    Cooccurrence cooc;
    if (spec.cooccurrence_path) {
        cooc = parse_cooccurrence(*spec.cooccurrence_path, corpus.vocab);
    } else {
        for (const auto& set : planted) {
            for (std::size_t a : set) {
                for (std::size_t b : set) {
                    if (a != b) cooc[{objects[a], objects[b]}] += 1.0;
                }
            }
        }
    }

    const auto system_ids = corpus.tokens.encode(kSystemPrompt);
    const auto prompt_ids = corpus.tokens.encode(kCaptionInstruction);
    for (std::size_t img = 0; img < spec.n_images; ++img) {
        CorpusRecord r;
        char id[32];
        std::snprintf(id, sizeof id, "img-%05zu", img);
        r.id = id;
        r.d_model = spec.d_model;
        r.system_ids = system_ids;
        r.prompt_ids = prompt_ids;
        const auto& set = planted[img];
        for (std::size_t o : set) r.gt_objects.push_back(objects[o]);

        std::vector<float> mean(spec.d_model, 0.0f);
        for (std::size_t o : set) {
            for (std::size_t c = 0; c < spec.d_model; ++c) mean[c] += directions[o][c];
        }
        for (float& v : mean) v /= static_cast<float>(set.size());
        for (std::size_t t = 0; t < spec.vision_tokens; ++t) {
            for (std::size_t c = 0; c < spec.d_model; ++c) {
                r.vision.push_back(mean[c] + spec.noise * static_cast<float>(gaussian(rng)));
            }
        }

        std::set<std::size_t> in_set(set.begin(), set.end());
        std::vector<std::size_t> absent;
        for (std::size_t i = 0; i < n_obj; ++i) {
            if (!in_set.count(i)) absent.push_back(i);
        }
        for (std::size_t s = 0; s < spec.splits.size(); ++s) {
            const PopeSplit split = spec.splits[s];
            for (std::size_t i = 0; i < yes_per_split; ++i) {
                r.pope.push_back({objects[set[(s * yes_per_split + i) % set.size()]], split, true});
            }
            std::vector<std::size_t> negatives = absent;
            if (split == PopeSplit::random) {
                for (std::size_t i = negatives.size(); i > 1; --i) {
                    std::swap(negatives[i - 1], negatives[rng.uniform_index(i)]);
                }
            } else if (split == PopeSplit::popular) {
                std::stable_sort(negatives.begin(), negatives.end(), [&](std::size_t a, std::size_t b) {
                    return frequency[a] > frequency[b];
                });
            } else {
                auto related = [&](std::size_t o) {
                    double score = 0.0;
                    for (std::size_t p : set) {
                        auto it = cooc.find({objects[p], objects[o]});
                        if (it != cooc.end()) score += it->second;
                    }
                    return score;
                };
                std::stable_sort(negatives.begin(), negatives.end(), [&](std::size_t a, std::size_t b) {
                    const double ra = related(a), rb = related(b);
                    if (ra != rb) return ra > rb;
                    return frequency[a] > frequency[b];
                });
            }
            for (std::size_t i = 0; i < no_per_split; ++i) {
                r.pope.push_back({objects[negatives[i]], split, false});
            }
        }
        corpus.records.push_back(std::move(r));
    }
    return corpus;
}

void write_corpus_files(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text(dir / "corpus.jsonl", serialize_corpus(corpus.records));
    write_text(dir / "vocab.tsv", corpus.vocab.to_tsv());
    write_text(dir / "tokens.txt", corpus.tokens.serialize());
}

}  // namespace spin
