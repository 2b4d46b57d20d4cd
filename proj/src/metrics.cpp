#include "spin/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "spin/errors.hpp"

namespace spin {

namespace {

std::vector<std::string> normalise_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

std::string join(const std::vector<std::string>& words, std::size_t from, std::size_t n) {
    std::string out;
    for (std::size_t i = from; i < from + n; ++i) {
        if (i > from) out += ' ';
        out += words[i];
    }
    return out;
}

std::string normalise_phrase(std::string_view text) {
    const auto words = normalise_words(text);
    return join(words, 0, words.size());
}

}  // namespace

nlohmann::json to_json(const Ratio& r) {
    return {{"num", r.num}, {"den", r.den}, {"value", r.value()}};
}

ObjectVocabulary ObjectVocabulary::parse_tsv(std::string_view text, const std::string& source) {
    ObjectVocabulary vocab;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw DataError(source, n, "expected 'surface<TAB>canonical'");
        }
        const std::string surface = line.substr(0, tab);
        const std::string canonical = line.substr(tab + 1);
        if (normalise_phrase(surface).empty() || normalise_phrase(canonical).empty()) {
            throw DataError(source, n, "empty surface or canonical name");
        }
        try {
            vocab.add(surface, canonical);
        } catch (const DataError& e) {
            throw DataError(source, n, e.what());
        }
    }
    return vocab;
}

ObjectVocabulary ObjectVocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open object vocabulary " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_tsv(ss.str(), path.string());
}

std::string ObjectVocabulary::to_tsv() const {
    std::string out;
    for (const auto& [surface, canonical] : surface_) out += surface + "\t" + canonical + "\n";
    return out;
}

void ObjectVocabulary::add(const std::string& surface_raw, const std::string& canonical_raw) {
    const std::string surface = normalise_phrase(surface_raw);
    const std::string canonical = normalise_phrase(canonical_raw);
    auto existing = surface_.find(canonical);
    if (existing != surface_.end() && existing->second != canonical) {
        throw DataError("'" + canonical + "' is already a synonym of '" + existing->second + "'");
    }
    if (surface != canonical && canonical_.count(surface)) {
        throw DataError("canonical name '" + surface + "' cannot map to '" + canonical + "'");
    }
    auto prior = surface_.find(surface);
    if (prior != surface_.end() && prior->second != canonical) {
        throw DataError("'" + surface + "' already maps to '" + prior->second + "'");
    }
    canonical_.insert(canonical);
    surface_[canonical] = canonical;
    surface_[surface] = canonical;
    for (const auto* p : {&surface, &canonical}) {
        max_words_ = std::max(max_words_, normalise_words(*p).size());
    }
}

std::optional<std::string> ObjectVocabulary::lookup(const std::string& phrase) const {
    auto it = surface_.find(phrase);
    if (it == surface_.end()) return std::nullopt;
    return it->second;
}

ObjectMentions extract_objects(std::string_view caption, const ObjectVocabulary& vocab) {
    ObjectMentions out;
    const auto words = normalise_words(caption);
    std::size_t i = 0;
    while (i < words.size()) {
        bool matched = false;
        const std::size_t longest = std::min(vocab.max_phrase_words(), words.size() - i);
        for (std::size_t n = longest; n >= 1; --n) {
            if (auto name = vocab.lookup(join(words, i, n))) {
                out.objects.insert(*name);
                out.instances.push_back(*name);
                i += n;
                matched = true;
                break;
            }
        }
        if (!matched) ++i;
    }
    return out;
}

ChairReport chair_scores(std::span<const CaptionRecord> records, const ObjectVocabulary& vocab) {
    if (records.empty()) throw DataError("CHAIR needs at least one caption record");
    ChairReport r;
    std::uint64_t tp = 0, mentioned = 0, gt = 0;
    for (const auto& rec : records) {
        const auto m = extract_objects(rec.caption, vocab);
        std::uint64_t hallucinated = 0;
        for (const auto& inst : m.instances) {
            if (!rec.gt_objects.count(inst)) ++hallucinated;
        }
        r.ci.num += hallucinated;
        r.ci.den += m.instances.size();
        r.cs.num += hallucinated > 0 ? 1 : 0;
        r.cs.den += 1;
        for (const auto& obj : m.objects) tp += rec.gt_objects.count(obj);
        mentioned += m.objects.size();
        gt += rec.gt_objects.size();
    }
    r.precision = {tp, mentioned};
    r.recall = {tp, gt};
    r.f1 = {2 * tp, mentioned + gt};
    r.captions = records.size();
    return r;
}

std::string_view to_string(PopeSplit s) {
    switch (s) {
        case PopeSplit::random: return "random";
        case PopeSplit::popular: return "popular";
        case PopeSplit::adversarial: return "adversarial";
    }
    return "?";
}

PopeSplit parse_pope_split(std::string_view tag) {
    for (auto s : {PopeSplit::random, PopeSplit::popular, PopeSplit::adversarial}) {
        if (to_string(s) == tag) return s;
    }
    throw DataError("unknown POPE split '" + std::string(tag) + "'");
}

PopeAnswer parse_pope_answer(std::string_view response) {
    for (const auto& w : normalise_words(response)) {
        if (w == "yes") return PopeAnswer::yes;
        if (w == "no") return PopeAnswer::no;
    }
    return PopeAnswer::unparsed;
}

std::string pope_question(std::string_view object) {
    return "Is there a " + std::string(object) + " in the image?";
}

Confusion& Confusion::operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    unparsed += o.unparsed;
    return *this;
}

PopeReport pope_eval(std::span<const PopeItem> items) {
    PopeReport report;
    for (const auto& item : items) {
        Confusion& c = report.splits[item.split];
        const PopeAnswer a = parse_pope_answer(item.answer);
        if (a == PopeAnswer::unparsed) {
            ++c.unparsed;
            (item.gold_yes ? c.fn : c.fp) += 1;
        } else if (a == PopeAnswer::yes) {
            (item.gold_yes ? c.tp : c.fp) += 1;
        } else {
            (item.gold_yes ? c.fn : c.tn) += 1;
        }
    }
    for (const auto& [_, c] : report.splits) report.overall += c;
    return report;
}

MultimodalPrompt build_multiturn_context(std::vector<float> vision, std::size_t d_model,
                                         std::span<const TokenId> system,
                                         std::span<const QaTurn> prior,
                                         std::span<const TokenId> next_question,
                                         std::size_t max_seq_len) {
    std::vector<TokenId> text(system.begin(), system.end());
    for (const auto& turn : prior) {
        text.insert(text.end(), turn.question.begin(), turn.question.end());
        text.insert(text.end(), turn.answer.begin(), turn.answer.end());
    }
    text.insert(text.end(), next_question.begin(), next_question.end());
    auto prompt = make_prompt(std::move(vision), d_model, text);
    if (prompt.size() >= max_seq_len) {
        throw GenerationLengthError("multi-turn context of " + std::to_string(prompt.size()) +
                                    " tokens exceeds max_seq_len " + std::to_string(max_seq_len));
    }
    return prompt;
}

std::optional<double> throughput(std::span<const ThroughputSample> samples) {
    std::size_t tokens = 0;
    double seconds = 0.0;
    for (const auto& s : samples) {
        tokens += s.tokens;
        seconds += s.seconds;
    }
    if (tokens == 0 || seconds <= 0.0) return std::nullopt;
    return static_cast<double>(tokens) / seconds;
}

}  // namespace spin
