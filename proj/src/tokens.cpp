#include "spin/tokens.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "spin/errors.hpp"

namespace spin {

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c) && c != '<' && c != '>' && c != '_') {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

TokenTable::TokenTable(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < 2 || words_[kUnk] != "<unk>" || words_[kEos] != "<eos>") {
        throw DataError("token table must start with <unk> and <eos>");
    }
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (words_[i].empty()) throw DataError("token table line " + std::to_string(i + 1) + " is empty");
        if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second) {
            throw DataError("token table line " + std::to_string(i + 1) + ": duplicate token '" +
                            words_[i] + "'");
        }
    }
}

TokenTable TokenTable::parse(std::string_view text, const std::string& source) {
    std::vector<std::string> words;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty() || line.find_first_of(" \t\r") != std::string::npos) {
            throw DataError(source, n, "expected exactly one token without whitespace");
        }
        words.push_back(line);
    }
    try {
        return TokenTable(std::move(words));
    } catch (const DataError& e) {
        throw DataError(source + ": " + e.what());
    }
}

TokenTable TokenTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open token table " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

std::string TokenTable::serialize() const {
    std::string out;
    for (const auto& w : words_) out += w + "\n";
    return out;
}

TokenId TokenTable::id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
}

bool TokenTable::contains(std::string_view word) const {
    return index_.count(std::string(word)) != 0;
}

const std::string& TokenTable::word(TokenId id) const {
    static const std::string unk = "<unk>";
    return id < words_.size() ? words_[id] : unk;
}

std::vector<TokenId> TokenTable::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

std::string TokenTable::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId t : ids) {
        if (t == kEos) break;
        if (!out.empty()) out += ' ';
        out += word(t);
    }
    return out;
}

}  // namespace spin
