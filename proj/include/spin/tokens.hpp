#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "spin/model_config.hpp"

namespace spin {

// Lowercases, splits on whitespace and splits punctuation off into
// one-character words.
std::vector<std::string> split_words(std::string_view text);

// Word-level id <-> string table, one token per line (id = line index).
// Ids 0 and 1 must be "<unk>" and "<eos>".
class TokenTable {
public:
    static constexpr TokenId kUnk = 0;
    static constexpr TokenId kEos = 1;

    explicit TokenTable(std::vector<std::string> words);
    static TokenTable parse(std::string_view text, const std::string& source = "<memory>");
    static TokenTable load(const std::filesystem::path& path);
    std::string serialize() const;

    std::size_t size() const { return words_.size(); }
    TokenId id(std::string_view word) const;  // kUnk when absent
    bool contains(std::string_view word) const;
    const std::string& word(TokenId id) const;

    std::vector<TokenId> encode(std::string_view text) const;
    // Space-joined words; stops at the first eos.
    std::string decode(std::span<const TokenId> ids) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace spin
