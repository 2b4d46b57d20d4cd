#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <unistd.h>
#include <string>
#include <vector>

#include "spin/checkpoint.hpp"
#include "spin/model.hpp"
#include "spin/prompt.hpp"
#include "spin/rng.hpp"

namespace spin::testing {

inline ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 4;
    c.d_model = 32;
    c.d_ffn = 64;
    c.vocab_size = 50;
    c.max_seq_len = 96;
    return c;
}

inline std::shared_ptr<const Model> make_model(const ModelConfig& c, std::uint64_t seed) {
    return std::make_shared<const Model>(std::make_shared<const Checkpoint>(init_checkpoint(c, seed)));
}

inline MultimodalPrompt random_prompt(const ModelConfig& c, std::size_t n_vision, std::size_t n_text,
                                      std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<float> vision(n_vision * c.d_model);
    for (auto& v : vision) v = 2.0f * rng.uniform_float() - 1.0f;
    std::vector<TokenId> text(n_text);
    for (auto& t : text) t = static_cast<TokenId>(2 + rng.uniform_index(c.vocab_size - 2));
    return make_prompt(std::move(vision), c.d_model, text);
}

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("spin-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace spin::testing
