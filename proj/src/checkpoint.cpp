#include "spin/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "spin/errors.hpp"
#include "spin/rng.hpp"

namespace spin {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'N', 'M'};

bool is_norm(const std::string& name) {
    return name == "norm" || name.ends_with(".attn_norm") || name.ends_with(".ffn_norm");
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::size_t Tensor::numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::vector<TensorShape> expected_tensor_shapes(const ModelConfig& c) {
    std::vector<TensorShape> out;
    out.push_back({"tok_embeddings", {c.vocab_size, c.d_model}});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "attn_norm", {c.d_model}});
        out.push_back({p + "wq", {c.d_model, c.d_model}});
        out.push_back({p + "wk", {c.d_model, c.d_model}});
        out.push_back({p + "wv", {c.d_model, c.d_model}});
        out.push_back({p + "wo", {c.d_model, c.d_model}});
        out.push_back({p + "ffn_norm", {c.d_model}});
        out.push_back({p + "w1", {c.d_ffn, c.d_model}});
        out.push_back({p + "w2", {c.d_model, c.d_ffn}});
    }
    out.push_back({"norm", {c.d_model}});
    out.push_back({"output", {c.vocab_size, c.d_model}});
    return out;
}

Checkpoint::Checkpoint(ModelConfig config, std::vector<Tensor> tensors)
    : config_(config), tensors_(std::move(tensors)) {
    config_.validate();
    validate();
}

void Checkpoint::validate() const {
    const auto expected = expected_tensor_shapes(config_);
    if (expected.size() != tensors_.size()) {
        throw ShapeError("checkpoint holds " + std::to_string(tensors_.size()) +
                         " tensors, expected " + std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& t = tensors_[i];
        if (t.name != expected[i].name) {
            throw ShapeError("tensor #" + std::to_string(i) + " is '" + t.name + "', expected '" +
                             expected[i].name + "'");
        }
        if (t.shape != expected[i].shape) {
            throw ShapeError("tensor '" + t.name + "' has shape " + shape_str(t.shape) +
                             ", expected " + shape_str(expected[i].shape));
        }
        if (t.data.size() != t.numel()) {
            throw ShapeError("tensor '" + t.name + "' data size does not match its shape");
        }
        for (float v : t.data) {
            if (!std::isfinite(v)) {
                throw DataError("tensor '" + t.name + "' contains a non-finite value");
            }
        }
    }
}

const Tensor& Checkpoint::tensor(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return t;
    }
    throw DataError("no tensor named '" + std::string(name) + "'");
}

Tensor& Checkpoint::mutable_tensor(std::string_view name) {
    return const_cast<Tensor&>(std::as_const(*this).tensor(name));
}

Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    SplitMix64 rng(seed);
    const float s = 1.0f / std::sqrt(static_cast<float>(config.d_model));
    std::vector<Tensor> tensors;
    for (auto& spec : expected_tensor_shapes(config)) {
        Tensor t{spec.name, spec.shape, {}};
        t.data.resize(t.numel());
        if (is_norm(t.name)) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else {
            for (auto& v : t.data) {
                const float u = rng.uniform_float();
                v = s * (2.0f * u - 1.0f);
            }
        }
        tensors.push_back(std::move(t));
    }
    return Checkpoint(config, std::move(tensors));
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json header;
    header["config"] = to_json(ckpt.config());
    header["tensors"] = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& t : ckpt.tensors()) {
        header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.numel() * sizeof(float);
    }
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& t : ckpt.tensors()) {
        for (float v : t.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            put_u32(out, bits);
        }
    }
    return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw DataError(source + ": not a checkpoint (bad magic)");
    }
    const std::uint32_t header_len = get_u32(bytes.data() + 4);
    if (bytes.size() < 8 + static_cast<std::size_t>(header_len)) {
        throw DataError(source + ": truncated header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(source + ": malformed header: " + e.what());
    }

    ModelConfig config;
    std::vector<Tensor> tensors;
    const std::uint8_t* data = bytes.data() + 8 + header_len;
    const std::size_t data_len = bytes.size() - 8 - header_len;
    std::size_t expected_offset = 0;
    try {
        config = model_config_from_json(header.at("config"), "config");
        for (const auto& entry : header.at("tensors")) {
            Tensor t;
            t.name = entry.at("name").get<std::string>();
            t.shape = entry.at("shape").get<std::vector<std::size_t>>();
            const auto offset = entry.at("offset").get<std::size_t>();
            if (offset != expected_offset) {
                throw DataError(source + ": tensor '" + t.name + "' offset " +
                                std::to_string(offset) + " is not contiguous");
            }
            const std::size_t nbytes = t.numel() * sizeof(float);
            if (offset + nbytes > data_len) {
                throw DataError(source + ": tensor '" + t.name + "' runs past end of file");
            }
            t.data.resize(t.numel());
            for (std::size_t i = 0; i < t.data.size(); ++i) {
                const std::uint32_t bits = get_u32(data + offset + 4 * i);
                std::memcpy(&t.data[i], &bits, sizeof bits);
            }
            expected_offset += nbytes;
            tensors.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(source + ": malformed header: " + e.what());
    } catch (const ConfigError& e) {
        throw DataError(source + ": invalid config: " + e.what());
    }
    if (expected_offset != data_len) {
        throw DataError(source + ": " + std::to_string(data_len - expected_offset) +
                        " trailing bytes after tensor data");
    }
    try {
        return Checkpoint(config, std::move(tensors));
    } catch (const DataError& e) {
        throw DataError(source + ": " + e.what());
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path.string());
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::uint8_t head[8];
    if (!in.read(reinterpret_cast<char*>(head), 8) || std::memcmp(head, kMagic, 4) != 0) {
        throw DataError(path.string() + ": not a checkpoint (bad magic)");
    }
    std::string text(get_u32(head + 4), '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(text.size()))) {
        throw DataError(path.string() + ": truncated header");
    }
    try {
        return model_config_from_json(nlohmann::json::parse(text).at("config"), "config");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": malformed header: " + e.what());
    } catch (const ConfigError& e) {
        throw DataError(path.string() + ": invalid config: " + e.what());
    }
}

}  // namespace spin
