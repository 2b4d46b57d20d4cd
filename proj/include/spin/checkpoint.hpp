#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spin/model_config.hpp"

namespace spin {

struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;

    std::size_t numel() const;
};

struct TensorShape {
    std::string name;
    std::vector<std::size_t> shape;
};

// Names and shapes of every tensor a checkpoint for `config` must hold, in
// file order. Matrices are stored [out, in], row-major.
std::vector<TensorShape> expected_tensor_shapes(const ModelConfig& config);

// Model weights. Immutable once handed to a Model; share via
// std::shared_ptr<const Checkpoint>.
class Checkpoint {
public:
    // Validates that `tensors` matches expected_tensor_shapes(config) exactly
    // (names, order, shapes) and that all values are finite.
    Checkpoint(ModelConfig config, std::vector<Tensor> tensors);

    const ModelConfig& config() const { return config_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }
    const Tensor& tensor(std::string_view name) const;
    // For building rigged checkpoints in tools and tests. Call validate()
    // after editing.
    Tensor& mutable_tensor(std::string_view name);

    void validate() const;

private:
    ModelConfig config_;
    std::vector<Tensor> tensors_;
};

// Weights uniform in [-s, s], s = 1/sqrt(d_model), drawn in file order from a
// single SplitMix64(seed) stream. Norm gains are initialised to 1.
Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed);

// File layout: "SPNM", u32 LE header length, JSON header, then raw LE f32
// tensor data in header order. Offsets in the header are byte offsets
// relative to the start of the data block.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes,
                                  const std::string& source = "<memory>");

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Reads only the header.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace spin
