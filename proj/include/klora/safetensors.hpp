#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "klora/tensor.hpp"

namespace klora {

using Metadata = std::map<std::string, std::string>;

/// One entry of a safetensors header. `dtype` is empty for dtypes this tool does not
/// decode (I64, U8, ...); such tensors are still range-checked.
struct TensorRecord {
    std::string name;
    std::string dtype_tag;
    std::optional<DType> dtype;
    std::vector<std::int64_t> shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::uint64_t element_count() const noexcept;
};

/// A parsed container: header records in file order plus the raw data region.
struct Container {
    std::vector<TensorRecord> records;
    Metadata metadata;
    std::vector<std::byte> data;

    std::span<const std::byte> payload(const TensorRecord& record) const;
};

/// Tensor ready for writing.
struct TensorBlob {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::vector<std::byte> bytes;
};

Container read_container(std::span<const std::byte> file_bytes);
std::vector<std::byte> write_container(std::span<const TensorBlob> tensors, const Metadata& metadata);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
/// Writes via a temporary sibling file and rename.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

enum class NamingConvention { UpDown, AB };

std::string_view convention_name(NamingConvention convention) noexcept;
std::string down_suffix(NamingConvention convention);
std::string up_suffix(NamingConvention convention);

/// How a factor was stored on disk, so it can be written back unchanged.
struct FactorLayout {
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    bool transposed = false;
};

/// Paired adapter for one base weight: delta = up · down.
struct LoraLayer {
    std::string base_module;
    DenseMatrix down;  // rank × in
    DenseMatrix up;    // out × rank
    std::size_t rank = 0;
    std::optional<float> alpha;
    FactorLayout down_layout;
    FactorLayout up_layout;

    std::size_t delta_rows() const noexcept { return up.rows(); }
    std::size_t delta_cols() const noexcept { return down.cols(); }
};

struct PairingResult {
    std::vector<LoraLayer> layers;
    NamingConvention convention = NamingConvention::UpDown;
    std::vector<std::string> warnings;
};

/// Groups down/up (or A/B) factors by base module and attaches "<base>.alpha" scalars.
/// Non-LoRA tensors produce warnings. Orphans, duplicates, mixed conventions and rank
/// mismatches throw.
PairingResult pair_lora_layers(std::span<const TensorRecord> records, std::span<const std::byte> data);

class LoraModel {
public:
    LoraModel() = default;
    LoraModel(std::vector<LoraLayer> layers, NamingConvention convention);

    const std::vector<LoraLayer>& layers() const noexcept { return layers_; }
    std::size_t size() const noexcept { return layers_.size(); }
    const LoraLayer* find(std::string_view base_module) const;

    NamingConvention convention() const noexcept { return convention_; }

    std::string source_path;
    std::string sha256;  // hex digest of the file bytes, empty when built in memory
    Metadata metadata;
    std::vector<std::string> warnings;

private:
    std::vector<LoraLayer> layers_;
    std::map<std::string, std::size_t, std::less<>> index_;
    NamingConvention convention_ = NamingConvention::UpDown;
};

LoraModel parse_buffer(std::span<const std::byte> file_bytes, std::string source_name = {});
LoraModel parse_file(const std::filesystem::path& path);

/// Tensors for one layer under `convention`, in the layer's original dtype and layout.
std::vector<TensorBlob> layer_blobs(const LoraLayer& layer, NamingConvention convention);

std::vector<std::byte> serialize_model(const LoraModel& model);
void serialize_file(const LoraModel& model, const std::filesystem::path& path);

}  // namespace klora
