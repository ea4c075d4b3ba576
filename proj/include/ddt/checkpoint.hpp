#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ddt/config.hpp"

namespace ddt {

enum class ElementType : std::uint8_t { f32 = 1, f64 = 2, i32 = 3, i64 = 4, u8 = 5 };

std::size_t element_size(ElementType t);
const char* element_name(ElementType t);

/// Dense array with raw little-endian storage.
struct NamedArray {
    ElementType type = ElementType::f32;
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> data;

    std::int64_t numel() const;
    bool operator==(const NamedArray&) const = default;
};

NamedArray to_array(const torch::Tensor& t);
torch::Tensor to_tensor(const NamedArray& a);

/// Named-array store plus a metadata document.
///
/// On disk:
///
///     "DDTC" | schema u32 | step u64 | metadata (u64 length + JSON UTF-8)
///     | array count u32 | per array: name (u32 length + bytes), type u8,
///       rank u32, dims i64 x rank, byte length u64, raw bytes
///
/// All integers little-endian.
struct CheckpointContainer {
    static constexpr std::uint32_t kSchemaVersion = 1;

    std::map<std::string, NamedArray> arrays;
    json metadata = json::object();
    std::uint64_t step = 0;

    // Throws std::invalid_argument if `name` is already present.
    void add(const std::string& name, NamedArray array);
    void add(const std::string& name, const torch::Tensor& t) { add(name, to_array(t)); }
    const NamedArray& at(const std::string& name) const;
    torch::Tensor tensor(const std::string& name) const { return to_tensor(at(name)); }
    bool contains(const std::string& name) const { return arrays.count(name) != 0; }
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointContainer& c);
CheckpointContainer decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const CheckpointContainer& c, const std::string& path);
CheckpointContainer load_checkpoint(const std::string& path);

/// Stores every parameter and buffer of `module` under `prefix/<name>`.
void add_module_state(CheckpointContainer& c, const std::string& prefix, const torch::nn::Module& module);
/// Copies arrays saved by add_module_state back into `module`. Missing names
/// or shape mismatches throw std::runtime_error.
void load_module_state(const CheckpointContainer& c, const std::string& prefix, torch::nn::Module& module);

}  // namespace ddt
