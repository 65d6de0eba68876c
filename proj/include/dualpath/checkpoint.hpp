#pragma once

// Single-file checkpoints: "DPV1", a little-endian u64 manifest length, the
// JSON manifest, then every tensor's scalars little-endian in manifest order.

#include <filesystem>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dualpath/config.hpp"
#include "dualpath/tensor.hpp"

namespace dualpath {

template <typename T>
struct CheckpointData {
    ModelConfig model;
    // Free-form training metadata (step, optimizer and RNG state, train config).
    nlohmann::json train_state = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor<T>>> tensors;

    const Tensor<T>& tensor(const std::string& name) const;
};

template <typename T>
constexpr const char* dtype_name() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? "f32" : "f64";
}

// Writes to a sibling temporary file and renames it over `path`, so a crash
// mid-write leaves the previous checkpoint intact.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const CheckpointData<T>& data);

template <typename T>
CheckpointData<T> load_checkpoint(const std::filesystem::path& path);

// Manifest only, without reading tensor data.
nlohmann::json read_manifest(const std::filesystem::path& path);

}  // namespace dualpath
