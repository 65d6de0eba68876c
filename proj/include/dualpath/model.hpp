#pragma once

#include <cstdint>
#include <span>

#include "dualpath/dualpath_block.hpp"

namespace dualpath {

// Fresh parameters for `config`, drawn from a generator seeded with config.seed.
// Order: embed, layers.0.*, ..., final_norm, head (absent when tied).
template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& config);

struct ForwardOptions {
    const Interventions* interventions = nullptr;
    TraceSink* sink = nullptr;
    // Added to the batch row index to form trace sequence ids and shuffle seeds.
    std::int64_t sequence_offset = 0;
};

// Logits [rows x vocab] for tokens packed as `layout` describes.
template <typename T>
Var<T> model_forward(const ParamBinder<T>& bind, const ModelConfig& config, std::span<const int> tokens,
                     const SequenceLayout& layout, const ForwardOptions& options = {});

// Tape-scoped evaluation over a read-only store.
template <typename T>
Tensor<T> forward_logits(const ParameterStore<T>& store, const ModelConfig& config, std::span<const int> tokens,
                         const SequenceLayout& layout, const ForwardOptions& options = {});

}  // namespace dualpath
