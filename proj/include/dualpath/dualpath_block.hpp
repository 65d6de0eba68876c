#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dualpath/layers.hpp"
#include "dualpath/routing.hpp"

namespace dualpath {

// Fixed gate values; an unset side keeps its computed value. `layers` empty
// means every layer.
struct GateOverride {
    std::optional<double> g_d;
    std::optional<double> g_w;
    std::vector<int> layers;

    bool applies(int layer) const;
};

// Inference-time changes to the forward pass. Default-constructed means none.
struct Interventions {
    // Run the deep path exactly this many steps.
    std::optional<int> force_loops;
    std::optional<GateOverride> gate_override;
    // Permute computed gate pairs across positions within each sequence.
    std::optional<std::uint64_t> shuffle_seed;
    // Replace every residual gain s with this value.
    std::optional<double> gain_override;
    // Replace the router outputs q_1..q_{K-1} with these constants.
    std::optional<std::vector<double>> router_override;

    bool empty() const {
        return !force_loops && !gate_override && !shuffle_seed && !gain_override && !router_override;
    }
};

template <typename T>
struct DeepPathWeights {
    SublayerWeights<T> sub;
    Var<T> gain_logits;  // [K]
    Var<T> router_w;     // [d+1 x 1]; last row multiplies k/(K-1)
    Var<T> router_b;     // [1]
};

template <typename T>
struct WidePathWeights {
    SublayerWeights<T> sub;
    Var<T> gain_logit;  // [1]
};

template <typename T>
struct GateWeights {
    Var<T> w;  // [d x 2]
    Var<T> b;  // [2]
};

template <typename T>
struct BlockWeights {
    std::optional<DeepPathWeights<T>> deep;
    std::optional<WidePathWeights<T>> wide;
    std::optional<GateWeights<T>> gate;
};

// Binds layers.{layer}.{deep,wide,gate}.* for the parts `variant` has.
template <typename T>
BlockWeights<T> bind_block(const ParamBinder<T>& bind, int layer, const BlockVariant& variant);

// Adds the parameters of one block. Gate weights and router weights start at
// zero; gain logits at `gain_logit_init`; router bias at `router_bias_init`.
template <typename T>
void add_block_params(ParameterStore<T>& store, int layer, const ModelConfig& config, std::mt19937_64& rng);

template <typename T>
struct BlockContext {
    const BackboneConfig* backbone = nullptr;
    const SequenceLayout* layout = nullptr;
    T eps = T(1e-6);
    int layer = 0;
    const Interventions* interventions = nullptr;
    TraceSink* sink = nullptr;
    std::span<const int> tokens;
    std::int64_t sequence_offset = 0;
};

template <typename T>
struct DeepPathResult {
    Var<T> h;
    std::vector<Var<T>> states;  // h^(1..K)
    std::vector<Var<T>> q;       // q_1..q_{K-1}, one entry per row each
};

// Stick-breaking weights pi_k q_k (k < K) and pi_K for one token.
std::vector<double> loop_mix_weights(std::span<const double> q);

// Seeded permutation of [0, n) for one (layer, sequence).
std::vector<std::size_t> shuffle_permutation(std::uint64_t seed, int layer, std::int64_t sequence_id, std::size_t n);

template <typename T>
DeepPathResult<T> deep_path(Var<T> x, const DeepPathWeights<T>& w, int K, const BlockContext<T>& ctx);

template <typename T>
Var<T> wide_path(Var<T> x, const WidePathWeights<T>& w, const BlockContext<T>& ctx);

template <typename T>
struct GateResult {
    Var<T> y;
    Var<T> g_d;  // one entry per row
    Var<T> g_w;
};

template <typename T>
GateResult<T> gate_combine(Var<T> x, Var<T> h_deep, Var<T> h_wide, const GateWeights<T>& w, const BlockContext<T>& ctx);

// One layer. DualPath gate-combines both paths; PureLoop returns h_deep;
// PureWide returns h_wide. Emits one record per row when ctx.sink is set.
template <typename T>
Var<T> block_forward(Var<T> x, const BlockVariant& variant, const BlockWeights<T>& w, const BlockContext<T>& ctx);

}  // namespace dualpath
