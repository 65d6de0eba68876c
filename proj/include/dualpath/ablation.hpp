#pragma once

// Inference-time interventions over a frozen model and their cross-entropy
// reports.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualpath/train.hpp"

namespace dualpath {

// Inline spec syntax:
//   none
//   force-loops:K
//   gates:GD,GW          either side may be '*' (keep the learned gate)
//   gates:GD,GW@layers=0,2
//   shuffle:seed=N
struct AblationSpec {
    enum class Kind { None, ForceLoops, GateOverride, ShuffleGates };
    Kind kind = Kind::None;
    int loops = 0;
    GateOverride gates;
    std::uint64_t seed = 0;

    static AblationSpec parse(const std::string& text);
    std::string to_string() const;
    void validate() const;
};

// Read-only model plus the interventions applied on every forward pass.
struct ModelView {
    const ParameterStore<float>* store = nullptr;
    ModelConfig config;
    Interventions interventions;
};

ModelView base_view(const ParameterStore<float>& store, const ModelConfig& config);
ModelView force_loops(ModelView view, int loops);
ModelView override_gates(ModelView view, const GateOverride& gates);
ModelView shuffle_gates(ModelView view, std::uint64_t seed);
ModelView apply(ModelView view, const AblationSpec& spec);

// Mean per-token cross-entropy in nats over every position of `tokens`.
NllResult evaluate_ce(const ModelView& view, std::span<const int> tokens, int seq_len, int batch_size = 8);

struct AblationReport {
    std::string spec;
    double loss = 0.0;
    double baseline = 0.0;
    double delta = 0.0;
    std::int64_t tokens = 0;
    std::vector<std::string> notes;
};

void to_json(nlohmann::json& j, const AblationReport& r);

// Evaluates the unablated baseline and the ablated view on the same windows.
AblationReport run_ablation(const ParameterStore<float>& store, const ModelConfig& config, std::span<const int> tokens,
                            const AblationSpec& spec, int seq_len, int batch_size = 8);

}  // namespace dualpath
