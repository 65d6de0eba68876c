#pragma once

// Iso-FLOP accounting: effective SwiGLU width, per-sublayer FLOPs, per-layer
// budgets, FFN width solving and full-model parameter counts. All FLOPs are
// per token and per layer; attention-score terms are not counted.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualpath/config.hpp"

namespace dualpath {

// 64 * ceil(floor(2 * d_ffn / 3) / 64)
std::int64_t h_eff(std::int64_t d_ffn);

std::int64_t flops_attn(std::int64_t d, std::int64_t n_rep);
std::int64_t flops_ffn(std::int64_t d, std::int64_t d_ffn);
std::int64_t flops_gate(std::int64_t d);

std::int64_t layer_budget(const BlockVariant& variant, std::int64_t d, std::int64_t n_rep);

struct BudgetQuery {
    std::int64_t F_M = 80'000'000;
    VariantKind kind = VariantKind::DualPath;
    int K = 1;
    double alloc_fraction = 0.5;
    std::int64_t d = 768;
    std::int64_t n_rep = 1;

    void validate() const;
};

// One solved FFN width.
struct SolvedWidth {
    std::int64_t d_ffn = 0;
    std::int64_t h_eff = 0;
    // The 64-aligned hidden width the solver rounded to.
    std::int64_t h64 = 0;
    double target_flops = 0.0;
    bool clamped = false;
};

struct BudgetSolution {
    BudgetQuery query;
    std::optional<SolvedWidth> deep;
    std::optional<SolvedWidth> wide;
    std::int64_t realized_flops = 0;
    std::int64_t abs_mismatch = 0;
    double rel_mismatch = 0.0;
    std::vector<std::string> warnings;

    BlockVariant variant() const;
};

BudgetSolution solve_widths(const BudgetQuery& query);

// The 13 variants compared at one budget: PureWide, PureLoop K=2..4, then Dual
// with alpha 0.25/0.50/0.75 and K=2..4.
std::vector<BudgetQuery> configuration_grid(std::int64_t F_M, std::int64_t d = 768, std::int64_t n_rep = 1);

// "PureWide", "PureLoop K=3", "Dual a=50 K=4".
std::string query_label(const BudgetQuery& query);

struct ParamBreakdown {
    std::int64_t embedding = 0;
    std::int64_t head = 0;
    std::int64_t attention = 0;
    std::int64_t ffn = 0;
    std::int64_t norms = 0;
    std::int64_t gains = 0;
    std::int64_t router = 0;
    std::int64_t gate = 0;
    bool tied = false;

    // Embedding, head, attention and FFN matrices only.
    std::int64_t matrix_total() const { return embedding + head + attention + ffn; }
    std::int64_t total() const { return matrix_total() + norms + gains + router + gate; }
    // Count when the head shares the embedding matrix.
    std::int64_t tied_total() const { return total() - head; }
};

// The head is counted separately from the embedding unless tie_embeddings is set.
ParamBreakdown param_count(const ModelConfig& config);

void to_json(nlohmann::json& j, const BudgetQuery& q);
void to_json(nlohmann::json& j, const SolvedWidth& w);
void to_json(nlohmann::json& j, const BudgetSolution& s);
void to_json(nlohmann::json& j, const ParamBreakdown& p);

}  // namespace dualpath
