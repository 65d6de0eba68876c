#include "dualpath/flop_solver.hpp"

#include <cmath>
#include <cstdlib>

#include "dualpath/errors.hpp"

namespace dualpath {

std::int64_t h_eff(std::int64_t d_ffn) {
    if (d_ffn < 1) throw ConfigError("d_ffn must be positive");
    const std::int64_t two_thirds = (2 * d_ffn) / 3;
    return 64 * ((two_thirds + 63) / 64);
}

std::int64_t flops_attn(std::int64_t d, std::int64_t n_rep) {
    if (d < 1 || n_rep < 1) throw ConfigError("flops_attn: positive dimensions required");
    return 4 * d * d + (4 * d * d) / n_rep;
}

std::int64_t flops_ffn(std::int64_t d, std::int64_t d_ffn) { return 6 * d * h_eff(d_ffn); }

std::int64_t flops_gate(std::int64_t d) { return 4 * d; }

std::int64_t layer_budget(const BlockVariant& variant, std::int64_t d, std::int64_t n_rep) {
    const std::int64_t attn = flops_attn(d, n_rep);
    switch (variant.kind) {
        case VariantKind::PureWide: return attn + flops_ffn(d, variant.d_ffn_wide);
        case VariantKind::PureLoop: return variant.K * (attn + flops_ffn(d, variant.d_ffn_deep));
        case VariantKind::DualPath:
            return variant.K * (attn + flops_ffn(d, variant.d_ffn_deep)) + attn + flops_ffn(d, variant.d_ffn_wide) +
                   flops_gate(d);
    }
    return 0;
}

void BudgetQuery::validate() const {
    if (F_M <= 0) throw ConfigError("F_M must be positive");
    if (K < 1) throw ConfigError("K must be >= 1");
    if (kind == VariantKind::PureWide && K != 1) throw ConfigError("PureWide has K = 1");
    if (kind == VariantKind::DualPath && !(alloc_fraction > 0.0 && alloc_fraction < 1.0)) {
        throw ConfigError("alloc_fraction must lie in (0, 1)");
    }
    if (d < 1 || n_rep < 1) throw ConfigError("d and n_rep must be positive");
}

BlockVariant BudgetSolution::variant() const {
    BlockVariant v;
    v.kind = query.kind;
    v.K = query.K;
    if (deep) v.d_ffn_deep = static_cast<int>(deep->d_ffn);
    if (wide) v.d_ffn_wide = static_cast<int>(wide->d_ffn);
    return v;
}

namespace {

// Floor mode: the hidden width rounds down to a 64-multiple and d_ffn is the
// largest 64-multiple not exceeding 1.5 * h64, clamped to at least 64.
// Ceil mode: the hidden width rounds up and 1.5 * h64 is rounded up to a
// 64-multiple.
SolvedWidth solve_one(double target_flops, std::int64_t d, bool ceil_mode) {
    SolvedWidth w;
    w.target_flops = target_flops;
    const double h_raw = target_flops / (6.0 * static_cast<double>(d));
    if (ceil_mode) {
        w.h64 = 64 * static_cast<std::int64_t>(std::ceil(h_raw / 64.0));
        if (w.h64 < 64) {
            w.h64 = 64;
            w.clamped = true;
        }
        w.d_ffn = 64 * ((3 * w.h64 / 2 + 63) / 64);
    } else {
        w.h64 = 64 * static_cast<std::int64_t>(std::floor(h_raw / 64.0));
        w.d_ffn = 64 * ((3 * std::max<std::int64_t>(w.h64, 0) / 2) / 64);
        if (w.d_ffn < 64) {
            w.d_ffn = 64;
            w.clamped = true;
        }
    }
    w.h_eff = h_eff(w.d_ffn);
    return w;
}

}  // namespace

BudgetSolution solve_widths(const BudgetQuery& query) {
    query.validate();
    BudgetSolution sol;
    sol.query = query;
    const double fm = static_cast<double>(query.F_M);
    const double attn = static_cast<double>(flops_attn(query.d, query.n_rep));
    const double gate = static_cast<double>(flops_gate(query.d));
    switch (query.kind) {
        case VariantKind::PureLoop:
            sol.deep = solve_one(fm / query.K - attn, query.d, false);
            break;
        case VariantKind::PureWide:
            sol.wide = solve_one(fm - attn, query.d, true);
            break;
        case VariantKind::DualPath:
            sol.deep = solve_one(query.alloc_fraction * (fm - gate) / query.K - attn, query.d, false);
            sol.wide = solve_one((1.0 - query.alloc_fraction) * (fm - gate) - attn, query.d, false);
            break;
    }
    sol.realized_flops = layer_budget(sol.variant(), query.d, query.n_rep);
    sol.abs_mismatch = sol.realized_flops - query.F_M;
    sol.rel_mismatch = static_cast<double>(std::llabs(sol.abs_mismatch)) / fm;
    if (sol.deep && sol.deep->clamped) sol.warnings.push_back("deep width clamped to the 64 minimum");
    if (sol.wide && sol.wide->clamped) sol.warnings.push_back("wide width clamped to the 64 minimum");
    if (sol.rel_mismatch >= 0.02) sol.warnings.push_back("realized FLOPs differ from F_M by 2% or more");
    return sol;
}

ParamBreakdown param_count(const ModelConfig& config) {
    const BackboneConfig& b = config.backbone;
    const BlockVariant& v = config.variant;
    const std::int64_t d = b.d, L = b.L, V = b.vocab;
    const std::int64_t dh = b.head_dim();
    const std::int64_t kv = b.kv_width();
    ParamBreakdown p;
    p.tied = b.tie_embeddings;
    p.embedding = V * d;
    p.head = b.tie_embeddings ? 0 : V * d;
    p.norms = d;  // final norm

    const std::int64_t attn = 2 * d * d + 2 * d * kv;
    const std::int64_t sublayer_norms = 2 * d + 2 * dh;
    auto add_sublayer = [&](std::int64_t d_ffn) {
        p.attention += L * attn;
        p.ffn += L * 3 * d * h_eff(d_ffn);
        p.norms += L * sublayer_norms;
    };
    if (v.has_deep()) {
        add_sublayer(v.d_ffn_deep);
        p.gains += L * v.K;
        p.router += L * (d + 2);
    }
    if (v.has_wide()) {
        add_sublayer(v.d_ffn_wide);
        p.gains += L;
    }
    if (v.has_gate()) p.gate += L * (2 * d + 2);
    return p;
}

std::vector<BudgetQuery> configuration_grid(std::int64_t F_M, std::int64_t d, std::int64_t n_rep) {
    std::vector<BudgetQuery> grid;
    grid.push_back({F_M, VariantKind::PureWide, 1, 0.5, d, n_rep});
    for (int K = 2; K <= 4; ++K) grid.push_back({F_M, VariantKind::PureLoop, K, 0.5, d, n_rep});
    for (double alpha : {0.25, 0.50, 0.75})
        for (int K = 2; K <= 4; ++K) grid.push_back({F_M, VariantKind::DualPath, K, alpha, d, n_rep});
    return grid;
}

std::string query_label(const BudgetQuery& q) {
    switch (q.kind) {
        case VariantKind::PureWide: return "PureWide";
        case VariantKind::PureLoop: return "PureLoop K=" + std::to_string(q.K);
        case VariantKind::DualPath:
            return "Dual a=" + std::to_string(static_cast<int>(std::lround(q.alloc_fraction * 100))) +
                   " K=" + std::to_string(q.K);
    }
    return "?";
}

void to_json(nlohmann::json& j, const BudgetQuery& q) {
    j = {{"F_M", q.F_M}, {"kind", to_string(q.kind)}, {"K", q.K},
         {"alloc_fraction", q.alloc_fraction}, {"d", q.d}, {"n_rep", q.n_rep}};
}

void to_json(nlohmann::json& j, const SolvedWidth& w) {
    j = {{"d_ffn", w.d_ffn}, {"h_eff", w.h_eff}, {"h64", w.h64}, {"target_flops", w.target_flops}, {"clamped", w.clamped}};
}

void to_json(nlohmann::json& j, const BudgetSolution& s) {
    j = {{"query", s.query},
         {"d_ffn_deep", s.deep ? nlohmann::json(*s.deep) : nlohmann::json(nullptr)},
         {"d_ffn_wide", s.wide ? nlohmann::json(*s.wide) : nlohmann::json(nullptr)},
         {"realized_flops", s.realized_flops},
         {"abs_mismatch", s.abs_mismatch},
         {"rel_mismatch", s.rel_mismatch},
         {"warnings", s.warnings}};
}

void to_json(nlohmann::json& j, const ParamBreakdown& p) {
    j = {{"embedding", p.embedding}, {"head", p.head},     {"attention", p.attention},
         {"ffn", p.ffn},             {"norms", p.norms},   {"gains", p.gains},
         {"router", p.router},       {"gate", p.gate},     {"tied", p.tied},
         {"matrix_total", p.matrix_total()}, {"total", p.total()}, {"tied_total", p.tied_total()}};
}

}  // namespace dualpath
