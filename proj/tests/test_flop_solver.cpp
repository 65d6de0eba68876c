#include <gtest/gtest.h>

#include "dualpath/errors.hpp"
#include "dualpath/flop_solver.hpp"

using namespace dualpath;

namespace {

BudgetQuery dual(std::int64_t F_M, int K, double alpha) {
    BudgetQuery q;
    q.F_M = F_M;
    q.kind = VariantKind::DualPath;
    q.K = K;
    q.alloc_fraction = alpha;
    return q;
}

BudgetQuery loop(std::int64_t F_M, int K) {
    BudgetQuery q;
    q.F_M = F_M;
    q.kind = VariantKind::PureLoop;
    q.K = K;
    return q;
}

BudgetQuery wide(std::int64_t F_M) {
    BudgetQuery q;
    q.F_M = F_M;
    q.kind = VariantKind::PureWide;
    return q;
}

ModelConfig reference_model(const BudgetSolution& sol) {
    ModelConfig m;
    m.backbone = BackboneConfig::reference();
    m.variant = sol.variant();
    return m;
}

}  // namespace

TEST(HEff, Examples) {
    EXPECT_EQ(h_eff(24576), 16384);
    EXPECT_EQ(h_eff(11392), 7616);
    EXPECT_EQ(h_eff(64), 64);
    EXPECT_THROW(h_eff(0), ConfigError);
}

TEST(HEff, IsA64MultipleNoSmallerThanTwoThirds) {
    for (std::int64_t d = 2; d < 20000; d += 7) {
        const std::int64_t h = h_eff(d);
        EXPECT_EQ(h % 64, 0);
        EXPECT_GE(h, (2 * d) / 3);
        EXPECT_LT(h - (2 * d) / 3, 64);
    }
}

TEST(Flops, Examples) {
    EXPECT_EQ(flops_attn(768, 1), 4'718'592);
    EXPECT_EQ(flops_attn(768, 4), 4 * 768 * 768 + 768 * 768);
    EXPECT_EQ(flops_ffn(768, 24576), 75'497'472);
    EXPECT_EQ(flops_gate(768), 3072);
}

TEST(LayerBudget, Examples) {
    EXPECT_EQ(layer_budget(BlockVariant::wide(24576), 768, 1), 80'216'064);
    EXPECT_EQ(layer_budget(BlockVariant::loop(2, 11392), 768, 1), 79'626'240);
    const std::int64_t dual_budget = layer_budget(BlockVariant::dual(4, 1600, 11392), 768, 1);
    EXPECT_LT(std::abs(dual_budget - 80'000'000) / 80e6, 0.02);
    EXPECT_EQ(dual_budget, 4 * (4'718'592 + 6 * 768 * h_eff(1600)) + 4'718'592 + 6 * 768 * 7616 + 3072);
}

TEST(Solve, Examples) {
    EXPECT_EQ(solve_widths(loop(80'000'000, 2)).deep->d_ffn, 11392);
    auto d = solve_widths(dual(80'000'000, 4, 0.5));
    EXPECT_EQ(d.deep->d_ffn, 1600);
    EXPECT_EQ(d.wide->d_ffn, 11392);
    EXPECT_EQ(solve_widths(wide(80'000'000)).wide->d_ffn, 24576);
    EXPECT_FALSE(solve_widths(wide(80'000'000)).deep);
    EXPECT_EQ(solve_widths(loop(160'000'000, 3)).deep->d_ffn, 15744);
}

TEST(Solve, DegenerateTargetClampsWithWarning) {
    auto s = solve_widths(dual(80'000'000, 4, 0.25));
    EXPECT_EQ(s.deep->d_ffn, 64);
    EXPECT_TRUE(s.deep->clamped);
    EXPECT_FALSE(s.warnings.empty());
    // A negative target still yields the minimum width.
    auto tiny = solve_widths(loop(1'000'000, 4));
    EXPECT_EQ(tiny.deep->d_ffn, 64);
    EXPECT_TRUE(tiny.deep->clamped);
    EXPECT_GE(tiny.rel_mismatch, 0.02);
}

TEST(Solve, InvalidQueriesThrow) {
    EXPECT_THROW(solve_widths(loop(0, 2)), ConfigError);
    EXPECT_THROW(solve_widths(dual(80'000'000, 2, 1.0)), ConfigError);
    EXPECT_THROW(solve_widths(dual(80'000'000, 0, 0.5)), ConfigError);
    auto w = wide(80'000'000);
    w.K = 2;
    EXPECT_THROW(solve_widths(w), ConfigError);
}

TEST(Solve, DeepWidthNeverGrowsWithK) {
    for (std::int64_t F_M = 20'000'000; F_M <= 320'000'000; F_M += 15'000'000) {
        for (double alpha : {0.25, 0.5, 0.6, 0.75}) {
            std::int64_t prev = std::numeric_limits<std::int64_t>::max(), prev_loop = prev;
            for (int K = 1; K <= 8; ++K) {
                const std::int64_t w = solve_widths(dual(F_M, K, alpha)).deep->d_ffn;
                const std::int64_t l = solve_widths(loop(F_M, K)).deep->d_ffn;
                EXPECT_LE(w, prev);
                EXPECT_LE(l, prev_loop);
                prev = w;
                prev_loop = l;
            }
        }
    }
}

TEST(Solve, FloorModeNeverExceedsBudgetAndCeilModeNeverFallsShort) {
    for (std::int64_t F_M = 20'000'000; F_M <= 320'000'000; F_M += 7'000'000) {
        for (int K = 1; K <= 6; ++K) {
            for (const BudgetQuery& q : {loop(F_M, K), dual(F_M, K, 0.3), dual(F_M, K, 0.5), dual(F_M, K, 0.75)}) {
                auto s = solve_widths(q);
                const bool clamped = (s.deep && s.deep->clamped) || (s.wide && s.wide->clamped);
                if (!clamped) EXPECT_LE(s.realized_flops, F_M) << query_label(q) << " @ " << F_M;
            }
        }
        EXPECT_GE(solve_widths(wide(F_M)).realized_flops, F_M);
    }
}

TEST(Solve, EffectiveWidthEqualsRoundedHiddenWidthInFloorMode) {
    for (std::int64_t F_M = 20'000'000; F_M <= 320'000'000; F_M += 5'000'000) {
        for (int K = 1; K <= 6; ++K) {
            for (const BudgetQuery& q : {loop(F_M, K), dual(F_M, K, 0.25), dual(F_M, K, 0.5), dual(F_M, K, 0.75)}) {
                auto s = solve_widths(q);
                for (const auto& w : {s.deep, s.wide}) {
                    if (w && !w->clamped) EXPECT_EQ(w->h_eff, w->h64) << query_label(q) << " @ " << F_M;
                }
            }
        }
    }
}

TEST(Solve, CeilModeIdempotenceHoldsAt80MButNotAt160M) {
    // The 160M wide row (50624) is a 64-multiple above 1.5 * h64 = 50592, so
    // its effective width lands one 64-step above the solver's h64.
    auto a = solve_widths(wide(80'000'000));
    EXPECT_EQ(a.wide->h_eff, a.wide->h64);
    auto b = solve_widths(wide(160'000'000));
    EXPECT_EQ(b.wide->d_ffn, 50624);
    EXPECT_EQ(b.wide->h64, 33728);
    EXPECT_EQ(b.wide->h_eff, 33792);
}

TEST(Solve, MismatchBelowTwoPercentOnTheGrid) {
    for (std::int64_t F_M : {80'000'000, 160'000'000}) {
        for (const auto& q : configuration_grid(F_M)) {
            auto s = solve_widths(q);
            const bool clamped = s.deep && s.deep->clamped;
            if (!clamped) EXPECT_LT(s.rel_mismatch, 0.02) << query_label(q);
        }
    }
}

TEST(Grid, OrderAndLabels) {
    auto g = configuration_grid(80'000'000);
    ASSERT_EQ(g.size(), 13u);
    EXPECT_EQ(query_label(g[0]), "PureWide");
    EXPECT_EQ(query_label(g[1]), "PureLoop K=2");
    EXPECT_EQ(query_label(g[4]), "Dual a=25 K=2");
    EXPECT_EQ(query_label(g[12]), "Dual a=75 K=4");
}

TEST(Params, PureWideAt80M) {
    auto pb = param_count(reference_model(solve_widths(wide(80'000'000))));
    EXPECT_EQ(pb.matrix_total(), 718'995'456);
    EXPECT_EQ(pb.matrix_total(), 2 * 50304 * 768 + 16 * (4 * 768 * 768 + 3 * 768 * 16384));
    EXPECT_GT(pb.total(), pb.matrix_total());
    EXPECT_LT(pb.total() - pb.matrix_total(), pb.total() / 10000);
}

TEST(Params, DeepSublayerCountedOnceRegardlessOfK) {
    ModelConfig m;
    m.backbone = BackboneConfig::reference();
    m.variant = BlockVariant::loop(2, 4864);
    auto a = param_count(m);
    m.variant.K = 4;
    auto b = param_count(m);
    EXPECT_EQ(a.ffn, b.ffn);
    EXPECT_EQ(a.attention, b.attention);
    EXPECT_EQ(b.gains - a.gains, 2 * 16);
}

TEST(Params, SmallTermsFollowTheBlockLayout) {
    ModelConfig m;
    m.backbone = BackboneConfig::reference();
    m.variant = BlockVariant::dual(3, 4864, 11392);
    auto pb = param_count(m);
    EXPECT_EQ(pb.router, 16 * (768 + 2));
    EXPECT_EQ(pb.gate, 16 * (2 * 768 + 2));
    EXPECT_EQ(pb.gains, 16 * (3 + 1));
    EXPECT_EQ(pb.embedding, 50304 * 768);
    EXPECT_EQ(pb.head, 50304 * 768);
    m.backbone.tie_embeddings = true;
    EXPECT_EQ(param_count(m).head, 0);
}

TEST(Params, WithinTwoPercentOfReportedExamples) {
    auto l = param_count(reference_model(solve_widths(loop(80'000'000, 4))));
    EXPECT_LT(std::abs(l.matrix_total() - 238e6) / 238e6, 0.02);
    auto d = param_count(reference_model(solve_widths(dual(160'000'000, 4, 0.5))));
    EXPECT_LT(std::abs(d.matrix_total() - 880e6) / 880e6, 0.02);
}
