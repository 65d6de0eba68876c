#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "test_util.hpp"

using namespace dualpath;
using dualpath::testing::randomize;
using dualpath::testing::random_tensor;
using dualpath::testing::random_tokens;
using dualpath::testing::tiny_config;

namespace {

// One block of a model store bound on its own tape.
struct BlockFixture {
    ModelConfig config;
    ParameterStore<double> store;
    Tape<double> tape;
    SequenceLayout layout;
    Interventions iv;
    TraceSink sink;
    BlockContext<double> ctx;
    BlockWeights<double> w;

    explicit BlockFixture(ModelConfig c, std::size_t batch = 2, std::size_t T = 4, bool random_params = true)
        : config(std::move(c)), store(init_parameters<double>(config)), layout(SequenceLayout::packed(batch, T)) {
        if (random_params) randomize(store, 17);
        ctx.backbone = &config.backbone;
        ctx.layout = &layout;
        ctx.eps = config.norm_eps;
        ctx.layer = 0;
        ctx.interventions = &iv;
        w = bind_block(bind_store(tape, store), 0, config.variant);
    }

    Tensor<double> x(std::uint64_t seed = 1) const {
        return random_tensor<double>({layout.rows(), static_cast<std::size_t>(config.backbone.d)}, seed);
    }

    Var<double> forward(const Tensor<double>& x) { return block_forward(tape.input(x), config.variant, w, ctx); }
};

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Copies every parameter of `to` from the same-named parameter of `from`.
template <typename T>
void copy_shared(const ParameterStore<T>& from, ParameterStore<T>& to) {
    for (auto& p : to.params()) p.value = from.get(p.name).value;
}

}  // namespace

TEST(LoopMix, HandExamples) {
    std::vector<double> half{0.5, 0.5};
    EXPECT_EQ(loop_mix_weights(half), (std::vector<double>{0.5, 0.25, 0.25}));
    std::vector<double> zeros{0, 0, 0};
    EXPECT_EQ(loop_mix_weights(zeros), (std::vector<double>{0, 0, 0, 1}));
    std::vector<double> first{1, 0.3};
    EXPECT_EQ(loop_mix_weights(first), (std::vector<double>{1, 0, 0}));
    EXPECT_EQ(loop_mix_weights({}), (std::vector<double>{1}));
}

TEST(LoopMix, WeightsFormADistribution) {
    std::mt19937_64 rng(123);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        for (int K : {2, 3, 4, 8, 16}) {
            std::vector<double> q(K - 1);
            for (auto& v : q) v = u(rng);
            auto w = loop_mix_weights(q);
            double s = 0;
            for (double x : w) {
                EXPECT_GE(x, 0.0);
                s += x;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(DeepPath, RouterZeroSelectsLastState) {
    BlockFixture f(tiny_config(VariantKind::PureLoop, 3));
    f.iv.router_override = std::vector<double>{0.0, 0.0};
    auto r = deep_path(f.tape.input(f.x()), *f.w.deep, 3, f.ctx);
    EXPECT_EQ(r.h.value(), r.states.back().value());
}

TEST(DeepPath, RouterOneAtFirstStepSelectsFirstState) {
    BlockFixture f(tiny_config(VariantKind::PureLoop, 3));
    f.iv.router_override = std::vector<double>{1.0, 0.4};
    auto r = deep_path(f.tape.input(f.x()), *f.w.deep, 3, f.ctx);
    EXPECT_LT(max_abs_diff(r.h.value(), r.states[0].value()), 1e-14);
}

TEST(DeepPath, HalfRoutersGiveStickBreakingMixture) {
    BlockFixture f(tiny_config(VariantKind::PureLoop, 3));
    f.iv.router_override = std::vector<double>{0.5, 0.5};
    auto r = deep_path(f.tape.input(f.x()), *f.w.deep, 3, f.ctx);
    const auto &h1 = r.states[0].value(), &h2 = r.states[1].value(), &h3 = r.states[2].value();
    for (std::size_t i = 0; i < h1.size(); ++i) EXPECT_NEAR(r.h.value()[i], 0.5 * h1[i] + 0.25 * h2[i] + 0.25 * h3[i], 1e-14);
}

TEST(DeepPath, LearnedRouterMatchesExplicitMixture) {
    BlockFixture f(tiny_config(VariantKind::PureLoop, 4));
    auto r = deep_path(f.tape.input(f.x()), *f.w.deep, 4, f.ctx);
    const std::size_t d = 16, rows = f.layout.rows();
    const auto& rw = f.store.get("layers.0.deep.router_w").value;
    const double rb = f.store.get("layers.0.deep.router_b").value[0];
    for (std::size_t row = 0; row < rows; ++row) {
        std::vector<double> q;
        for (int k = 1; k < 4; ++k) {
            double z = rb + rw[d] * k / 3.0;
            for (std::size_t j = 0; j < d; ++j) z += r.states[k - 1].value().at(row, j) * rw[j];
            q.push_back(1 / (1 + std::exp(-z)));
            EXPECT_NEAR(r.q[k - 1].value()[row], q.back(), 1e-14);
        }
        auto pi = loop_mix_weights(q);
        for (std::size_t j = 0; j < d; ++j) {
            double want = 0;
            for (int k = 0; k < 4; ++k) want += pi[k] * r.states[k].value().at(row, j);
            EXPECT_NEAR(r.h.value().at(row, j), want, 1e-12);
        }
    }
}

TEST(DeepPath, StepsShareWeightsAndUseTheirOwnGain) {
    BlockFixture f(tiny_config(VariantKind::PureLoop, 2));
    auto x = f.tape.input(f.x());
    auto r = deep_path(x, *f.w.deep, 2, f.ctx);
    const auto& logits = f.store.get("layers.0.deep.gain_logits").value;
    auto step = [&](Var<double> in, double logit) {
        return sublayer(in, f.w.deep->sub, f.tape.constant(Tensor<double>::scalar(softplus(logit))), f.config.backbone,
                        f.layout, f.ctx.eps);
    };
    auto h1 = step(x, logits[0]);
    EXPECT_LT(max_abs_diff(r.states[0].value(), h1.value()), 1e-14);
    EXPECT_LT(max_abs_diff(r.states[1].value(), step(h1, logits[1]).value()), 1e-14);
}

TEST(DeepPath, RouterOverrideMustMatchLoopCount) {
    BlockFixture f(tiny_config(VariantKind::PureLoop, 3));
    f.iv.router_override = std::vector<double>{0.5};
    EXPECT_THROW(deep_path(f.tape.input(f.x()), *f.w.deep, 3, f.ctx), ConfigError);
    f.iv.router_override = std::vector<double>{0.5, 1.5};
    EXPECT_THROW(deep_path(f.tape.input(f.x()), *f.w.deep, 3, f.ctx), ConfigError);
}

TEST(WidePath, ZeroGainReturnsInput) {
    BlockFixture f(tiny_config(VariantKind::PureWide));
    f.iv.gain_override = 0.0;
    Tensor<double> x = f.x();
    EXPECT_EQ(wide_path(f.tape.input(x), *f.w.wide, f.ctx).value(), x);
}

TEST(Init, FreshBlockContract) {
    ModelConfig c = tiny_config(VariantKind::DualPath, 4);
    auto store = init_parameters<double>(c);
    for (double v : store.get("layers.1.deep.gain_logits").value.storage()) EXPECT_EQ(v, -7.0);
    EXPECT_EQ(store.get("layers.1.wide.gain_logit").value[0], -7.0);
    EXPECT_EQ(store.get("layers.1.deep.router_b").value[0], -2.0);
    EXPECT_EQ(store.get("layers.1.deep.router_w").value.shape(), (Shape{17, 1}));
    for (double v : store.get("layers.1.deep.router_w").value.storage()) EXPECT_EQ(v, 0.0);
    for (double v : store.get("layers.1.gate.w").value.storage()) EXPECT_EQ(v, 0.0);
    for (double v : store.get("layers.1.gate.b").value.storage()) EXPECT_EQ(v, 0.0);
    EXPECT_NEAR(softplus(-7.0), 9.11466e-4, 1e-9);
}

TEST(Init, FreshGatesAreExactlyHalf) {
    BlockFixture f(tiny_config(VariantKind::DualPath, 3), 2, 4, false);
    f.ctx.sink = &f.sink;
    f.forward(f.x());
    ASSERT_EQ(f.sink.records().size(), 8u);
    for (const auto& r : f.sink.records()) {
        EXPECT_EQ(r.g_d, 0.5);
        EXPECT_EQ(r.g_w, 0.5);
        // sigmoid(-2) router at init
        for (double q : r.q_steps) EXPECT_NEAR(q, 1 / (1 + std::exp(2.0)), 1e-3);
    }
}

TEST(Init, ZeroGainsMakeTheBlockAnIdentity) {
    for (VariantKind kind : {VariantKind::DualPath, VariantKind::PureLoop, VariantKind::PureWide}) {
        BlockFixture f(tiny_config(kind, 3), 2, 4, false);
        f.iv.gain_override = 0.0;
        Tensor<double> x = f.x();
        EXPECT_EQ(f.forward(x).value(), x) << to_string(kind);
    }
}

TEST(Init, BlockApproachesIdentityAsGainLogitsFall) {
    ModelConfig c = tiny_config(VariantKind::DualPath, 3);
    double prev = std::numeric_limits<double>::infinity();
    for (double logit : {-7.0, -10.0, -13.0, -16.0, -20.0}) {
        c.gain_logit_init = logit;
        BlockFixture f(c, 2, 4, false);
        Tensor<double> x = f.x();
        const double dev = max_abs_diff(f.forward(x).value(), x);
        EXPECT_LT(dev, prev) << logit;
        EXPECT_LT(dev, 10 * softplus(logit));
        prev = dev;
    }
}

TEST(Gate, OverrideSelectsOnePath) {
    BlockFixture f(tiny_config(VariantKind::DualPath, 3));
    auto x = f.tape.input(f.x());
    auto deep = deep_path(x, *f.w.deep, 3, f.ctx).h;
    auto wide = wide_path(x, *f.w.wide, f.ctx);
    f.iv.gate_override = GateOverride{1.0, 0.0, {}};
    EXPECT_EQ(gate_combine(x, deep, wide, *f.w.gate, f.ctx).y.value(), deep.value());
    f.iv.gate_override = GateOverride{0.0, 1.0, {}};
    EXPECT_EQ(gate_combine(x, deep, wide, *f.w.gate, f.ctx).y.value(), wide.value());
}

TEST(Gate, MatchesBruteForceCombination) {
    BlockFixture f(tiny_config(VariantKind::DualPath, 2));
    Tensor<double> xt = f.x(), hd = f.x(2), hw = f.x(3);
    auto g = gate_combine(f.tape.input(xt), f.tape.input(hd), f.tape.input(hw), *f.w.gate, f.ctx);
    const auto& W = f.store.get("layers.0.gate.w").value;
    const auto& b = f.store.get("layers.0.gate.b").value;
    for (std::size_t r = 0; r < xt.rows(); ++r) {
        double zd = b[0], zw = b[1];
        for (std::size_t j = 0; j < 16; ++j) {
            zd += xt.at(r, j) * W.at(j, 0);
            zw += xt.at(r, j) * W.at(j, 1);
        }
        const double gd = 1 / (1 + std::exp(-zd)), gw = 1 / (1 + std::exp(-zw));
        EXPECT_NEAR(g.g_d.value()[r], gd, 1e-15);
        EXPECT_NEAR(g.g_w.value()[r], gw, 1e-15);
        EXPECT_GT(gd, 0.0);
        EXPECT_LT(gd, 1.0);
        for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(g.y.value().at(r, j), gd * hd.at(r, j) + gw * hw.at(r, j), 1e-14);
    }
}

TEST(Gate, SwappingPathsAndGateColumnsLeavesOutputUnchanged) {
    BlockFixture f(tiny_config(VariantKind::DualPath, 2));
    Tensor<double> xt = f.x(), hd = f.x(2), hw = f.x(3);
    auto a = gate_combine(f.tape.input(xt), f.tape.input(hd), f.tape.input(hw), *f.w.gate, f.ctx);
    Tensor<double> W = f.store.get("layers.0.gate.w").value, b = f.store.get("layers.0.gate.b").value;
    for (std::size_t j = 0; j < 16; ++j) std::swap(W.at(j, 0), W.at(j, 1));
    std::swap(b[0], b[1]);
    GateWeights<double> swapped{f.tape.constant(W), f.tape.constant(b)};
    auto s = gate_combine(f.tape.input(xt), f.tape.input(hw), f.tape.input(hd), swapped, f.ctx);
    EXPECT_EQ(s.y.value(), a.y.value());
}

TEST(Gate, OverrideOutsideUnitIntervalThrows) {
    BlockFixture f(tiny_config(VariantKind::DualPath, 2));
    f.iv.gate_override = GateOverride{1.5, std::nullopt, {}};
    EXPECT_THROW(f.forward(f.x()), InputError);
}

TEST(Gate, LayerRestrictedOverride) {
    GateOverride o{0.0, 1.0, {0, 2}};
    EXPECT_TRUE(o.applies(2));
    EXPECT_FALSE(o.applies(1));
    EXPECT_TRUE(GateOverride{}.applies(7));
}

TEST(Reduction, DualWithFixedGatesEqualsPureVariantsBitForBit) {
    ModelConfig dual = tiny_config(VariantKind::DualPath, 3);
    ModelConfig loop = dual, wide = dual;
    loop.variant = BlockVariant::loop(3, dual.variant.d_ffn_deep);
    wide.variant = BlockVariant::wide(dual.variant.d_ffn_wide);
    auto ds = init_parameters<float>(dual);
    randomize(ds, 9);
    auto ls = init_parameters<float>(loop), ws = init_parameters<float>(wide);
    copy_shared(ds, ls);
    copy_shared(ds, ws);
    Interventions to_deep, to_wide;
    to_deep.gate_override = GateOverride{1.0, 0.0, {}};
    to_wide.gate_override = GateOverride{0.0, 1.0, {}};
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        auto tokens = random_tokens(2 * 6, 32, 100 + trial);
        auto layout = SequenceLayout::packed(2, 6);
        ForwardOptions od, ow;
        od.interventions = &to_deep;
        ow.interventions = &to_wide;
        EXPECT_EQ(forward_logits(ds, dual, tokens, layout, od), forward_logits(ls, loop, tokens, layout));
        EXPECT_EQ(forward_logits(ds, dual, tokens, layout, ow), forward_logits(ws, wide, tokens, layout));
    }
}

TEST(Trace, OneRecordPerLayerAndToken) {
    ModelConfig c = tiny_config(VariantKind::DualPath, 3, 3);
    auto store = init_parameters<double>(c);
    randomize(store, 4);
    TraceSink sink;
    ForwardOptions opt;
    opt.sink = &sink;
    opt.sequence_offset = 10;
    auto tokens = random_tokens(2 * 5, 32, 8);
    forward_logits(store, c, tokens, SequenceLayout::packed(2, 5), opt);
    ASSERT_EQ(sink.records().size(), 3u * 10u);
    std::set<std::tuple<std::int64_t, int, int>> keys;
    for (const auto& r : sink.records()) {
        keys.emplace(r.sequence_id, r.layer, r.token_index);
        EXPECT_EQ(r.token_id, tokens[(r.sequence_id - 10) * 5 + r.token_index]);
        EXPECT_EQ(r.q_steps.size(), 2u);
        EXPECT_GE(r.rho_d, 0.0);
        EXPECT_LE(r.rho_d, 1.0);
        EXPECT_NEAR(r.rho_d, deep_share(r.g_d, r.g_w, r.norm_dd, r.norm_dw), 1e-15);
    }
    EXPECT_EQ(keys.size(), 30u);
    EXPECT_EQ(std::get<0>(*keys.begin()), 10);
}

TEST(Trace, PureVariantsReportFixedGates) {
    for (VariantKind kind : {VariantKind::PureLoop, VariantKind::PureWide}) {
        BlockFixture f(tiny_config(kind, 2), 1, 3);
        f.ctx.sink = &f.sink;
        f.forward(f.x());
        for (const auto& r : f.sink.records()) {
            EXPECT_EQ(r.g_d, kind == VariantKind::PureLoop ? 1.0 : 0.0);
            EXPECT_EQ(r.g_w, kind == VariantKind::PureLoop ? 0.0 : 1.0);
            EXPECT_EQ(r.rho_d, kind == VariantKind::PureLoop ? 1.0 : 0.0);
        }
    }
}

TEST(ForceLoops, BelowOneIsRejected) {
    BlockFixture f(tiny_config(VariantKind::DualPath, 2));
    f.iv.force_loops = 0;
    EXPECT_THROW(f.forward(f.x()), InputError);
}

TEST(Shuffle, PermutationIsValidAndSeeded) {
    for (std::size_t n : {1u, 2u, 7u, 128u}) {
        auto p = shuffle_permutation(5, 1, 3, n);
        auto sorted = p;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(sorted[i], i);
        EXPECT_EQ(p, shuffle_permutation(5, 1, 3, n));
    }
    const auto base = shuffle_permutation(5, 1, 3, 64);
    EXPECT_NE(base, shuffle_permutation(6, 1, 3, 64));
    EXPECT_NE(base, shuffle_permutation(5, 2, 3, 64));
    EXPECT_NE(base, shuffle_permutation(5, 1, 4, 64));
}

TEST(Gradients, ReachEveryParameterGroup) {
    ModelConfig c = tiny_config(VariantKind::DualPath, 3);
    auto store = init_parameters<double>(c);
    auto tokens = random_tokens(8, 32, 1), targets = random_tokens(8, 32, 2);
    Tape<double> tape;
    tape.backward(cross_entropy(model_forward(bind_store(tape, store), c, tokens, SequenceLayout::packed(1, 8)), targets));
    for (const auto& p : store.params()) {
        double n = 0;
        for (double g : p.grad.storage()) n += g * g;
        EXPECT_GT(n, 0.0) << p.name;
    }
}
