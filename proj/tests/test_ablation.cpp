#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "dualpath/ablation.hpp"
#include "test_util.hpp"

using namespace dualpath;
using dualpath::testing::randomize;
using dualpath::testing::random_tokens;
using dualpath::testing::tiny_config;

namespace {

struct Trained {
    ModelConfig config = tiny_config(VariantKind::DualPath, 4, 2, 16, 64);
    ParameterStore<float> store;
    std::vector<int> tokens;

    Trained() : store(init_parameters<float>(config)), tokens(random_tokens(100, 64, 3)) { randomize(store, 21, 0.2); }
};

using GatePair = std::pair<float, float>;

// Gates each layer computes from its actual input, and the gates the records
// report after the intervention, keyed by (layer, sequence).
struct GateCapture {
    std::map<std::pair<int, std::int64_t>, std::vector<GatePair>> computed, reported;
};

GateCapture capture_gates(const ParameterStore<float>& store, const ModelConfig& c, std::span<const int> tokens,
                          std::size_t batch, std::size_t T, const Interventions& iv, std::int64_t offset) {
    Tape<float> tape;
    auto bind = bind_store(tape, store);
    auto layout = SequenceLayout::packed(batch, T);
    TraceSink sink;
    BlockContext<float> ctx;
    ctx.backbone = &c.backbone;
    ctx.layout = &layout;
    ctx.eps = static_cast<float>(c.norm_eps);
    ctx.interventions = &iv;
    ctx.sink = &sink;
    ctx.tokens = tokens;
    ctx.sequence_offset = offset;
    GateCapture out;
    Var<float> h = embedding(bind("embed"), tokens);
    for (int l = 0; l < c.backbone.L; ++l) {
        ctx.layer = l;
        auto w = bind_block(bind, l, c.variant);
        auto g = sigmoid(add(matmul(h, w.gate->w), w.gate->b)).value();
        for (std::size_t r = 0; r < layout.rows(); ++r)
            out.computed[{l, offset + static_cast<std::int64_t>(r / T)}].emplace_back(g.at(r, 0), g.at(r, 1));
        h = block_forward(h, c.variant, w, ctx);
    }
    for (const auto& r : sink.records())
        out.reported[{r.layer, r.sequence_id}].emplace_back(static_cast<float>(r.g_d), static_cast<float>(r.g_w));
    return out;
}

}  // namespace

TEST(AblationSpec, ParseAndPrintRoundTrip) {
    for (const char* text : {"none", "force-loops:3", "gates:1,0", "gates:*,0.25", "gates:0.5,*@layers=0,2",
                             "shuffle:seed=42"}) {
        EXPECT_EQ(AblationSpec::parse(text).to_string(), text);
    }
    auto s = AblationSpec::parse("gates:0,1@layers=3");
    EXPECT_EQ(s.kind, AblationSpec::Kind::GateOverride);
    EXPECT_EQ(*s.gates.g_d, 0.0);
    EXPECT_EQ(s.gates.layers, (std::vector<int>{3}));
    EXPECT_EQ(AblationSpec::parse("").kind, AblationSpec::Kind::None);
}

TEST(AblationSpec, RejectsMalformedSpecs) {
    for (const char* text : {"force-loops", "force-loops:0", "force-loops:2x", "gates:1", "gates:*,*", "gates:1.5,0",
                             "gates:-0.1,0", "gates:a,0", "gates:1,0@lay=1", "gates:1,0@layers=x", "shuffle:7",
                             "shuffle:seed=-1", "drop:1"}) {
        EXPECT_THROW(AblationSpec::parse(text), InputError) << text;
    }
}

TEST(ForceLoops, TrainedCountLeavesLossUnchanged) {
    Trained t;
    auto base = evaluate_ce(base_view(t.store, t.config), t.tokens, 16);
    auto same = evaluate_ce(force_loops(base_view(t.store, t.config), 4), t.tokens, 16);
    EXPECT_EQ(same.total_nats, base.total_nats);
    auto report = run_ablation(t.store, t.config, t.tokens, AblationSpec::parse("force-loops:4"), 16);
    EXPECT_EQ(report.delta, 0.0);
}

TEST(ForceLoops, OneAndDoubleAreFinite) {
    Trained t;
    auto one = run_ablation(t.store, t.config, t.tokens, AblationSpec::parse("force-loops:1"), 16);
    EXPECT_TRUE(std::isfinite(one.loss));
    EXPECT_NE(one.delta, 0.0);
    auto twice = run_ablation(t.store, t.config, t.tokens, AblationSpec::parse("force-loops:8"), 16);
    EXPECT_TRUE(std::isfinite(twice.loss));
    ASSERT_FALSE(twice.notes.empty());
    EXPECT_NE(twice.notes[0].find("reuse"), std::string::npos);
}

TEST(ForceLoops, FewerStepsIgnoreTrailingGains) {
    Trained t;
    auto before = evaluate_ce(force_loops(base_view(t.store, t.config), 2), t.tokens, 16);
    for (int l = 0; l < 2; ++l) {
        auto& g = t.store.get("layers." + std::to_string(l) + ".deep.gain_logits").value;
        g[2] = 3.0f;
        g[3] = -1.0f;
    }
    auto after = evaluate_ce(force_loops(base_view(t.store, t.config), 2), t.tokens, 16);
    EXPECT_EQ(before.total_nats, after.total_nats);
    EXPECT_NE(evaluate_ce(base_view(t.store, t.config), t.tokens, 16).total_nats, 0.0);
}

TEST(GateOverride, FixedSideReplacesOnlyThatGate) {
    Trained t;
    std::vector<int> tokens(t.tokens.begin(), t.tokens.begin() + 12);
    Interventions none, half;
    half.gate_override = GateOverride{std::nullopt, 0.0, {1}};
    auto a = capture_gates(t.store, t.config, tokens, 2, 6, none, 0);
    auto b = capture_gates(t.store, t.config, tokens, 2, 6, half, 0);
    const std::pair<int, std::int64_t> first_layer{0, 0};
    EXPECT_EQ(a.reported[first_layer], b.reported[first_layer]);
    for (std::int64_t s = 0; s < 2; ++s) {
        const auto& rep = b.reported[std::make_pair(1, s)];
        const auto& comp = b.computed[std::make_pair(1, s)];
        for (std::size_t i = 0; i < rep.size(); ++i) {
            EXPECT_EQ(rep[i].first, comp[i].first);
            EXPECT_EQ(rep[i].second, 0.0f);
        }
    }
}

TEST(GateOverride, ViewRejectsOutOfRangeValues) {
    Trained t;
    EXPECT_THROW(override_gates(base_view(t.store, t.config), GateOverride{2.0, 0.0, {}}), InputError);
}

TEST(Shuffle, PreservesGateMultisetsPerLayerAndSequence) {
    Trained t;
    std::vector<int> tokens(t.tokens.begin(), t.tokens.begin() + 3 * 10);
    Interventions iv;
    iv.shuffle_seed = 99;
    auto cap = capture_gates(t.store, t.config, tokens, 3, 10, iv, 5);
    ASSERT_EQ(cap.computed.size(), 2u * 3u);
    bool moved = false;
    for (auto& [key, computed] : cap.computed) {
        auto reported = cap.reported.at(key);
        moved = moved || reported != computed;
        std::sort(computed.begin(), computed.end());
        std::sort(reported.begin(), reported.end());
        EXPECT_EQ(reported, computed) << "layer " << key.first << " seq " << key.second;
    }
    EXPECT_TRUE(moved);
}

TEST(Shuffle, SameSeedIsBitIdenticalAndSeedsDiffer) {
    Trained t;
    auto a = evaluate_ce(shuffle_gates(base_view(t.store, t.config), 7), t.tokens, 16);
    auto b = evaluate_ce(shuffle_gates(base_view(t.store, t.config), 7), t.tokens, 16);
    auto c = evaluate_ce(shuffle_gates(base_view(t.store, t.config), 8), t.tokens, 16);
    EXPECT_EQ(a.total_nats, b.total_nats);
    EXPECT_NE(a.total_nats, c.total_nats);
}

TEST(Shuffle, SingleTokenSequencesAreUnchanged) {
    Trained t;
    auto base = evaluate_ce(base_view(t.store, t.config), t.tokens, 1);
    auto shuffled = evaluate_ce(shuffle_gates(base_view(t.store, t.config), 3), t.tokens, 1);
    EXPECT_EQ(base.total_nats, shuffled.total_nats);
}

TEST(EvaluateCe, ZeroHeadGivesUniformLoss) {
    ModelConfig c = tiny_config(VariantKind::DualPath, 2, 2, 16, 256);
    auto store = init_parameters<float>(c);
    for (auto& v : store.get("head").value.storage()) v = 0.0f;
    auto tokens = random_tokens(50, 256, 4);
    auto r = evaluate_ce(base_view(store, c), tokens, 16);
    EXPECT_EQ(r.tokens, 49);
    EXPECT_NEAR(r.mean(), std::log(256.0), 1e-6);
}

TEST(EvaluateCe, NoAblationEqualsDirectEvaluation) {
    Trained t;
    auto view = evaluate_ce(apply(base_view(t.store, t.config), AblationSpec::parse("none")), t.tokens, 16, 4);
    auto direct = evaluate_nll(t.store, t.config, t.tokens, 16, 4);
    EXPECT_EQ(view.total_nats, direct.total_nats);
    EXPECT_EQ(view.tokens, direct.tokens);
}

TEST(EvaluateCe, EmptyCorpusThrows) {
    Trained t;
    std::vector<int> empty;
    EXPECT_THROW(evaluate_ce(base_view(t.store, t.config), empty, 16), InputError);
}

TEST(RunAblation, NotesForVariantsWithoutGates) {
    ModelConfig c = tiny_config(VariantKind::PureLoop, 2, 1, 16, 64);
    auto store = init_parameters<float>(c);
    auto tokens = random_tokens(40, 64, 5);
    auto r = run_ablation(store, c, tokens, AblationSpec::parse("shuffle:seed=1"), 8);
    EXPECT_EQ(r.delta, 0.0);
    ASSERT_EQ(r.notes.size(), 1u);
    nlohmann::json j = r;
    EXPECT_EQ(j.at("spec"), "shuffle:seed=1");
    EXPECT_EQ(j.at("tokens"), 39);
}
