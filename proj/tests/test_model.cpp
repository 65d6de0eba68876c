#include <gtest/gtest.h>

#include <cmath>

#include "dualpath/flop_solver.hpp"
#include "test_util.hpp"

using namespace dualpath;
using dualpath::testing::randomize;
using dualpath::testing::random_tokens;
using dualpath::testing::tiny_config;

namespace {

// ------------------------------------------------------------ straight-line oracle
// Everything below recomputes the forward pass with nested loops over
// std::vector, reading weights by name; it shares no code with the tape.

using Mat = std::vector<std::vector<double>>;

Mat weight(const ParameterStore<double>& s, const std::string& name) {
    const Tensor<double>& t = s.get(name).value;
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
    return m;
}

std::vector<double> vec(const ParameterStore<double>& s, const std::string& name) {
    return s.get(name).value.storage();
}

Mat mm(const Mat& a, const Mat& b) {
    Mat o(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) o[i][j] += a[i][k] * b[k][j];
    return o;
}

std::vector<double> rms(const std::vector<double>& x, const std::vector<double>& g, double eps) {
    double ss = 0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / x.size() + eps);
    std::vector<double> o(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) o[i] = x[i] * inv * g[i];
    return o;
}

Mat rms_rows(const Mat& x, const std::vector<double>& g, double eps) {
    Mat o;
    for (const auto& r : x) o.push_back(rms(r, g, eps));
    return o;
}

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Oracle {
    const ParameterStore<double>& s;
    const ModelConfig& c;
    int T;

    // Per-head norm then rotation of one projected row.
    std::vector<double> qk_row(std::vector<double> row, const std::vector<double>& g, int heads, int pos) const {
        const int dh = c.backbone.head_dim();
        for (int h = 0; h < heads; ++h) {
            std::vector<double> part(row.begin() + h * dh, row.begin() + (h + 1) * dh);
            part = rms(part, g, c.norm_eps);
            for (int i = 0; i < dh / 2; ++i) {
                const double th = pos * std::pow(c.backbone.rope_base, -2.0 * i / dh);
                const double a = part[2 * i], b = part[2 * i + 1];
                part[2 * i] = a * std::cos(th) - b * std::sin(th);
                part[2 * i + 1] = a * std::sin(th) + b * std::cos(th);
            }
            std::copy(part.begin(), part.end(), row.begin() + h * dh);
        }
        return row;
    }

    Mat attn(const Mat& x, const std::string& p) const {
        const int H = c.backbone.h_q, Hkv = c.backbone.h_kv, dh = c.backbone.head_dim();
        Mat q = mm(x, weight(s, p + ".wq")), k = mm(x, weight(s, p + ".wk")), v = mm(x, weight(s, p + ".wv"));
        for (int t = 0; t < T; ++t) {
            q[t] = qk_row(q[t], vec(s, p + ".q_norm"), H, t);
            k[t] = qk_row(k[t], vec(s, p + ".k_norm"), Hkv, t);
        }
        Mat ctx(T, std::vector<double>(H * dh, 0.0));
        for (int h = 0; h < H; ++h) {
            const int g = h / (H / Hkv);
            for (int i = 0; i < T; ++i) {
                std::vector<double> e(i + 1);
                double z = 0;
                for (int j = 0; j <= i; ++j) {
                    double dot = 0;
                    for (int a = 0; a < dh; ++a) dot += q[i][h * dh + a] * k[j][g * dh + a];
                    e[j] = std::exp(dot / std::sqrt(double(dh)));
                    z += e[j];
                }
                for (int j = 0; j <= i; ++j)
                    for (int a = 0; a < dh; ++a) ctx[i][h * dh + a] += e[j] / z * v[j][g * dh + a];
            }
        }
        return mm(ctx, weight(s, p + ".wo"));
    }

    Mat ffn(const Mat& x, const std::string& p) const {
        Mat a = mm(x, weight(s, p + ".w_gate")), b = mm(x, weight(s, p + ".w_up"));
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] = a[i][j] * sig(a[i][j]) * b[i][j];
        return mm(a, weight(s, p + ".w_down"));
    }

    Mat sub(const Mat& x, const std::string& p, double gain) const {
        Mat u = x, a = attn(rms_rows(x, vec(s, p + ".attn_norm"), c.norm_eps), p);
        for (int t = 0; t < T; ++t)
            for (std::size_t j = 0; j < u[t].size(); ++j) u[t][j] += gain * a[t][j];
        Mat f = ffn(rms_rows(u, vec(s, p + ".ffn_norm"), c.norm_eps), p), o = u;
        for (int t = 0; t < T; ++t)
            for (std::size_t j = 0; j < o[t].size(); ++j) o[t][j] += gain * f[t][j];
        return o;
    }

    static double sp(double z) { return std::log1p(std::exp(z)); }

    Mat deep(const Mat& x, const std::string& p) const {
        const int K = c.variant.K, d = c.backbone.d;
        const auto logits = vec(s, p + ".gain_logits");
        const auto rw = vec(s, p + ".router_w");
        const double rb = vec(s, p + ".router_b")[0];
        std::vector<Mat> h{x};
        for (int k = 1; k <= K; ++k) h.push_back(sub(h.back(), p, sp(logits[k - 1])));
        Mat out(T, std::vector<double>(d, 0.0));
        for (int t = 0; t < T; ++t) {
            // Explicit stick-breaking sum.
            double rest = 1.0;
            for (int k = 1; k <= K; ++k) {
                double w = rest;
                if (k < K) {
                    double z = rb + rw[d] * double(k) / (K - 1);
                    for (int j = 0; j < d; ++j) z += h[k][t][j] * rw[j];
                    const double q = sig(z);
                    w = rest * q;
                    rest *= 1.0 - q;
                }
                for (int j = 0; j < d; ++j) out[t][j] += w * h[k][t][j];
            }
        }
        return out;
    }

    Mat logits(const std::vector<int>& tokens) const {
        const int d = c.backbone.d;
        Mat embed = weight(s, "embed"), h;
        for (int t : tokens) h.push_back(embed[t]);
        for (int l = 0; l < c.backbone.L; ++l) {
            const std::string p = "layers." + std::to_string(l);
            Mat hd = deep(h, p + ".deep");
            Mat hw = sub(h, p + ".wide", sp(vec(s, p + ".wide.gain_logit")[0]));
            Mat gw = weight(s, p + ".gate.w");
            const auto gb = vec(s, p + ".gate.b");
            for (int t = 0; t < T; ++t) {
                double zd = gb[0], zw = gb[1];
                for (int j = 0; j < d; ++j) {
                    zd += h[t][j] * gw[j][0];
                    zw += h[t][j] * gw[j][1];
                }
                for (int j = 0; j < d; ++j) h[t][j] = sig(zd) * hd[t][j] + sig(zw) * hw[t][j];
            }
        }
        return mm(rms_rows(h, vec(s, "final_norm"), c.norm_eps), weight(s, "head"));
    }
};

}  // namespace

TEST(Model, MatchesStraightLineOracle) {
    ModelConfig c = tiny_config(VariantKind::DualPath, 3, 1, 4, 8);
    c.backbone.h_q = 2;
    c.backbone.h_kv = 1;
    auto store = init_parameters<double>(c);
    randomize(store, 3, 0.5);
    const std::vector<int> tokens{1, 7, 0, 3, 3, 5};
    const int T = static_cast<int>(tokens.size());
    Tensor<double> got = forward_logits(store, c, tokens, SequenceLayout::packed(1, T));
    Mat want = Oracle{store, c, T}.logits(tokens);
    for (int t = 0; t < T; ++t)
        for (int v = 0; v < 8; ++v) EXPECT_NEAR(got.at(t, v), want[t][v], 1e-11) << t << "," << v;
}

TEST(Model, MatchesOracleOverTwoLayers) {
    ModelConfig c = tiny_config(VariantKind::DualPath, 2, 2, 8, 8);
    auto store = init_parameters<double>(c);
    randomize(store, 4, 0.4);
    const std::vector<int> tokens{2, 2, 6, 1};
    Tensor<double> got = forward_logits(store, c, tokens, SequenceLayout::packed(1, 4));
    Mat want = Oracle{store, c, 4}.logits(tokens);
    for (int t = 0; t < 4; ++t)
        for (int v = 0; v < 8; ++v) EXPECT_NEAR(got.at(t, v), want[t][v], 1e-11);
}

TEST(Model, LogitShapeAndParameterOrder) {
    ModelConfig c = tiny_config();
    auto store = init_parameters<float>(c);
    EXPECT_EQ(store.params().front().name, "embed");
    EXPECT_EQ(store.params().back().name, "head");
    EXPECT_EQ(store.params()[store.size() - 2].name, "final_norm");
    auto tokens = random_tokens(2 * 5, c.backbone.vocab, 1);
    EXPECT_EQ(forward_logits(store, c, tokens, SequenceLayout::packed(2, 5)).shape(), (Shape{10, 32}));
}

TEST(Model, InitIsDeterministicPerSeed) {
    ModelConfig c = tiny_config();
    auto a = init_parameters<float>(c), b = init_parameters<float>(c);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
    c.seed = 8;
    EXPECT_NE(init_parameters<float>(c).get("embed").value, a.get("embed").value);
}

TEST(Model, ZeroGainsComposeToIdentityBlocks) {
    // With every gain at 0 and gates at their 0.5/0.5 init each block returns
    // its input, so logits are RMSNorm(embed[token]) * head.
    ModelConfig c = tiny_config();
    auto store = init_parameters<double>(c);
    Interventions iv;
    iv.gain_override = 0.0;
    ForwardOptions opt;
    opt.interventions = &iv;
    std::vector<int> tokens{3, 9, 31};
    Tensor<double> got = forward_logits(store, c, tokens, SequenceLayout::packed(1, 3), opt);
    Mat embed = weight(store, "embed"), head = weight(store, "head");
    Mat h;
    for (int t : tokens) h.push_back(rms(embed[t], vec(store, "final_norm"), c.norm_eps));
    Mat want = mm(h, head);
    for (int t = 0; t < 3; ++t)
        for (int v = 0; v < 32; ++v) EXPECT_NEAR(got.at(t, v), want[t][v], 1e-13);
}

TEST(Model, IsCausal) {
    ModelConfig c = tiny_config();
    auto store = init_parameters<double>(c);
    randomize(store, 5);
    auto tokens = random_tokens(8, c.backbone.vocab, 2);
    auto layout = SequenceLayout::packed(1, 8);
    Tensor<double> base = forward_logits(store, c, tokens, layout);
    tokens[5] = (tokens[5] + 1) % c.backbone.vocab;
    Tensor<double> changed = forward_logits(store, c, tokens, layout);
    for (std::size_t t = 0; t < 8; ++t) {
        bool same = true;
        for (std::size_t v = 0; v < 32; ++v) same = same && base.at(t, v) == changed.at(t, v);
        EXPECT_EQ(same, t < 5) << "position " << t;
    }
}

TEST(Model, SequencesInABatchAreIndependent) {
    ModelConfig c = tiny_config();
    auto store = init_parameters<double>(c);
    randomize(store, 6);
    auto tokens = random_tokens(12, c.backbone.vocab, 3);
    Tensor<double> both = forward_logits(store, c, tokens, SequenceLayout::packed(2, 6));
    std::vector<int> second(tokens.begin() + 6, tokens.end());
    Tensor<double> alone = forward_logits(store, c, second, SequenceLayout::packed(1, 6));
    for (std::size_t i = 0; i < alone.size(); ++i) EXPECT_NEAR(both[6 * 32 + i], alone[i], 1e-12);
}

TEST(Model, TiedEmbeddingsReuseTheTable) {
    ModelConfig c = tiny_config();
    c.backbone.tie_embeddings = true;
    auto store = init_parameters<double>(c);
    EXPECT_FALSE(store.contains("head"));
    Interventions iv;
    iv.gain_override = 0.0;
    ForwardOptions opt;
    opt.interventions = &iv;
    std::vector<int> tokens{4, 4};
    Tensor<double> got = forward_logits(store, c, tokens, SequenceLayout::packed(1, 2), opt);
    Mat embed = weight(store, "embed");
    auto h = rms(embed[4], vec(store, "final_norm"), c.norm_eps);
    for (int v = 0; v < 32; ++v) {
        double want = 0;
        for (int j = 0; j < 16; ++j) want += h[j] * embed[v][j];
        EXPECT_NEAR(got.at(1, v), want, 1e-13);
    }
}

TEST(Model, ParameterCountMatchesStore) {
    for (VariantKind kind : {VariantKind::DualPath, VariantKind::PureLoop, VariantKind::PureWide}) {
        for (bool tie : {false, true}) {
            ModelConfig c = tiny_config(kind, 4);
            c.backbone.tie_embeddings = tie;
            c.backbone.h_kv = 1;
            auto store = init_parameters<float>(c);
            const ParamBreakdown pb = param_count(c);
            EXPECT_EQ(static_cast<std::size_t>(pb.total()), store.scalar_count())
                << to_string(kind) << " tie=" << tie;
        }
    }
}

TEST(Model, RejectsBadInput) {
    ModelConfig c = tiny_config();
    auto store = init_parameters<float>(c);
    std::vector<int> oov{1, 32};
    EXPECT_THROW(forward_logits(store, c, oov, SequenceLayout::packed(1, 2)), InputError);
    std::vector<int> three{1, 2, 3};
    EXPECT_THROW(forward_logits(store, c, three, SequenceLayout::packed(1, 2)), DimensionError);
    std::vector<int> long_seq(17, 1);
    EXPECT_THROW(forward_logits(store, c, long_seq, SequenceLayout::packed(1, 17)), InputError);
}

TEST(Model, GradientsMatchFiniteDifferencesForEveryVariant) {
    for (VariantKind kind : {VariantKind::PureLoop, VariantKind::PureWide, VariantKind::DualPath}) {
        ModelConfig c = tiny_config(kind, 2, 1, 8, 8);
        auto store = init_parameters<double>(c);
        randomize(store, 7);
        std::vector<int> tokens{1, 2, 3, 4, 5}, targets{2, 3, 4, 5, 6};
        auto layout = SequenceLayout::packed(1, 5);
        auto loss = [&] {
            Tape<double> tape;
            return cross_entropy(model_forward(bind_store(tape, store), c, tokens, layout), targets).value()[0];
        };
        store.zero_grad();
        {
            Tape<double> tape;
            tape.backward(cross_entropy(model_forward(bind_store(tape, store), c, tokens, layout), targets));
        }
        double worst = 0;
        for (auto& p : store.params()) {
            // A few entries per tensor keep the runtime low.
            for (std::size_t i = 0; i < p.value.size(); i += 1 + p.value.size() / 5) {
                const double orig = p.value[i], h = 1e-5;
                p.value[i] = orig + h;
                const double up = loss();
                p.value[i] = orig - h;
                const double dn = loss();
                p.value[i] = orig;
                const double fd = (up - dn) / (2 * h), an = p.grad[i];
                // Central differences at h = 1e-5 carry about 1e-10 of rounding noise.
                worst = std::max(worst, std::abs(fd - an) / (1e-4 + std::max(std::abs(fd), std::abs(an))));
            }
        }
        EXPECT_LT(worst, 1e-5) << to_string(kind);
    }
}
