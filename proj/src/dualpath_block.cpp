#include "dualpath/dualpath_block.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dualpath/errors.hpp"

namespace dualpath {

bool GateOverride::applies(int layer) const {
    return layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end();
}

std::vector<double> loop_mix_weights(std::span<const double> q) {
    std::vector<double> w;
    w.reserve(q.size() + 1);
    double remaining = 1.0;
    for (double qk : q) {
        w.push_back(remaining * qk);
        remaining *= 1.0 - qk;
    }
    w.push_back(remaining);
    return w;
}

std::vector<std::size_t> shuffle_permutation(std::uint64_t seed, int layer, std::int64_t sequence_id, std::size_t n) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(sequence_id),
                      static_cast<std::uint32_t>(static_cast<std::uint64_t>(sequence_id) >> 32)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    // Fisher-Yates with an explicit bounded draw so the order does not depend
    // on the standard library's distribution implementation.
    for (std::size_t i = n; i > 1; --i) {
        const std::uint64_t bound = i;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t r;
        do r = rng();
        while (r >= limit);
        std::swap(perm[i - 1], perm[r % bound]);
    }
    return perm;
}

template <typename T>
BlockWeights<T> bind_block(const ParamBinder<T>& bind, int layer, const BlockVariant& variant) {
    const std::string p = "layers." + std::to_string(layer);
    BlockWeights<T> w;
    if (variant.has_deep()) {
        DeepPathWeights<T> deep;
        deep.sub = bind_sublayer(bind, p + ".deep");
        deep.gain_logits = bind(p + ".deep.gain_logits");
        deep.router_w = bind(p + ".deep.router_w");
        deep.router_b = bind(p + ".deep.router_b");
        w.deep = deep;
    }
    if (variant.has_wide()) {
        WidePathWeights<T> wide;
        wide.sub = bind_sublayer(bind, p + ".wide");
        wide.gain_logit = bind(p + ".wide.gain_logit");
        w.wide = wide;
    }
    if (variant.has_gate()) w.gate = GateWeights<T>{bind(p + ".gate.w"), bind(p + ".gate.b")};
    return w;
}

template <typename T>
void add_block_params(ParameterStore<T>& store, int layer, const ModelConfig& config, std::mt19937_64& rng) {
    const std::string p = "layers." + std::to_string(layer);
    const BlockVariant& v = config.variant;
    const std::size_t d = config.backbone.d;
    const T logit = static_cast<T>(config.gain_logit_init);
    if (v.has_deep()) {
        add_sublayer_params(store, p + ".deep", config.backbone, v.d_ffn_deep, config.init_std, rng);
        store.add(p + ".deep.gain_logits", Tensor<T>(Shape{static_cast<std::size_t>(v.K)}, logit), false);
        store.add(p + ".deep.router_w", Tensor<T>(Shape{d + 1, 1}), true);
        store.add(p + ".deep.router_b", Tensor<T>(Shape{1}, static_cast<T>(config.router_bias_init)), false);
    }
    if (v.has_wide()) {
        add_sublayer_params(store, p + ".wide", config.backbone, v.d_ffn_wide, config.init_std, rng);
        store.add(p + ".wide.gain_logit", Tensor<T>(Shape{1}, logit), false);
    }
    if (v.has_gate()) {
        store.add(p + ".gate.w", Tensor<T>(Shape{d, 2}), true);
        store.add(p + ".gate.b", Tensor<T>(Shape{2}), false);
    }
}

namespace {

template <typename T>
const Interventions& interventions_of(const BlockContext<T>& ctx) {
    static const Interventions none;
    return ctx.interventions ? *ctx.interventions : none;
}

template <typename T>
Var<T> constant_gain(Tape<T>& tape, double s) {
    if (!(s >= 0.0)) throw ConfigError("gain override must be nonnegative");
    return tape.constant(Tensor<T>(Shape{1}, static_cast<T>(s)));
}

template <typename T>
Var<T> constant_rows(Tape<T>& tape, std::size_t rows, double v) {
    return tape.constant(Tensor<T>(Shape{rows}, static_cast<T>(v)));
}

}  // namespace

template <typename T>
DeepPathResult<T> deep_path(Var<T> x, const DeepPathWeights<T>& w, int K, const BlockContext<T>& ctx) {
    if (K < 1) throw ConfigError("deep path needs K >= 1");
    const Interventions& iv = interventions_of(ctx);
    Tape<T>& tape = x.tape();
    const std::size_t trained_K = w.gain_logits.size();
    const std::size_t d = static_cast<std::size_t>(ctx.backbone->d);
    const std::size_t rows = x.value().rows();

    Var<T> gains = iv.gain_override ? Var<T>{} : softplus(w.gain_logits);
    DeepPathResult<T> out;
    Var<T> h = x;
    for (int k = 1; k <= K; ++k) {
        // Steps past the trained count reuse the last trained gain.
        const std::size_t g = std::min<std::size_t>(k, trained_K) - 1;
        Var<T> s = iv.gain_override ? constant_gain(tape, *iv.gain_override) : slice_rows(gains, g, g + 1);
        h = sublayer(h, w.sub, s, *ctx.backbone, *ctx.layout, ctx.eps);
        out.states.push_back(h);
    }

    if (iv.router_override && static_cast<int>(iv.router_override->size()) != K - 1) {
        throw ConfigError("router override needs K-1 = " + std::to_string(K - 1) + " values");
    }
    for (int k = 1; k < K; ++k) {
        if (iv.router_override) {
            const double q = (*iv.router_override)[k - 1];
            if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("router override values must lie in [0,1]");
            out.q.push_back(constant_rows(tape, rows, q));
            continue;
        }
        const T index = static_cast<T>(k) / static_cast<T>(K - 1);
        Var<T> logit = matmul(out.states[k - 1], slice_rows(w.router_w, 0, d));
        logit = add(logit, scale(slice_rows(w.router_w, d, d + 1), index));
        logit = add(reshape(logit, Shape{rows}), w.router_b);
        out.q.push_back(sigmoid(logit));
    }

    // m_K = h^(K); m_k = m_{k+1} + q_k (h^(k) - m_{k+1}). Expands to the
    // stick-breaking mixture and returns x exactly when every state equals x.
    Var<T> m = out.states.back();
    for (int k = K - 1; k >= 1; --k) m = add(m, scale_rows(sub(out.states[k - 1], m), out.q[k - 1]));
    out.h = m;
    return out;
}

template <typename T>
Var<T> wide_path(Var<T> x, const WidePathWeights<T>& w, const BlockContext<T>& ctx) {
    const Interventions& iv = interventions_of(ctx);
    Var<T> s = iv.gain_override ? constant_gain(x.tape(), *iv.gain_override) : softplus(w.gain_logit);
    return sublayer(x, w.sub, s, *ctx.backbone, *ctx.layout, ctx.eps);
}

template <typename T>
GateResult<T> gate_combine(Var<T> x, Var<T> h_deep, Var<T> h_wide, const GateWeights<T>& w, const BlockContext<T>& ctx) {
    const Interventions& iv = interventions_of(ctx);
    Tape<T>& tape = x.tape();
    const std::size_t rows = x.value().rows();
    Var<T> gates = sigmoid(add(matmul(x, w.w), w.b));
    if (iv.shuffle_seed) {
        const std::size_t n = ctx.layout->seq_len;
        std::vector<std::size_t> index(rows);
        for (std::size_t b = 0; b < ctx.layout->batch; ++b) {
            const auto perm = shuffle_permutation(*iv.shuffle_seed, ctx.layer,
                                                  ctx.sequence_offset + static_cast<std::int64_t>(b), n);
            for (std::size_t t = 0; t < n; ++t) index[b * n + t] = b * n + perm[t];
        }
        gates = gather_rows(gates, std::move(index));
    }
    Var<T> g_d = column(gates, 0);
    Var<T> g_w = column(gates, 1);
    if (iv.gate_override && iv.gate_override->applies(ctx.layer)) {
        const GateOverride& o = *iv.gate_override;
        for (const auto& v : {o.g_d, o.g_w})
            if (v && !(*v >= 0.0 && *v <= 1.0)) throw InputError("gate override values must lie in [0,1]");
        if (o.g_d) g_d = constant_rows(tape, rows, *o.g_d);
        if (o.g_w) g_w = constant_rows(tape, rows, *o.g_w);
    }
    Var<T> y = add(scale_rows(h_deep, g_d), scale_rows(h_wide, g_w));
    return {y, g_d, g_w};
}

namespace {

template <typename T>
void emit_records(const BlockContext<T>& ctx, const Tensor<T>& x, const Tensor<T>* h_deep, const Tensor<T>* h_wide,
                  const Tensor<T>* g_d, const Tensor<T>* g_w, const std::vector<Var<T>>& q) {
    const std::size_t rows = x.rows(), d = x.cols();
    std::vector<T> dd(d), dw(d);
    for (std::size_t r = 0; r < rows; ++r) {
        RoutingRecord rec;
        rec.sequence_id = ctx.sequence_offset + static_cast<std::int64_t>(r / ctx.layout->seq_len);
        rec.layer = ctx.layer;
        rec.token_index = static_cast<int>(r % ctx.layout->seq_len);
        rec.token_id = r < ctx.tokens.size() ? ctx.tokens[r] : -1;
        rec.g_d = g_d ? static_cast<double>((*g_d)[r]) : (h_deep ? 1.0 : 0.0);
        rec.g_w = g_w ? static_cast<double>((*g_w)[r]) : (h_wide ? 1.0 : 0.0);
        double nd = 0.0, nw = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dd[j] = h_deep ? (*h_deep)[r * d + j] - x[r * d + j] : T(0);
            dw[j] = h_wide ? (*h_wide)[r * d + j] - x[r * d + j] : T(0);
            nd += static_cast<double>(dd[j]) * static_cast<double>(dd[j]);
            nw += static_cast<double>(dw[j]) * static_cast<double>(dw[j]);
        }
        rec.norm_dd = std::sqrt(nd);
        rec.norm_dw = std::sqrt(nw);
        rec.cos_dw = path_cosine<T>(dd, dw);
        rec.rho_d = deep_share(rec.g_d, rec.g_w, rec.norm_dd, rec.norm_dw, &rec.degenerate);
        for (const Var<T>& qk : q) rec.q_steps.push_back(static_cast<double>(qk.value()[r]));
        rec.token_text = token_text(rec.token_id, ctx.backbone->vocab);
        ctx.sink->emit(std::move(rec));
    }
}

}  // namespace

template <typename T>
Var<T> block_forward(Var<T> x, const BlockVariant& variant, const BlockWeights<T>& w, const BlockContext<T>& ctx) {
    const Interventions& iv = interventions_of(ctx);
    const int K = iv.force_loops ? *iv.force_loops : variant.K;
    if (iv.force_loops && K < 1) throw InputError("forced loop count must be >= 1");

    std::optional<DeepPathResult<T>> deep;
    std::optional<Var<T>> wide;
    if (variant.has_deep()) {
        if (!w.deep) throw ConfigError("block weights lack the deep path");
        deep = deep_path(x, *w.deep, K, ctx);
    }
    if (variant.has_wide()) {
        if (!w.wide) throw ConfigError("block weights lack the wide path");
        wide = wide_path(x, *w.wide, ctx);
    }

    Var<T> y;
    std::optional<GateResult<T>> gates;
    if (variant.has_gate()) {
        if (!w.gate) throw ConfigError("block weights lack the gate");
        gates = gate_combine(x, deep->h, *wide, *w.gate, ctx);
        y = gates->y;
    } else {
        y = deep ? deep->h : *wide;
    }

    if (ctx.sink) {
        static const std::vector<Var<T>> no_q;
        emit_records(ctx, x.value(), deep ? &deep->h.value() : nullptr, wide ? &wide->value() : nullptr,
                     gates ? &gates->g_d.value() : nullptr, gates ? &gates->g_w.value() : nullptr,
                     deep ? deep->q : no_q);
    }
    return y;
}

#define DUALPATH_INSTANTIATE(T)                                                                                   \
    template BlockWeights<T> bind_block<T>(const ParamBinder<T>&, int, const BlockVariant&);                      \
    template void add_block_params<T>(ParameterStore<T>&, int, const ModelConfig&, std::mt19937_64&);             \
    template DeepPathResult<T> deep_path<T>(Var<T>, const DeepPathWeights<T>&, int, const BlockContext<T>&);      \
    template Var<T> wide_path<T>(Var<T>, const WidePathWeights<T>&, const BlockContext<T>&);                      \
    template GateResult<T> gate_combine<T>(Var<T>, Var<T>, Var<T>, const GateWeights<T>&, const BlockContext<T>&); \
    template Var<T> block_forward<T>(Var<T>, const BlockVariant&, const BlockWeights<T>&, const BlockContext<T>&);

DUALPATH_INSTANTIATE(float)
DUALPATH_INSTANTIATE(double)

#undef DUALPATH_INSTANTIATE

}  // namespace dualpath
