#include "dualpath/layers.hpp"

#include "dualpath/flop_solver.hpp"

namespace dualpath {

SequenceLayout SequenceLayout::packed(std::size_t batch, std::size_t seq_len) {
    SequenceLayout l;
    l.batch = batch;
    l.seq_len = seq_len;
    l.positions.resize(batch * seq_len);
    for (std::size_t r = 0; r < l.positions.size(); ++r) l.positions[r] = static_cast<int>(r % seq_len);
    return l;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std);
    for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
SublayerWeights<T> bind_sublayer(const ParamBinder<T>& bind, const std::string& prefix) {
    SublayerWeights<T> w;
    w.attn_norm = bind(prefix + ".attn_norm");
    w.attn.wq = bind(prefix + ".wq");
    w.attn.wk = bind(prefix + ".wk");
    w.attn.wv = bind(prefix + ".wv");
    w.attn.wo = bind(prefix + ".wo");
    w.attn.q_norm = bind(prefix + ".q_norm");
    w.attn.k_norm = bind(prefix + ".k_norm");
    w.ffn_norm = bind(prefix + ".ffn_norm");
    w.ffn.w_gate = bind(prefix + ".w_gate");
    w.ffn.w_up = bind(prefix + ".w_up");
    w.ffn.w_down = bind(prefix + ".w_down");
    return w;
}

template <typename T>
void add_sublayer_params(ParameterStore<T>& store, const std::string& prefix, const BackboneConfig& b, int d_ffn,
                         double init_std, std::mt19937_64& rng) {
    const std::size_t d = b.d, kv = b.kv_width(), dh = b.head_dim();
    const std::size_t hidden = static_cast<std::size_t>(h_eff(d_ffn));
    store.add(prefix + ".attn_norm", Tensor<T>(Shape{d}, T(1)), false);
    store.add(prefix + ".wq", normal_tensor<T>({d, d}, init_std, rng), true);
    store.add(prefix + ".wk", normal_tensor<T>({d, kv}, init_std, rng), true);
    store.add(prefix + ".wv", normal_tensor<T>({d, kv}, init_std, rng), true);
    store.add(prefix + ".wo", normal_tensor<T>({d, d}, init_std, rng), true);
    store.add(prefix + ".q_norm", Tensor<T>(Shape{dh}, T(1)), false);
    store.add(prefix + ".k_norm", Tensor<T>(Shape{dh}, T(1)), false);
    store.add(prefix + ".ffn_norm", Tensor<T>(Shape{d}, T(1)), false);
    store.add(prefix + ".w_gate", normal_tensor<T>({d, hidden}, init_std, rng), true);
    store.add(prefix + ".w_up", normal_tensor<T>({d, hidden}, init_std, rng), true);
    store.add(prefix + ".w_down", normal_tensor<T>({hidden, d}, init_std, rng), true);
}

namespace {

// RMSNorm over each head's slice of a [N x heads*dh] tensor with a shared gain.
template <typename T>
Var<T> head_rmsnorm(Var<T> x, Var<T> gain, std::size_t heads, std::size_t dh, T eps) {
    const std::size_t n = x.value().rows();
    Var<T> flat = reshape(x, Shape{n * heads, dh});
    return reshape(rmsnorm(flat, gain, eps), Shape{n, heads * dh});
}

}  // namespace

template <typename T>
Var<T> attention(Var<T> x, const AttentionWeights<T>& w, const BackboneConfig& b, const SequenceLayout& layout, T eps) {
    if (layout.seq_len > static_cast<std::size_t>(b.T_max)) {
        throw InputError("sequence length " + std::to_string(layout.seq_len) + " exceeds T_max " +
                         std::to_string(b.T_max));
    }
    const std::size_t dh = b.head_dim();
    Var<T> q = matmul(x, w.wq);
    Var<T> k = matmul(x, w.wk);
    Var<T> v = matmul(x, w.wv);
    q = head_rmsnorm(q, w.q_norm, b.h_q, dh, eps);
    k = head_rmsnorm(k, w.k_norm, b.h_kv, dh, eps);
    q = rope(q, layout.positions, dh, b.rope_base);
    k = rope(k, layout.positions, dh, b.rope_base);
    Var<T> ctx = causal_attention(q, k, v, b.h_q, b.h_kv, layout.seq_len);
    return matmul(ctx, w.wo);
}

template <typename T>
Var<T> swiglu(Var<T> x, const SwigluWeights<T>& w) {
    Var<T> gate = silu(matmul(x, w.w_gate));
    Var<T> up = matmul(x, w.w_up);
    return matmul(mul(gate, up), w.w_down);
}

template <typename T>
Var<T> sublayer(Var<T> x, const SublayerWeights<T>& w, Var<T> gain, const BackboneConfig& b,
                const SequenceLayout& layout, T eps) {
    Var<T> u = add(x, mul(attention(rmsnorm(x, w.attn_norm, eps), w.attn, b, layout, eps), gain));
    return add(u, mul(swiglu(rmsnorm(u, w.ffn_norm, eps), w.ffn), gain));
}

#define DUALPATH_INSTANTIATE(T)                                                                                  \
    template Tensor<T> normal_tensor<T>(Shape, double, std::mt19937_64&);                                        \
    template SublayerWeights<T> bind_sublayer<T>(const ParamBinder<T>&, const std::string&);                    \
    template void add_sublayer_params<T>(ParameterStore<T>&, const std::string&, const BackboneConfig&, int,    \
                                         double, std::mt19937_64&);                                              \
    template Var<T> attention<T>(Var<T>, const AttentionWeights<T>&, const BackboneConfig&,                      \
                                 const SequenceLayout&, T);                                                      \
    template Var<T> swiglu<T>(Var<T>, const SwigluWeights<T>&);                                                  \
    template Var<T> sublayer<T>(Var<T>, const SublayerWeights<T>&, Var<T>, const BackboneConfig&,                \
                                const SequenceLayout&, T);

DUALPATH_INSTANTIATE(float)
DUALPATH_INSTANTIATE(double)

#undef DUALPATH_INSTANTIATE

}  // namespace dualpath
