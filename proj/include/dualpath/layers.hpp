#pragma once

// Variant-independent decoder machinery: QK-normalized rotary attention,
// SwiGLU feed-forward and the gain-scaled pre-norm residual sublayer.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dualpath/autodiff.hpp"
#include "dualpath/config.hpp"

namespace dualpath {

// Resolves a parameter name to a tape handle.
template <typename T>
using ParamBinder = std::function<Var<T>(const std::string&)>;

template <typename T>
ParamBinder<T> bind_store(Tape<T>& tape, ParameterStore<T>& store) {
    return [&tape, &store](const std::string& name) { return tape.parameter(store.get(name)); };
}

template <typename T>
ParamBinder<T> bind_store(Tape<T>& tape, const ParameterStore<T>& store) {
    return [&tape, &store](const std::string& name) { return tape.parameter(store.get(name)); };
}

// Row layout of a packed batch: row r is token (r % seq_len) of sequence (r / seq_len).
struct SequenceLayout {
    std::size_t batch = 1;
    std::size_t seq_len = 1;
    std::vector<int> positions;

    static SequenceLayout packed(std::size_t batch, std::size_t seq_len);
    std::size_t rows() const { return batch * seq_len; }
};

template <typename T>
struct AttentionWeights {
    Var<T> wq, wk, wv, wo;
    Var<T> q_norm, k_norm;
};

template <typename T>
struct SwigluWeights {
    Var<T> w_gate, w_up, w_down;
};

template <typename T>
struct SublayerWeights {
    Var<T> attn_norm;
    AttentionWeights<T> attn;
    Var<T> ffn_norm;
    SwigluWeights<T> ffn;
};

template <typename T>
SublayerWeights<T> bind_sublayer(const ParamBinder<T>& bind, const std::string& prefix);

// Adds the parameters of one sublayer with FFN width d_ffn under `prefix`.
template <typename T>
void add_sublayer_params(ParameterStore<T>& store, const std::string& prefix, const BackboneConfig& backbone,
                         int d_ffn, double init_std, std::mt19937_64& rng);

// Causal attention; queries and keys are RMS-normalized per head dimension,
// then rotated, then scored with 1/sqrt(d_head).
template <typename T>
Var<T> attention(Var<T> x, const AttentionWeights<T>& w, const BackboneConfig& backbone, const SequenceLayout& layout,
                 T eps);

// W_down(SiLU(x W_gate) * (x W_up))
template <typename T>
Var<T> swiglu(Var<T> x, const SwigluWeights<T>& w);

// u = x + s * Attn(RMSNorm(x)); out = u + s * FFN(RMSNorm(u)). `gain` is a
// single-element tensor.
template <typename T>
Var<T> sublayer(Var<T> x, const SublayerWeights<T>& w, Var<T> gain, const BackboneConfig& backbone,
                const SequenceLayout& layout, T eps);

// Tensor filled from N(0, std^2), drawn in double precision.
template <typename T>
Tensor<T> normal_tensor(Shape shape, double std, std::mt19937_64& rng);

}  // namespace dualpath
