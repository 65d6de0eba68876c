#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "dualpath/parameter_store.hpp"
#include "dualpath/tensor.hpp"

namespace dualpath {

template <typename T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Tensor<T>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    bool requires_grad() const { return tape_->requires_grad(id_); }
    // Gradient left by the last backward pass; empty if none reached this node.
    const std::vector<T>& grad() const { return tape_->grad(id_); }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Ordered record of operations. backward() replays it in reverse, adding into
// gradients; parameter gradients accumulate across calls.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    Var<T> input(Tensor<T> value);
    Var<T> parameter(Parameter<T>& param);
    // Read-only binding: no gradient is tracked or written back.
    Var<T> parameter(const Parameter<T>& param);

    Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward);

    const Tensor<T>& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.source ? n.source->value : n.value;
    }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    const std::vector<T>& grad(std::size_t id) const { return nodes_[id].grad; }

    // Gradient buffer of `id` sized and zero-filled on first use, or nullptr when
    // the node does not require a gradient.
    T* grad_sink(std::size_t id);

    void backward(Var<T> root);

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Surfacing NaN/Inf as EvaluationError at every recorded op.
    void set_check_finite(bool on) { check_finite_ = on; }

private:
    struct Node {
        Tensor<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
        const Parameter<T>* source = nullptr;
        Parameter<T>* grad_target = nullptr;
    };

    // A deque so references returned by value() survive later records.
    std::deque<Node> nodes_;
    bool check_finite_ = true;
};

// Scalar helpers shared by the tape ops and by test oracles.
template <typename T>
T softplus(T x);
template <typename T>
T sigmoid(T x);

// Linear algebra.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
template <typename T>
Var<T> transpose(Var<T> a);

// Elementwise. `b` may match `a` exactly, be a single scalar, or be a 1-D
// tensor matching a's last dimension.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T c);
template <typename T>
Var<T> add_scalar(Var<T> a, T c);
template <typename T>
Var<T> sigmoid(Var<T> a);
template <typename T>
Var<T> silu(Var<T> a);
template <typename T>
Var<T> exp(Var<T> a);
template <typename T>
Var<T> log(Var<T> a);
template <typename T>
Var<T> softplus(Var<T> a);

// Reductions.
template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);

// x / sqrt(mean(x^2) + eps) * gain over the last dimension.
template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> gain, T eps);

// Softmax over the last dimension; mask[i] == false forces probability 0.
// A fully masked row yields all zeros.
template <typename T>
Var<T> masked_softmax(Var<T> x, const std::vector<bool>& mask);
template <typename T>
Var<T> softmax(Var<T> x);

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets);

// Per-row negative log-likelihood, no tape.
template <typename T>
std::vector<double> token_nll(const Tensor<T>& logits, std::span<const int> targets);

// Row lookup: out[i] = table[tokens[i]].
template <typename T>
Var<T> embedding(Var<T> table, std::span<const int> tokens);

template <typename T>
Var<T> reshape(Var<T> a, Shape shape);

// Rotary encoding of a [N x (heads*head_dim)] tensor; positions has N entries.
template <typename T>
Var<T> rope(Var<T> x, std::span<const int> positions, std::size_t head_dim, double base);

// Causal multi-head attention over packed sequences of length seq_len.
// q is [N x H*dh]; k and v are [N x Hkv*dh]; N = batch * seq_len.
template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::size_t kv_heads,
                        std::size_t seq_len);

// Attention probabilities [batch, head, i, j] recomputed without the tape.
template <typename T>
Tensor<T> causal_attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads,
                                   std::size_t kv_heads, std::size_t seq_len);

// out[i, :] = x[i, :] * w[i] for w with one entry per row of x.
template <typename T>
Var<T> scale_rows(Var<T> x, Var<T> w);

// Column j of a 2-D tensor as a 1-D tensor.
template <typename T>
Var<T> column(Var<T> x, std::size_t j);

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end);

// out[i, :] = x[index[i], :].
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> index);

}  // namespace dualpath
