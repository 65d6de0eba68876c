#include "dualpath/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <cblas.h>

namespace dualpath {

// ---------------------------------------------------------------- tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::input(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& param) {
    Node n;
    n.source = &param;
    n.grad_target = &param;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(const Parameter<T>& param) {
    Node n;
    n.source = &param;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn backward) {
    if (check_finite_) value.require_finite(op);
    Node n;
    n.value = std::move(value);
    for (const Var<T>& in : inputs) {
        if (&in.tape() != this) throw DimensionError(std::string(op) + ": operands on different tapes");
        n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
T* Tape<T>::grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
    return n.grad.data();
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
    if (&root.tape() != this) throw DimensionError("backward: root on a different tape");
    if (root.size() != 1) throw DimensionError("backward: root must be a scalar, got " + shape_string(root.shape()));
    for (Node& n : nodes_) n.grad.clear();
    if (!nodes_[root.id()].requires_grad) return;
    grad_sink(root.id())[0] = T(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.backward) continue;
        n.backward(*this, i);
    }
    for (Node& n : nodes_) {
        if (!n.grad_target || n.grad.empty()) continue;
        auto& g = n.grad_target->grad.storage();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
}

// ---------------------------------------------------------------- scalars

template <typename T>
T softplus(T x) {
    if (x > T(0)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

namespace {

void require_2d(const Shape& s, std::string_view op) {
    if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(s));
}

enum class Broadcast { Same, Scalar, Trailing };

Broadcast broadcast_kind(const Shape& a, const Shape& b, std::string_view op) {
    if (a == b) return Broadcast::Same;
    if (shape_size(b) == 1) return Broadcast::Scalar;
    if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Broadcast::Trailing;
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b) + " onto " + shape_string(a));
}

namespace {
// The whole forward/backward pass is single-threaded.
const bool blas_single_thread = (openblas_set_num_threads(1), true);
}  // namespace

// C[m x n] = beta*C + op(A) * op(B), row-major with explicit leading
// dimensions. Single-threaded BLAS keeps the accumulation order fixed from run
// to run.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
          const float* b, std::size_t ldb, float* c, std::size_t ldc, float beta = 1.0f) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k),
                1.0f, a, int(lda), b, int(ldb), beta, c, int(ldc));
}
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc, double beta = 1.0) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k),
                1.0, a, int(lda), b, int(ldb), beta, c, int(ldc));
}

// Dense row-major operands: C[m x n] += op(A) * op(B).
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    gemm(ta, tb, m, n, k, a, ta ? m : k, b, tb ? k : n, c, n);
}

template <typename T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
    return out;
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(std::string_view op, Var<T> a, Fwd fwd, Deriv deriv) {
    const Tensor<T>& av = a.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    std::size_t ia = a.id();
    return a.tape().record(op, std::move(out), {a}, [ia, deriv](Tape<T>& t, std::size_t self) {
        T* ga = t.grad_sink(ia);
        if (!ga) return;
        const auto& g = t.grad(self);
        const Tensor<T>& x = t.value(ia);
        const Tensor<T>& y = t.value(self);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
    });
}

}  // namespace

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    require_2d(av.shape(), "matmul");
    require_2d(bv.shape(), "matmul");
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (bv.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree " + shape_string(av.shape()) + " * " +
                             shape_string(bv.shape()));
    }
    Tensor<T> out(Shape{m, n});
    gemm(false, false, m, n, k, av.data().data(), bv.data().data(), out.data().data());
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self).data();
        // dA = dY * B^T, dB = A^T * dY
        if (T* ga = t.grad_sink(ia)) gemm(false, true, m, k, n, g, t.value(ib).data().data(), ga);
        if (T* gb = t.grad_sink(ib)) gemm(true, false, k, n, m, t.value(ia).data().data(), g, gb);
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    const Tensor<T>& av = a.value();
    require_2d(av.shape(), "transpose");
    const std::size_t r = av.dim(0), c = av.dim(1);
    Tensor<T> out(Shape{c, r}, transposed(av.data().data(), r, c));
    std::size_t ia = a.id();
    return a.tape().record("transpose", std::move(out), {a}, [ia, r, c](Tape<T>& t, std::size_t self) {
        T* ga = t.grad_sink(ia);
        if (!ga) return;
        const auto& g = t.grad(self);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
}

// ---------------------------------------------------------------- elementwise

namespace {

template <typename T>
Var<T> binary_add(std::string_view op, Var<T> a, Var<T> b, T sign) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    const Broadcast kind = broadcast_kind(av.shape(), bv.shape(), op);
    Tensor<T> out(av.shape());
    const std::size_t n = av.size();
    const std::size_t cols = bv.size();
    switch (kind) {
        case Broadcast::Same:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + sign * bv[i];
            break;
        case Broadcast::Scalar:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + sign * bv[0];
            break;
        case Broadcast::Trailing:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + sign * bv[i % cols];
            break;
    }
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(op, std::move(out), {a, b}, [ia, ib, kind, sign, cols](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (T* ga = t.grad_sink(ia)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (T* gb = t.grad_sink(ib)) {
            switch (kind) {
                case Broadcast::Same:
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
                    break;
                case Broadcast::Scalar: {
                    T acc = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i];
                    gb[0] += sign * acc;
                    break;
                }
                case Broadcast::Trailing:
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += sign * g[i];
                    break;
            }
        }
    });
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    return binary_add("add", a, b, T(1));
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return binary_add("sub", a, b, T(-1));
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    const Broadcast kind = broadcast_kind(av.shape(), bv.shape(), "mul");
    Tensor<T> out(av.shape());
    const std::size_t n = av.size();
    const std::size_t cols = bv.size();
    auto bidx = [kind, cols](std::size_t i) -> std::size_t {
        switch (kind) {
            case Broadcast::Same: return i;
            case Broadcast::Scalar: return 0;
            case Broadcast::Trailing: return i % cols;
        }
        return i;
    };
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[bidx(i)];
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("mul", std::move(out), {a, b}, [ia, ib, bidx](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor<T>& x = t.value(ia);
        const Tensor<T>& y = t.value(ib);
        if (T* ga = t.grad_sink(ia)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[bidx(i)];
        }
        if (T* gb = t.grad_sink(ib)) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[bidx(i)] += g[i] * x[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    return unary<T>("scale", a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    return unary<T>("add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    return unary<T>("sigmoid", a, [](T x) { return sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(Var<T> a) {
    return unary<T>(
        "silu", a, [](T x) { return x * sigmoid(x); },
        [](T x, T) {
            T s = sigmoid(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <typename T>
Var<T> exp(Var<T> a) {
    return unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
    for (T x : a.value().data()) {
        if (!(x > T(0))) throw DomainError("log of non-positive value " + std::to_string(x));
    }
    return unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> softplus(Var<T> a) {
    return unary<T>("softplus", a, [](T x) { return softplus(x); }, [](T x, T) { return sigmoid(x); });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> a) {
    T acc = 0;
    for (T x : a.value().data()) acc += x;
    std::size_t ia = a.id();
    return a.tape().record("sum", Tensor<T>::scalar(acc), {a}, [ia](Tape<T>& t, std::size_t self) {
        T* ga = t.grad_sink(ia);
        if (!ga) return;
        const T g = t.grad(self)[0];
        const std::size_t n = t.value(ia).size();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------- normalization

template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> gain, T eps) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& gv = gain.value();
    const std::size_t d = xv.cols();
    const std::size_t rows = xv.rows();
    if (gv.rank() != 1 || gv.size() != d) {
        throw DimensionError("rmsnorm: gain " + shape_string(gv.shape()) + " does not match last dim of " +
                             shape_string(xv.shape()));
    }
    if (!(eps >= T(0))) throw DomainError("rmsnorm: eps must be nonnegative");
    Tensor<T> out(xv.shape());
    std::vector<T> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data().data() + r * d;
        T ss = 0;
        for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
        const T ri = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
        inv[r] = ri;
        T* o = out.data().data() + r * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = xr[j] * ri * gv[j];
    }
    std::size_t ix = x.id(), ig = gain.id();
    return x.tape().record(
        "rmsnorm", std::move(out), {x, gain},
        [ix, ig, d, rows, inv = std::move(inv)](Tape<T>& t, std::size_t self) {
            const T* g = t.grad(self).data();
            const T* xv = t.value(ix).data().data();
            const T* gv = t.value(ig).data().data();
            if (T* gx = t.grad_sink(ix)) {
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* xr = xv + r * d;
                    const T* gr = g + r * d;
                    T dot = 0;
                    for (std::size_t j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j];
                    const T ri = inv[r];
                    const T coef = ri * ri * ri * dot / static_cast<T>(d);
                    T* o = gx + r * d;
                    for (std::size_t j = 0; j < d; ++j) o[j] += ri * gr[j] * gv[j] - coef * xr[j];
                }
            }
            if (T* gg = t.grad_sink(ig)) {
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* xr = xv + r * d;
                    const T* gr = g + r * d;
                    for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xr[j] * inv[r];
                }
            }
        });
}

// ---------------------------------------------------------------- softmax / losses

namespace {

template <typename T>
void softmax_backward_rows(const T* y, const T* g, T* gx, std::size_t rows, std::size_t d) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y + r * d;
        const T* gr = g + r * d;
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += yr[j] * gr[j];
        T* o = gx + r * d;
        for (std::size_t j = 0; j < d; ++j) o[j] += yr[j] * (gr[j] - dot);
    }
}

}  // namespace

template <typename T>
Var<T> masked_softmax(Var<T> x, const std::vector<bool>& mask) {
    const Tensor<T>& xv = x.value();
    if (mask.size() != xv.size()) throw DimensionError("masked_softmax: mask size mismatch");
    const std::size_t d = xv.cols(), rows = xv.rows();
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data().data() + r * d;
        T* o = out.data().data() + r * d;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < d; ++j)
            if (mask[r * d + j]) mx = std::max(mx, xr[j]);
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T total = 0;
        for (std::size_t j = 0; j < d; ++j) {
            o[j] = mask[r * d + j] ? std::exp(xr[j] - mx) : T(0);
            total += o[j];
        }
        for (std::size_t j = 0; j < d; ++j) o[j] /= total;
    }
    std::size_t ix = x.id();
    return x.tape().record("masked_softmax", std::move(out), {x}, [ix, d, rows](Tape<T>& t, std::size_t self) {
        T* gx = t.grad_sink(ix);
        if (!gx) return;
        softmax_backward_rows(t.value(self).data().data(), t.grad(self).data(), gx, rows, d);
    });
}

template <typename T>
Var<T> softmax(Var<T> x) {
    return masked_softmax(x, std::vector<bool>(x.size(), true));
}

template <typename T>
std::vector<double> token_nll(const Tensor<T>& logits, std::span<const int> targets) {
    const std::size_t v = logits.cols(), rows = logits.rows();
    if (targets.size() != rows) throw DimensionError("cross_entropy: one target per logits row required");
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const int tgt = targets[r];
        if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) {
            throw InputError("cross_entropy: target " + std::to_string(tgt) + " outside vocabulary");
        }
        const T* lr = logits.data().data() + r * v;
        T mx = *std::max_element(lr, lr + v);
        T total = 0;
        for (std::size_t j = 0; j < v; ++j) total += std::exp(lr[j] - mx);
        out[r] = static_cast<double>(std::log(total) + mx - lr[tgt]);
    }
    return out;
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
    const Tensor<T>& lv = logits.value();
    const std::size_t v = lv.cols(), rows = lv.rows();
    const std::vector<double> nll = token_nll(lv, targets);
    T acc = 0;
    for (double x : nll) acc += static_cast<T>(x);
    std::vector<int> tg(targets.begin(), targets.end());
    std::size_t il = logits.id();
    return logits.tape().record(
        "cross_entropy", Tensor<T>::scalar(acc / static_cast<T>(rows)), {logits},
        [il, v, rows, tg = std::move(tg)](Tape<T>& t, std::size_t self) {
            T* gl = t.grad_sink(il);
            if (!gl) return;
            const T g = t.grad(self)[0] / static_cast<T>(rows);
            const T* lv = t.value(il).data().data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* lr = lv + r * v;
                T mx = *std::max_element(lr, lr + v);
                T total = 0;
                for (std::size_t j = 0; j < v; ++j) total += std::exp(lr[j] - mx);
                T* o = gl + r * v;
                for (std::size_t j = 0; j < v; ++j) o[j] += g * std::exp(lr[j] - mx) / total;
                o[tg[r]] -= g;
            }
        });
}

// ---------------------------------------------------------------- indexing / layout

template <typename T>
Var<T> embedding(Var<T> table, std::span<const int> tokens) {
    const Tensor<T>& tv = table.value();
    require_2d(tv.shape(), "embedding");
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    std::vector<int> ids(tokens.begin(), tokens.end());
    Tensor<T> out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw InputError("token " + std::to_string(ids[i]) + " outside vocabulary of size " +
                             std::to_string(vocab));
        }
        std::copy_n(tv.data().data() + ids[i] * d, d, out.data().data() + i * d);
    }
    std::size_t it = table.id();
    return table.tape().record("embedding", std::move(out), {table},
                               [it, d, ids = std::move(ids)](Tape<T>& t, std::size_t self) {
                                   T* gt = t.grad_sink(it);
                                   if (!gt) return;
                                   const T* g = t.grad(self).data();
                                   for (std::size_t i = 0; i < ids.size(); ++i) {
                                       T* row = gt + ids[i] * d;
                                       for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                                   }
                               });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
    }
    std::size_t ia = a.id();
    return a.tape().record("reshape", a.value().reshaped(std::move(shape)), {a},
                           [ia](Tape<T>& t, std::size_t self) {
                               T* ga = t.grad_sink(ia);
                               if (!ga) return;
                               const auto& g = t.grad(self);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           });
}

namespace {

// o += R(dir) * in, pairwise over (2i, 2i+1) within each head.
template <typename T>
void rope_rotate(const T* in, T* o, const std::vector<T>& cs, const std::vector<T>& sn, std::size_t rows,
                 std::size_t width, std::size_t head_dim, T dir) {
    const std::size_t half = head_dim / 2;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c0 = 0; c0 < width; c0 += head_dim) {
            for (std::size_t i = 0; i < half; ++i) {
                const std::size_t a = r * width + c0 + 2 * i;
                const T c = cs[r * half + i], s = dir * sn[r * half + i];
                const T x0 = in[a], x1 = in[a + 1];
                o[a] += x0 * c - x1 * s;
                o[a + 1] += x0 * s + x1 * c;
            }
        }
    }
}

}  // namespace

template <typename T>
Var<T> rope(Var<T> x, std::span<const int> positions, std::size_t head_dim, double base) {
    const Tensor<T>& xv = x.value();
    if (head_dim == 0 || head_dim % 2 != 0) throw ConfigError("rope: head dimension must be even");
    const std::size_t width = xv.cols(), rows = xv.rows();
    if (width % head_dim != 0) throw DimensionError("rope: width not divisible by head dimension");
    if (positions.size() != rows) throw DimensionError("rope: one position per row required");
    const std::size_t half = head_dim / 2;
    // cos/sin table [row, pair]
    std::vector<T> cs(rows * half), sn(rows * half);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(positions[r]) * freq;
            cs[r * half + i] = static_cast<T>(std::cos(angle));
            sn[r * half + i] = static_cast<T>(std::sin(angle));
        }
    }
    Tensor<T> out(xv.shape());
    rope_rotate(xv.data().data(), out.data().data(), cs, sn, rows, width, head_dim, T(1));
    std::size_t ix = x.id();
    return x.tape().record("rope", std::move(out), {x},
                           [ix, rows, width, head_dim, cs = std::move(cs), sn = std::move(sn)](Tape<T>& t,
                                                                                              std::size_t self) {
                               T* gx = t.grad_sink(ix);
                               if (!gx) return;
                               // The transpose of a rotation is the inverse rotation.
                               rope_rotate(t.grad(self).data(), gx, cs, sn, rows, width, head_dim, T(-1));
                           });
}

namespace {

struct AttentionDims {
    std::size_t batch, seq_len, heads, kv_heads, head_dim, q_width, kv_width;
};

template <typename T>
AttentionDims attention_dims(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads, std::size_t kv_heads,
                             std::size_t seq_len) {
    require_2d(q.shape(), "causal_attention");
    require_2d(k.shape(), "causal_attention");
    if (heads == 0 || kv_heads == 0 || heads % kv_heads != 0) {
        throw ConfigError("causal_attention: query heads must be a multiple of key/value heads");
    }
    if (q.dim(1) % heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
    const std::size_t n = q.dim(0);
    if (seq_len == 0 || n % seq_len != 0) throw DimensionError("causal_attention: rows not a multiple of seq_len");
    const std::size_t dh = q.dim(1) / heads;
    if (k.dim(0) != n || k.dim(1) != kv_heads * dh) throw DimensionError("causal_attention: key shape mismatch");
    return {n / seq_len, seq_len, heads, kv_heads, dh, q.dim(1), k.dim(1)};
}

// Fills probs[b][h][i][j]; entries above the diagonal are 0.
template <typename T>
void attention_probs(const T* q, const T* k, const AttentionDims& a, T* probs) {
    const T scale = T(1) / std::sqrt(static_cast<T>(a.head_dim));
    const std::size_t rep = a.heads / a.kv_heads;
    const std::size_t tt = a.seq_len;
    for (std::size_t b = 0; b < a.batch; ++b) {
        for (std::size_t h = 0; h < a.heads; ++h) {
            T* pbh = probs + (b * a.heads + h) * tt * tt;
            // S = Q_h K_h^T over the whole square; the masked half is discarded.
            gemm(false, true, tt, tt, a.head_dim, q + b * tt * a.q_width + h * a.head_dim, a.q_width,
                 k + b * tt * a.kv_width + (h / rep) * a.head_dim, a.kv_width, pbh, tt, T(0));
            for (std::size_t i = 0; i < tt; ++i) {
                T* row = pbh + i * tt;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    row[j] *= scale;
                    mx = std::max(mx, row[j]);
                }
                T total = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    total += row[j];
                }
                for (std::size_t j = 0; j <= i; ++j) row[j] /= total;
                for (std::size_t j = i + 1; j < tt; ++j) row[j] = T(0);
            }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> causal_attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads, std::size_t kv_heads,
                                   std::size_t seq_len) {
    const AttentionDims a = attention_dims(q, k, heads, kv_heads, seq_len);
    Tensor<T> probs(Shape{a.batch, a.heads, a.seq_len, a.seq_len});
    attention_probs(q.data().data(), k.data().data(), a, probs.data().data());
    return probs;
}

template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::size_t kv_heads,
                        std::size_t seq_len) {
    const Tensor<T>& qv = q.value();
    const Tensor<T>& kv = k.value();
    const Tensor<T>& vv = v.value();
    const AttentionDims a = attention_dims(qv, kv, heads, kv_heads, seq_len);
    if (vv.shape() != kv.shape()) throw DimensionError("causal_attention: value shape mismatch");
    const std::size_t tt = a.seq_len, rep = a.heads / a.kv_heads, dh = a.head_dim;
    std::vector<T> probs(a.batch * a.heads * tt * tt);
    attention_probs(qv.data().data(), kv.data().data(), a, probs.data());

    Tensor<T> out(qv.shape());
    for (std::size_t b = 0; b < a.batch; ++b) {
        for (std::size_t h = 0; h < a.heads; ++h) {
            // O_h = P V_h
            gemm(false, false, tt, dh, tt, probs.data() + (b * a.heads + h) * tt * tt, tt,
                 vv.data().data() + b * tt * a.kv_width + (h / rep) * dh, a.kv_width,
                 out.data().data() + b * tt * a.q_width + h * dh, a.q_width);
        }
    }

    std::size_t iq = q.id(), ik = k.id(), iv = v.id();
    return q.tape().record(
        "causal_attention", std::move(out), {q, k, v},
        [iq, ik, iv, a, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
            const std::size_t tt = a.seq_len, rep = a.heads / a.kv_heads, dh = a.head_dim;
            const T scale = T(1) / std::sqrt(static_cast<T>(dh));
            const T* g = t.grad(self).data();
            const T* qv = t.value(iq).data().data();
            const T* kv = t.value(ik).data().data();
            const T* vv = t.value(iv).data().data();
            T* gq = t.grad_sink(iq);
            T* gk = t.grad_sink(ik);
            T* gv = t.grad_sink(iv);
            std::vector<T> ds(tt * tt);
            for (std::size_t b = 0; b < a.batch; ++b) {
                for (std::size_t h = 0; h < a.heads; ++h) {
                    const std::size_t qo = b * tt * a.q_width + h * dh;
                    const std::size_t ko = b * tt * a.kv_width + (h / rep) * dh;
                    const T* p = probs.data() + (b * a.heads + h) * tt * tt;
                    // dV_h += P^T dO_h
                    if (gv) gemm(true, false, tt, dh, tt, p, tt, g + qo, a.q_width, gv + ko, a.kv_width);
                    if (!gq && !gk) continue;
                    // dP = dO_h V_h^T; dS = P * (dP - rowsum(P * dP)) / sqrt(dh)
                    gemm(false, true, tt, tt, dh, g + qo, a.q_width, vv + ko, a.kv_width, ds.data(), tt, T(0));
                    for (std::size_t i = 0; i < tt; ++i) {
                        T* row = ds.data() + i * tt;
                        const T* prow = p + i * tt;
                        T dot = 0;
                        for (std::size_t j = 0; j <= i; ++j) dot += prow[j] * row[j];
                        for (std::size_t j = 0; j <= i; ++j) row[j] = prow[j] * (row[j] - dot) * scale;
                        for (std::size_t j = i + 1; j < tt; ++j) row[j] = T(0);
                    }
                    // dQ_h += dS K_h; dK_h += dS^T Q_h
                    if (gq) gemm(false, false, tt, dh, tt, ds.data(), tt, kv + ko, a.kv_width, gq + qo, a.q_width);
                    if (gk) gemm(true, false, tt, dh, tt, ds.data(), tt, qv + qo, a.q_width, gk + ko, a.kv_width);
                }
            }
        });
}

template <typename T>
Var<T> scale_rows(Var<T> x, Var<T> w) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    const std::size_t rows = xv.rows(), d = xv.cols();
    if (wv.size() != rows) {
        throw DimensionError("scale_rows: " + shape_string(wv.shape()) + " does not give one weight per row of " +
                             shape_string(xv.shape()));
    }
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * wv[r];
    std::size_t ix = x.id(), iw = w.id();
    return x.tape().record("scale_rows", std::move(out), {x, w}, [ix, iw, rows, d](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self).data();
        const T* xv = t.value(ix).data().data();
        const T* wv = t.value(iw).data().data();
        if (T* gx = t.grad_sink(ix)) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * wv[r];
        }
        if (T* gw = t.grad_sink(iw)) {
            for (std::size_t r = 0; r < rows; ++r) {
                T acc = 0;
                for (std::size_t j = 0; j < d; ++j) acc += g[r * d + j] * xv[r * d + j];
                gw[r] += acc;
            }
        }
    });
}

template <typename T>
Var<T> column(Var<T> x, std::size_t j) {
    const Tensor<T>& xv = x.value();
    require_2d(xv.shape(), "column");
    const std::size_t rows = xv.dim(0), cols = xv.dim(1);
    if (j >= cols) throw DimensionError("column: index out of range");
    Tensor<T> out(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) out[r] = xv[r * cols + j];
    std::size_t ix = x.id();
    return x.tape().record("column", std::move(out), {x}, [ix, j, rows, cols](Tape<T>& t, std::size_t self) {
        T* gx = t.grad_sink(ix);
        if (!gx) return;
        const auto& g = t.grad(self);
        for (std::size_t r = 0; r < rows; ++r) gx[r * cols + j] += g[r];
    });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
    const Tensor<T>& xv = x.value();
    const std::size_t rows = xv.shape().at(0);
    if (begin >= end || end > rows) throw DimensionError("slice_rows: bad range");
    Shape shape = xv.shape();
    shape[0] = end - begin;
    const std::size_t stride = xv.size() / rows;
    std::vector<T> data(xv.data().begin() + begin * stride, xv.data().begin() + end * stride);
    std::size_t ix = x.id();
    return x.tape().record("slice_rows", Tensor<T>(std::move(shape), std::move(data)), {x},
                           [ix, begin, stride](Tape<T>& t, std::size_t self) {
                               T* gx = t.grad_sink(ix);
                               if (!gx) return;
                               const auto& g = t.grad(self);
                               for (std::size_t i = 0; i < g.size(); ++i) gx[begin * stride + i] += g[i];
                           });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> index) {
    const Tensor<T>& xv = x.value();
    const std::size_t rows = xv.shape().at(0);
    const std::size_t stride = xv.size() / rows;
    Shape shape = xv.shape();
    shape[0] = index.size();
    Tensor<T> out(std::move(shape));
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= rows) throw DimensionError("gather_rows: index out of range");
        std::copy_n(xv.data().data() + index[i] * stride, stride, out.data().data() + i * stride);
    }
    std::size_t ix = x.id();
    return x.tape().record("gather_rows", std::move(out), {x},
                           [ix, stride, index = std::move(index)](Tape<T>& t, std::size_t self) {
                               T* gx = t.grad_sink(ix);
                               if (!gx) return;
                               const T* g = t.grad(self).data();
                               for (std::size_t i = 0; i < index.size(); ++i)
                                   for (std::size_t j = 0; j < stride; ++j) gx[index[i] * stride + j] += g[i * stride + j];
                           });
}

// ---------------------------------------------------------------- instantiation

#define DUALPATH_INSTANTIATE(T)                                                                              \
    template class Tape<T>;                                                                                  \
    template T softplus<T>(T);                                                                               \
    template T sigmoid<T>(T);                                                                                \
    template Var<T> matmul<T>(Var<T>, Var<T>);                                                               \
    template Var<T> transpose<T>(Var<T>);                                                                    \
    template Var<T> add<T>(Var<T>, Var<T>);                                                                  \
    template Var<T> sub<T>(Var<T>, Var<T>);                                                                  \
    template Var<T> mul<T>(Var<T>, Var<T>);                                                                  \
    template Var<T> scale<T>(Var<T>, T);                                                                     \
    template Var<T> add_scalar<T>(Var<T>, T);                                                                \
    template Var<T> sigmoid<T>(Var<T>);                                                                      \
    template Var<T> silu<T>(Var<T>);                                                                         \
    template Var<T> exp<T>(Var<T>);                                                                          \
    template Var<T> log<T>(Var<T>);                                                                          \
    template Var<T> softplus<T>(Var<T>);                                                                     \
    template Var<T> sum<T>(Var<T>);                                                                          \
    template Var<T> mean<T>(Var<T>);                                                                         \
    template Var<T> rmsnorm<T>(Var<T>, Var<T>, T);                                                           \
    template Var<T> masked_softmax<T>(Var<T>, const std::vector<bool>&);                                     \
    template Var<T> softmax<T>(Var<T>);                                                                      \
    template Var<T> cross_entropy<T>(Var<T>, std::span<const int>);                                          \
    template std::vector<double> token_nll<T>(const Tensor<T>&, std::span<const int>);                       \
    template Var<T> embedding<T>(Var<T>, std::span<const int>);                                              \
    template Var<T> reshape<T>(Var<T>, Shape);                                                               \
    template Var<T> rope<T>(Var<T>, std::span<const int>, std::size_t, double);                              \
    template Var<T> causal_attention<T>(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t, std::size_t);      \
    template Tensor<T> causal_attention_weights<T>(const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                                   std::size_t, std::size_t);                                \
    template Var<T> scale_rows<T>(Var<T>, Var<T>);                                                           \
    template Var<T> column<T>(Var<T>, std::size_t);                                                          \
    template Var<T> slice_rows<T>(Var<T>, std::size_t, std::size_t);                                         \
    template Var<T> gather_rows<T>(Var<T>, std::vector<std::size_t>);

DUALPATH_INSTANTIATE(float)
DUALPATH_INSTANTIATE(double)

#undef DUALPATH_INSTANTIATE

}  // namespace dualpath
