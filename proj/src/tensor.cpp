#include "picoclip/tensor.hpp"

#include "simd_math.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <sstream>

namespace picoclip {

std::string format_shape(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

namespace {

// Fast exp for the float path (vectorized in simd_math.hpp); the double path
// keeps std::exp so f64 gradient oracles stay tight.
inline float fexp(float x) { return simd::fexp_scalar(x); }
inline double fexp(double x) { return std::exp(x); }

inline float ftanh(float x) { return simd::tanh_scalar(x); }
inline double ftanh(double x) { return std::tanh(x); }

// tanh-form gelu, same definition at both precisions
template <typename T>
inline T gelu_fwd(T x) {
    const T u = T(0.7978845608028654) * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + ftanh(u));
}
template <typename T>
inline T gelu_grad(T x) {
    const T u = T(0.7978845608028654) * (x + T(0.044715) * x * x * x);
    const T t = ftanh(u);
    const T du = T(0.7978845608028654) * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("zero dimension in shape " + format_shape(shape));
        n *= d;
    }
    return n;
}

template <typename T>
void require_2d(const Tensor<T>& a, const char* op) {
    if (a.ndim() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + format_shape(a.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ, " + format_shape(a.shape()) + " vs " +
                         format_shape(b.shape()));
}

// C[m x n] += or = A[m x k] * B[k x n]
template <typename T>
void matmul_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        const T* ai = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            T av = ai[kk];
            const T* bk = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// C[m x p] += A[m x n] * B[p x n]^T  (rows of B dotted against rows of A)
template <typename T>
void matmul_nt_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * n;
        T* ci = c + i * p;
        for (std::size_t j = 0; j < p; ++j) {
            const T* bj = b + j * n;
            T acc = 0;
            for (std::size_t kk = 0; kk < n; ++kk) acc += ai[kk] * bj[kk];
            ci[j] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void matmul_tn_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        const T* bi = b + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            T av = ai[kk];
            T* ck = c + kk * n;
            for (std::size_t j = 0; j < n; ++j) ck[j] += av * bi[j];
        }
    }
}

template <typename T>
void transpose_into(const T* src, std::size_t r, std::size_t c, T* dst) {
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
}

// The per-head matrices have one thin dimension (head width ~8), which
// starves the vector units when it lands on the inner loop. These dispatchers
// transpose one operand into scratch so the innermost loop always runs over
// the wide dimension.
constexpr std::size_t kThin = 16;

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, std::vector<T>& scratch) {
    if (n < kThin && k >= kThin) {
        scratch.resize(k * n);
        transpose_into(b, k, n, scratch.data());  // Bt[n x k]
        matmul_nt_kernel(a, scratch.data(), c, m, k, n);
        return;
    }
    matmul_kernel(a, b, c, m, k, n);
}

// C[m x p] += A[m x n] * B[p x n]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t p, std::vector<T>& scratch) {
    if (n < kThin && p >= kThin) {
        scratch.resize(n * p);
        transpose_into(b, p, n, scratch.data());  // Bt[n x p]
        matmul_kernel(a, scratch.data(), c, m, n, p);
        return;
    }
    matmul_nt_kernel(a, b, c, m, n, p);
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, std::vector<T>& scratch) {
    if (n < kThin && k >= kThin) {
        scratch.assign(n * k, T(0));
        matmul_tn_kernel(b, a, scratch.data(), m, n, k);  // Ct[n x k] = B^T A
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += scratch[j * k + i];
        return;
    }
    matmul_tn_kernel(a, b, c, m, k, n);
}

template <typename T>
bool want_record(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::current()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
void mark_output(Tensor<T>& out) {
    out.set_requires_grad(true);
}

// Grad of `node`, allocating on first touch. Backward closures call this only
// for inputs that require grad.
template <typename T>
std::vector<T>& acc_grad(const std::shared_ptr<TensorNode<T>>& node) {
    if (node->grad.empty()) node->grad.assign(node->value.size(), T(0));
    return node->grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<std::size_t> shape, T v, bool requires_grad) {
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    std::size_t n = shape_numel(shape);
    t.n_->shape = std::move(shape);
    t.n_->value.assign(n, v);
    t.n_->requires_grad = requires_grad;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_values(std::vector<std::size_t> shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("from_values: " + format_shape(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(values);
    t.n_->requires_grad = requires_grad;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v, bool requires_grad) {
    return from_values({1}, {v}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.n_->value[i * n + i] = T(1);
    return t;
}

template <typename T>
std::size_t Tensor<T>::rows() const {
    require_2d(*this, "rows");
    return n_->shape[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
    require_2d(*this, "cols");
    return n_->shape[1];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements, expected 1");
    return n_->value[0];
}

template <typename T>
T Tensor<T>::operator()(std::size_t r, std::size_t c) const {
    require_2d(*this, "operator()");
    return n_->value[r * n_->shape[1] + c];
}

template <typename T>
bool Tensor<T>::all_finite() const {
    for (T v : n_->value)
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
    return from_values(n_->shape, n_->value, false);
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value encountered");
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
template <typename T>
Tape<T>*& current_tape_slot() {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}
}  // namespace

template <typename T>
Tape<T>::Tape() {
    prev_ = current_tape_slot<T>();
    current_tape_slot<T>() = this;
}

template <typename T>
Tape<T>::~Tape() {
    current_tape_slot<T>() = prev_;
}

template <typename T>
Tape<T>* Tape<T>::current() {
    return current_tape_slot<T>();
}

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
    if (!loss.defined() || loss.numel() != 1) throw ValueError("backward: loss must be a scalar tensor");
    if (tape.consumed_) throw ValueError("backward: tape already consumed; build a fresh tape");
    tape.consumed_ = true;
    auto node = loss.node();
    acc_grad(node)[0] += T(1);
    for (auto it = tape.ops_.rbegin(); it != tape.ops_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw ShapeError("matmul: inner dims differ, " + format_shape(a.shape()) + " vs " + format_shape(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    matmul_kernel(a.raw().data(), b.raw().data(), out.raw().data(), m, k, n);
    if (want_record<T>({&a, &b})) {
        mark_output(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([an, bn, on, m, k, n] {
            if (on->grad.empty()) return;
            if (an->requires_grad) matmul_nt_kernel(on->grad.data(), bn->value.data(), acc_grad(an).data(), m, n, k);
            if (bn->requires_grad) matmul_tn_kernel(an->value.data(), on->grad.data(), acc_grad(bn).data(), m, k, n);
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_2d(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({n, m});
    const auto& av = a.raw();
    auto& ov = out.raw();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, m, n] {
            if (on->grad.empty()) return;
            auto& ag = acc_grad(an);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ag[i * n + j] += on->grad[j * m + i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, std::size_t batch) {
    require_2d(a, "batched_matmul");
    require_2d(b, "batched_matmul");
    if (batch == 0 || a.shape()[0] % batch != 0 || b.shape()[0] % batch != 0)
        throw ShapeError("batched_matmul: rows not divisible by batch " + std::to_string(batch));
    const std::size_t m = a.shape()[0] / batch, k = a.shape()[1], kb = b.shape()[0] / batch, n = b.shape()[1];
    if (kb != k)
        throw ShapeError("batched_matmul: inner dims differ, " + format_shape(a.shape()) + " vs " +
                         format_shape(b.shape()) + " at batch " + std::to_string(batch));
    Tensor<T> out = Tensor<T>::zeros({batch * m, n});
    std::vector<T> scratch;
    for (std::size_t s = 0; s < batch; ++s)
        gemm_nn(a.raw().data() + s * m * k, b.raw().data() + s * k * n, out.raw().data() + s * m * n, m, k, n,
                scratch);
    if (want_record<T>({&a, &b})) {
        mark_output(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([an, bn, on, batch, m, k, n] {
            if (on->grad.empty()) return;
            std::vector<T> scratch;
            for (std::size_t s = 0; s < batch; ++s) {
                const T* go = on->grad.data() + s * m * n;
                if (an->requires_grad)
                    gemm_nt(go, bn->value.data() + s * k * n, acc_grad(an).data() + s * m * k, m, n, k, scratch);
                if (bn->requires_grad)
                    gemm_tn(an->value.data() + s * m * k, go, acc_grad(bn).data() + s * k * n, m, k, n, scratch);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> batched_matmul_nt(const Tensor<T>& a, const Tensor<T>& b, std::size_t batch) {
    require_2d(a, "batched_matmul_nt");
    require_2d(b, "batched_matmul_nt");
    if (batch == 0 || a.shape()[0] % batch != 0 || b.shape()[0] % batch != 0)
        throw ShapeError("batched_matmul_nt: rows not divisible by batch " + std::to_string(batch));
    const std::size_t m = a.shape()[0] / batch, k = a.shape()[1], p = b.shape()[0] / batch;
    if (b.shape()[1] != k)
        throw ShapeError("batched_matmul_nt: inner dims differ, " + format_shape(a.shape()) + " vs " +
                         format_shape(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({batch * m, p});
    std::vector<T> scratch;
    for (std::size_t s = 0; s < batch; ++s)
        gemm_nt(a.raw().data() + s * m * k, b.raw().data() + s * p * k, out.raw().data() + s * m * p, m, k, p,
                scratch);
    if (want_record<T>({&a, &b})) {
        mark_output(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([an, bn, on, batch, m, k, p] {
            if (on->grad.empty()) return;
            std::vector<T> scratch;
            for (std::size_t s = 0; s < batch; ++s) {
                const T* go = on->grad.data() + s * m * p;      // dOut: m x p
                const T* av = an->value.data() + s * m * k;     // A: m x k
                const T* bv = bn->value.data() + s * p * k;     // B: p x k
                // dA += dOut * B ; dB += dOut^T * A
                if (an->requires_grad) gemm_nn(go, bv, acc_grad(an).data() + s * m * k, m, p, k, scratch);
                if (bn->requires_grad) gemm_tn(go, av, acc_grad(bn).data() + s * p * k, m, p, k, scratch);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax family (all row-wise, max-subtracted for stability)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    require_2d(a, "softmax_rows");
    check_finite(a, "softmax_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    const auto& av = a.raw();
    auto& ov = out.raw();
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = av.data() + i * n;
        T* y = ov.data() + i * n;
        if constexpr (std::is_same_v<T, float>) {
            const float mx = simd::max_of(x, n);
            const float inv = 1.0f / simd::exp_shift_sum(x, y, n, -mx);
            for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
        } else {
            T mx = x[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
            T sum = 0;
            for (std::size_t j = 0; j < n; ++j) {
                y[j] = fexp(x[j] - mx);
                sum += y[j];
            }
            T inv = T(1) / sum;
            for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
        }
    }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, m, n] {
            if (on->grad.empty()) return;
            auto& ag = acc_grad(an);
            for (std::size_t i = 0; i < m; ++i) {
                const T* y = on->value.data() + i * n;
                const T* gy = on->grad.data() + i * n;
                T dot;
                if constexpr (std::is_same_v<T, float>) {
                    dot = simd::dot(y, gy, n);
                } else {
                    dot = 0;
                    for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
                }
                T* gx = ag.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
    require_2d(a, "log_softmax_rows");
    check_finite(a, "log_softmax_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    const auto& av = a.raw();
    auto& ov = out.raw();
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = av.data() + i * n;
        T* y = ov.data() + i * n;
        T mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        T sum = 0;
        for (std::size_t j = 0; j < n; ++j) sum += fexp(x[j] - mx);
        T lse = mx + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
    }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, m, n] {
            if (on->grad.empty()) return;
            auto& ag = acc_grad(an);
            for (std::size_t i = 0; i < m; ++i) {
                const T* y = on->value.data() + i * n;
                const T* gy = on->grad.data() + i * n;
                T gsum = 0;
                for (std::size_t j = 0; j < n; ++j) gsum += gy[j];
                T* gx = ag.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += gy[j] - fexp(y[j]) * gsum;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& a) {
    require_2d(a, "logsumexp_rows");
    check_finite(a, "logsumexp_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({m});
    const auto& av = a.raw();
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = av.data() + i * n;
        T mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        T sum = 0;
        for (std::size_t j = 0; j < n; ++j) sum += fexp(x[j] - mx);
        out.raw()[i] = mx + std::log(sum);
    }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, m, n] {
            if (on->grad.empty()) return;
            auto& ag = acc_grad(an);
            for (std::size_t i = 0; i < m; ++i) {
                T g = on->grad[i];
                if (g == T(0)) continue;
                const T* x = an->value.data() + i * n;
                T lse = on->value[i];
                T* gx = ag.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += g * fexp(x[j] - lse);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> logsumexp_rows_offdiag(const Tensor<T>& a) {
    require_2d(a, "logsumexp_rows_offdiag");
    check_finite(a, "logsumexp_rows_offdiag");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (m != n) throw ShapeError("logsumexp_rows_offdiag: square matrix required, got " + format_shape(a.shape()));
    if (n < 2) throw ValueError("logsumexp_rows_offdiag: needs at least 2 columns (empty denominator)");
    Tensor<T> out = Tensor<T>::zeros({m});
    const auto& av = a.raw();
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = av.data() + i * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) mx = std::max(mx, x[j]);
        T sum = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) sum += fexp(x[j] - mx);
        out.raw()[i] = mx + std::log(sum);
    }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, m, n] {
            if (on->grad.empty()) return;
            auto& ag = acc_grad(an);
            for (std::size_t i = 0; i < m; ++i) {
                T g = on->grad[i];
                if (g == T(0)) continue;
                const T* x = an->value.data() + i * n;
                T lse = on->value[i];
                T* gx = ag.data() + i * n;
                for (std::size_t j = 0; j < n; ++j)
                    if (j != i) gx[j] += g * fexp(x[j] - lse);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    require_2d(a, "layer_norm");
    const std::size_t m = a.shape()[0], d = a.shape()[1];
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " elements, got " +
                         std::to_string(gain.numel()) + "/" + std::to_string(bias.numel()));
    if (eps <= T(0)) throw ValueError("layer_norm: eps must be positive");
    Tensor<T> out = Tensor<T>::zeros({m, d});
    std::vector<T> inv_sigma(m), norm(m * d);
    const auto& av = a.raw();
    const auto& gv = gain.raw();
    const auto& bv = bias.raw();
    auto& ov = out.raw();
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = av.data() + i * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += x[j];
        mean /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            T c = x[j] - mean;
            var += c * c;
        }
        var /= T(d);
        T inv = T(1) / std::sqrt(var + eps);
        inv_sigma[i] = inv;
        T* y = ov.data() + i * d;
        T* nn = norm.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            nn[j] = (x[j] - mean) * inv;
            y[j] = gv[j] * nn[j] + bv[j];
        }
    }
    if (want_record<T>({&a, &gain, &bias})) {
        mark_output(out);
        auto an = a.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        Tape<T>::current()->record([an, gn, bn, on, m, d, inv_sigma = std::move(inv_sigma), norm = std::move(norm)] {
            if (on->grad.empty()) return;
            for (std::size_t i = 0; i < m; ++i) {
                const T* gy = on->grad.data() + i * d;
                const T* nn = norm.data() + i * d;
                if (gn->requires_grad) {
                    auto& gg = acc_grad(gn);
                    for (std::size_t j = 0; j < d; ++j) gg[j] += gy[j] * nn[j];
                }
                if (bn->requires_grad) {
                    auto& gb = acc_grad(bn);
                    for (std::size_t j = 0; j < d; ++j) gb[j] += gy[j];
                }
                if (an->requires_grad) {
                    T s1 = 0, s2 = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        T t = gy[j] * gn->value[j];
                        s1 += t;
                        s2 += t * nn[j];
                    }
                    s1 /= T(d);
                    s2 /= T(d);
                    T* gx = acc_grad(an).data() + i * d;
                    for (std::size_t j = 0; j < d; ++j)
                        gx[j] += (gy[j] * gn->value[j] - s1 - nn[j] * s2) * inv_sigma[i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] + b.raw()[i];
    if (want_record<T>({&a, &b})) {
        mark_output(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([an, bn, on, n] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                auto& g = acc_grad(an);
                for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                auto& g = acc_grad(bn);
                for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] - b.raw()[i];
    if (want_record<T>({&a, &b})) {
        mark_output(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([an, bn, on, n] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                auto& g = acc_grad(an);
                for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                auto& g = acc_grad(bn);
                for (std::size_t i = 0; i < n; ++i) g[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] * b.raw()[i];
    if (want_record<T>({&a, &b})) {
        mark_output(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([an, bn, on, n] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                auto& g = acc_grad(an);
                for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                auto& g = acc_grad(bn);
                for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] * c;
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, n, c] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.numel() != 1) throw ShapeError("scale_by: scale must be 1-element, got " + format_shape(s.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    const T sv = s.raw()[0];
    for (std::size_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] * sv;
    if (want_record<T>({&a, &s})) {
        mark_output(out);
        auto an = a.node(), sn = s.node(), on = out.node();
        Tape<T>::current()->record([an, sn, on, n] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                auto& g = acc_grad(an);
                const T sv = sn->value[0];
                for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i] * sv;
            }
            if (sn->requires_grad) {
                T acc = 0;
                for (std::size_t i = 0; i < n; ++i) acc += on->grad[i] * an->value[i];
                acc_grad(sn)[0] += acc;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) {
        if (a.raw()[i] == T(0)) throw ValueError("reciprocal: division by zero");
        out.raw()[i] = T(1) / a.raw()[i];
    }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, n] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t i = 0; i < n; ++i) g[i] -= on->grad[i] * on->value[i] * on->value[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> exp_elem(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.raw()[i] = std::exp(a.raw()[i]);
    check_finite(out, "exp_elem");
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, n] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i] * on->value[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_elem(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) {
        if (a.raw()[i] <= T(0)) throw ValueError("log_elem: input must be positive");
        out.raw()[i] = std::log(a.raw()[i]);
    }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, n] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i] / an->value[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    // tanh-form gelu
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    if constexpr (std::is_same_v<T, float>) {
        simd::gelu_forward(a.raw().data(), out.raw().data(), n);
    } else {
        for (std::size_t i = 0; i < n; ++i) out.raw()[i] = gelu_fwd(a.raw()[i]);
    }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, n] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            if constexpr (std::is_same_v<T, float>) {
                simd::gelu_backward(an->value.data(), on->grad.data(), g.data(), n);
            } else {
                for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i] * gelu_grad(an->value[i]);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& a) {
    require_2d(a, "l2_normalize_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    std::vector<T> inv_norm(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = a.raw().data() + i * n;
        T ss = 0;
        for (std::size_t j = 0; j < n; ++j) ss += x[j] * x[j];
        if (ss == T(0)) throw ValueError("l2_normalize_rows: degenerate all-zero row " + std::to_string(i));
        T inv = T(1) / std::sqrt(ss);
        inv_norm[i] = inv;
        T* y = out.raw().data() + i * n;
        for (std::size_t j = 0; j < n; ++j) y[j] = x[j] * inv;
    }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, m, n, inv_norm = std::move(inv_norm)] {
            if (on->grad.empty()) return;
            auto& ag = acc_grad(an);
            for (std::size_t i = 0; i < m; ++i) {
                const T* y = on->value.data() + i * n;
                const T* gy = on->grad.data() + i * n;
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
                T* gx = ag.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += (gy[j] - y[j] * dot) * inv_norm[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_reduce(const Tensor<T>& a) {
    const std::size_t n = a.numel();
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += a.raw()[i];
    Tensor<T> out = Tensor<T>::scalar(acc / T(n));
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, n] {
            if (on->grad.empty()) return;
            T g = on->grad[0] / T(n);
            auto& ag = acc_grad(an);
            for (std::size_t i = 0; i < n; ++i) ag[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_reduce(const Tensor<T>& a) {
    const std::size_t n = a.numel();
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += a.raw()[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, n] {
            if (on->grad.empty()) return;
            T g = on->grad[0];
            auto& ag = acc_grad(an);
            for (std::size_t i = 0; i < n; ++i) ag[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ValueError("concat_rows: empty input");
    const std::size_t n = parts[0].cols();
    std::size_t m = 0;
    bool rec = false;
    for (const auto& p : parts) {
        if (p.cols() != n) throw ShapeError("concat_rows: column mismatch " + format_shape(p.shape()));
        m += p.rows();
        rec = rec || p.requires_grad();
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    std::size_t row = 0;
    for (const auto& p : parts) {
        std::copy(p.raw().begin(), p.raw().end(), out.raw().begin() + row * n);
        row += p.rows();
    }
    if (Tape<T>::current() && rec) {
        mark_output(out);
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        auto on = out.node();
        Tape<T>::current()->record([nodes, on, n] {
            if (on->grad.empty()) return;
            std::size_t row = 0;
            for (const auto& pn : nodes) {
                std::size_t r = pn->value.size() / n;
                if (pn->requires_grad) {
                    auto& g = acc_grad(pn);
                    for (std::size_t i = 0; i < r * n; ++i) g[i] += on->grad[row * n + i];
                }
                row += r;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ValueError("concat_cols: empty input");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    bool rec = false;
    for (const auto& p : parts) {
        if (p.rows() != m) throw ShapeError("concat_cols: row mismatch " + format_shape(p.shape()));
        n += p.cols();
        rec = rec || p.requires_grad();
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    std::size_t col = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < m; ++i)
            std::copy(p.raw().begin() + i * pc, p.raw().begin() + (i + 1) * pc, out.raw().begin() + i * n + col);
        col += pc;
    }
    if (Tape<T>::current() && rec) {
        mark_output(out);
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            widths.push_back(p.cols());
        }
        auto on = out.node();
        Tape<T>::current()->record([nodes, widths, on, m, n] {
            if (on->grad.empty()) return;
            std::size_t col = 0;
            for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                const std::size_t pc = widths[pi];
                if (nodes[pi]->requires_grad) {
                    auto& g = acc_grad(nodes[pi]);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += on->grad[i * n + col + j];
                }
                col += pc;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t lo, std::size_t hi) {
    if (a.ndim() < 1 || a.ndim() > 2) throw ShapeError("slice_rows: 1-D or 2-D tensor required");
    const std::size_t m = a.shape()[0];
    const std::size_t n = a.ndim() == 2 ? a.shape()[1] : 1;
    if (lo >= hi || hi > m) throw ShapeError("slice_rows: bad range [" + std::to_string(lo) + "," + std::to_string(hi) + ") of " + std::to_string(m));
    std::vector<std::size_t> shape = a.ndim() == 2 ? std::vector<std::size_t>{hi - lo, n} : std::vector<std::size_t>{hi - lo};
    Tensor<T> out = Tensor<T>::zeros(shape);
    std::copy(a.raw().begin() + lo * n, a.raw().begin() + hi * n, out.raw().begin());
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, lo, n] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t i = 0; i < on->grad.size(); ++i) g[lo * n + i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t lo, std::size_t hi) {
    require_2d(a, "slice_cols");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (lo >= hi || hi > n) throw ShapeError("slice_cols: bad range [" + std::to_string(lo) + "," + std::to_string(hi) + ") of " + std::to_string(n));
    const std::size_t w = hi - lo;
    Tensor<T> out = Tensor<T>::zeros({m, w});
    for (std::size_t i = 0; i < m; ++i)
        std::copy(a.raw().begin() + i * n + lo, a.raw().begin() + i * n + hi, out.raw().begin() + i * w);
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, m, n, lo, w] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) g[i * n + lo + j] += on->grad[i * w + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& idx) {
    require_2d(a, "gather_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    for (std::size_t i : idx)
        if (i >= m) throw ValueError("gather_rows: index " + std::to_string(i) + " out of range " + std::to_string(m));
    Tensor<T> out = Tensor<T>::zeros({idx.size(), n});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(a.raw().begin() + idx[r] * n, a.raw().begin() + (idx[r] + 1) * n, out.raw().begin() + r * n);
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, idx, n] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += on->grad[r * n + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> take_diag(const Tensor<T>& a) {
    require_2d(a, "take_diag");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (m != n) throw ShapeError("take_diag: square matrix required, got " + format_shape(a.shape()));
    Tensor<T> out = Tensor<T>::zeros({m});
    for (std::size_t i = 0; i < m; ++i) out.raw()[i] = a.raw()[i * n + i];
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, m, n] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t i = 0; i < m; ++i) g[i * n + i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> take_col(const Tensor<T>& a, std::size_t col) {
    require_2d(a, "take_col");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (col >= n) throw ShapeError("take_col: column " + std::to_string(col) + " out of " + std::to_string(n));
    Tensor<T> out = Tensor<T>::zeros({m});
    for (std::size_t i = 0; i < m; ++i) out.raw()[i] = a.raw()[i * n + col];
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, m, n, col] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t i = 0; i < m; ++i) g[i * n + col] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& bias) {
    require_2d(a, "add_rowwise");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (bias.numel() != n)
        throw ShapeError("add_rowwise: bias needs " + std::to_string(n) + " elements, got " +
                         std::to_string(bias.numel()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.raw()[i * n + j] = a.raw()[i * n + j] + bias.raw()[j];
    if (want_record<T>({&a, &bias})) {
        mark_output(out);
        auto an = a.node(), bn = bias.node(), on = out.node();
        Tape<T>::current()->record([an, bn, on, m, n] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                auto& g = acc_grad(an);
                for (std::size_t i = 0; i < m * n; ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                auto& g = acc_grad(bn);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += on->grad[i * n + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> tile_rows(const Tensor<T>& a, std::size_t times) {
    require_2d(a, "tile_rows");
    if (times == 0) throw ValueError("tile_rows: times must be positive");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({m * times, n});
    for (std::size_t t = 0; t < times; ++t)
        std::copy(a.raw().begin(), a.raw().end(), out.raw().begin() + t * m * n);
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, times, m, n] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t t = 0; t < times; ++t)
                for (std::size_t i = 0; i < m * n; ++i) g[i] += on->grad[t * m * n + i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<std::size_t> shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + format_shape(a.shape()) + " cannot become " + format_shape(shape));
    Tensor<T> out = Tensor<T>::from_values(std::move(shape), a.raw());
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& a, std::size_t batch, std::size_t n, std::size_t heads, std::size_t dh) {
    require_2d(a, "split_heads");
    if (a.shape()[0] != batch * n || a.shape()[1] != heads * dh)
        throw ShapeError("split_heads: " + format_shape(a.shape()) + " incompatible with B=" + std::to_string(batch) +
                         " n=" + std::to_string(n) + " H=" + std::to_string(heads) + " dh=" + std::to_string(dh));
    Tensor<T> out = Tensor<T>::zeros({batch * heads * n, dh});
    const T* src = a.raw().data();
    T* dst = out.raw().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                const T* s = src + (b * n + i) * heads * dh + h * dh;
                T* d = dst + ((b * heads + h) * n + i) * dh;
                std::copy(s, s + dh, d);
            }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, batch, n, heads, dh] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < n; ++i) {
                        const T* s = on->grad.data() + ((b * heads + h) * n + i) * dh;
                        T* d = g.data() + (b * n + i) * heads * dh + h * dh;
                        for (std::size_t j = 0; j < dh; ++j) d[j] += s[j];
                    }
        });
    }
    return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& a, std::size_t batch, std::size_t n, std::size_t heads, std::size_t dh) {
    require_2d(a, "merge_heads");
    if (a.shape()[0] != batch * heads * n || a.shape()[1] != dh)
        throw ShapeError("merge_heads: " + format_shape(a.shape()) + " incompatible with B=" + std::to_string(batch) +
                         " n=" + std::to_string(n) + " H=" + std::to_string(heads) + " dh=" + std::to_string(dh));
    Tensor<T> out = Tensor<T>::zeros({batch * n, heads * dh});
    const T* src = a.raw().data();
    T* dst = out.raw().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                const T* s = src + ((b * heads + h) * n + i) * dh;
                T* d = dst + (b * n + i) * heads * dh + h * dh;
                std::copy(s, s + dh, d);
            }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, batch, n, heads, dh] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < n; ++i) {
                        const T* s = on->grad.data() + (b * n + i) * heads * dh + h * dh;
                        T* d = g.data() + ((b * heads + h) * n + i) * dh;
                        for (std::size_t j = 0; j < dh; ++j) d[j] += s[j];
                    }
        });
    }
    return out;
}

template <typename T>
Tensor<T> row_group_weighted_mean(const Tensor<T>& a, const std::vector<T>& w, std::size_t batch) {
    require_2d(a, "row_group_weighted_mean");
    const std::size_t rows = a.shape()[0], d = a.shape()[1];
    if (batch == 0 || rows % batch != 0)
        throw ShapeError("row_group_weighted_mean: rows " + std::to_string(rows) + " not divisible by batch " +
                         std::to_string(batch));
    if (w.size() != rows) throw ShapeError("row_group_weighted_mean: weight count mismatch");
    const std::size_t per = rows / batch;
    std::vector<T> inv_total(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        T tot = 0;
        for (std::size_t i = 0; i < per; ++i) tot += w[b * per + i];
        if (tot <= T(0)) throw ValueError("row_group_weighted_mean: group " + std::to_string(b) + " has zero weight");
        inv_total[b] = T(1) / tot;
    }
    Tensor<T> out = Tensor<T>::zeros({batch, d});
    for (std::size_t b = 0; b < batch; ++b) {
        T* y = out.raw().data() + b * d;
        for (std::size_t i = 0; i < per; ++i) {
            T wi = w[b * per + i] * inv_total[b];
            if (wi == T(0)) continue;
            const T* x = a.raw().data() + (b * per + i) * d;
            for (std::size_t j = 0; j < d; ++j) y[j] += wi * x[j];
        }
    }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, w, inv_total, batch, per, d] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* gy = on->grad.data() + b * d;
                for (std::size_t i = 0; i < per; ++i) {
                    T wi = w[b * per + i] * inv_total[b];
                    if (wi == T(0)) continue;
                    T* gx = g.data() + (b * per + i) * d;
                    for (std::size_t j = 0; j < d; ++j) gx[j] += wi * gy[j];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> nchw_to_rows(const Tensor<T>& a) {
    if (a.ndim() != 4) throw ShapeError("nchw_to_rows: expected 4-D tensor, got " + format_shape(a.shape()));
    const std::size_t b = a.shape()[0], c = a.shape()[1], h = a.shape()[2], w = a.shape()[3];
    Tensor<T> out = Tensor<T>::zeros({b * h * w, c});
    const T* src = a.raw().data();
    T* dst = out.raw().data();
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t p = 0; p < h * w; ++p) dst[(bi * h * w + p) * c + ci] = src[(bi * c + ci) * h * w + p];
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, b, c, h, w] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t p = 0; p < h * w; ++p)
                        g[(bi * c + ci) * h * w + p] += on->grad[(bi * h * w + p) * c + ci];
        });
    }
    return out;
}

template <typename T>
Tensor<T> im2col_rows(const Tensor<T>& a, std::size_t batch, std::size_t h, std::size_t w, std::size_t kernel,
                      std::size_t stride, std::size_t pad) {
    require_2d(a, "im2col_rows");
    const std::size_t c = a.shape()[1];
    if (a.shape()[0] != batch * h * w)
        throw ShapeError("im2col_rows: " + format_shape(a.shape()) + " incompatible with B=" + std::to_string(batch) +
                         " h=" + std::to_string(h) + " w=" + std::to_string(w));
    if (stride == 0) throw ValueError("im2col_rows: stride must be positive");
    const std::size_t oh = (h + 2 * pad - kernel) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kernel) / stride + 1;
    const std::size_t patch = c * kernel * kernel;
    Tensor<T> out = Tensor<T>::zeros({batch * oh * ow, patch});
    const T* src = a.raw().data();
    T* dst = out.raw().data();
    for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T* row = dst + ((bi * oh + oy) * ow + ox) * patch;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                    std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        T* cell = row + (ky * kernel + kx) * c;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                            continue;  // zero padding
                        const T* px = src + ((bi * h + iy) * w + ix) * c;
                        for (std::size_t ci = 0; ci < c; ++ci) cell[ci] = px[ci];
                    }
                }
            }
    if (want_record<T>({&a})) {
        mark_output(out);
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record([an, on, batch, h, w, c, kernel, stride, pad, oh, ow, patch] {
            if (on->grad.empty()) return;
            auto& g = acc_grad(an);
            for (std::size_t bi = 0; bi < batch; ++bi)
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const T* row = on->grad.data() + ((bi * oh + oy) * ow + ox) * patch;
                        for (std::size_t ky = 0; ky < kernel; ++ky) {
                            std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t kx = 0; kx < kernel; ++kx) {
                                std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                const T* cell = row + (ky * kernel + kx) * c;
                                T* px = g.data() + ((bi * h + iy) * w + ix) * c;
                                for (std::size_t ci = 0; ci < c; ++ci) px[ci] += cell[ci];
                            }
                        }
                    }
        });
    }
    return out;
}

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
    if (h <= T(0)) throw ValueError("finite_diff_grad: h must be positive");
    Tensor<T> g = Tensor<T>::zeros(x.shape());
    Tensor<T> probe = x.detached();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const T orig = probe.raw()[i];
        const T step = h * std::max(T(1), std::abs(orig));
        probe.raw()[i] = orig + step;
        T fp = f(probe);
        probe.raw()[i] = orig - step;
        T fm = f(probe);
        probe.raw()[i] = orig;
        g.raw()[i] = (fp - fm) / (T(2) * step);
    }
    return g;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

#define PICOCLIP_INSTANTIATE_OPS(T)                                                                          \
    template void backward<T>(const Tensor<T>&, Tape<T>&);                                                   \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> transpose<T>(const Tensor<T>&);                                                       \
    template Tensor<T> batched_matmul<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);                   \
    template Tensor<T> batched_matmul_nt<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);                \
    template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                                    \
    template Tensor<T> log_softmax_rows<T>(const Tensor<T>&);                                                \
    template Tensor<T> logsumexp_rows<T>(const Tensor<T>&);                                                  \
    template Tensor<T> logsumexp_rows_offdiag<T>(const Tensor<T>&);                                          \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                                        \
    template Tensor<T> scale_by<T>(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> reciprocal<T>(const Tensor<T>&);                                                      \
    template Tensor<T> exp_elem<T>(const Tensor<T>&);                                                        \
    template Tensor<T> log_elem<T>(const Tensor<T>&);                                                        \
    template Tensor<T> gelu<T>(const Tensor<T>&);                                                            \
    template Tensor<T> l2_normalize_rows<T>(const Tensor<T>&);                                               \
    template Tensor<T> mean_reduce<T>(const Tensor<T>&);                                                     \
    template Tensor<T> sum_reduce<T>(const Tensor<T>&);                                                      \
    template Tensor<T> concat_rows<T>(const std::vector<Tensor<T>>&);                                        \
    template Tensor<T> concat_cols<T>(const std::vector<Tensor<T>>&);                                        \
    template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);                            \
    template Tensor<T> slice_cols<T>(const Tensor<T>&, std::size_t, std::size_t);                            \
    template Tensor<T> gather_rows<T>(const Tensor<T>&, const std::vector<std::size_t>&);                    \
    template Tensor<T> take_diag<T>(const Tensor<T>&);                                                       \
    template Tensor<T> take_col<T>(const Tensor<T>&, std::size_t);                                           \
    template Tensor<T> add_rowwise<T>(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> tile_rows<T>(const Tensor<T>&, std::size_t);                                          \
    template Tensor<T> reshape<T>(const Tensor<T>&, std::vector<std::size_t>);                               \
    template Tensor<T> split_heads<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
    template Tensor<T> merge_heads<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
    template Tensor<T> row_group_weighted_mean<T>(const Tensor<T>&, const std::vector<T>&, std::size_t);     \
    template Tensor<T> nchw_to_rows<T>(const Tensor<T>&);                                                    \
    template Tensor<T> im2col_rows<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t,  \
                                      std::size_t, std::size_t);                                             \
    template Tensor<T> finite_diff_grad<T>(const std::function<T(const Tensor<T>&)>&, const Tensor<T>&, T);  \
    template void check_finite<T>(const Tensor<T>&, const char*);

PICOCLIP_INSTANTIATE_OPS(float)
PICOCLIP_INSTANTIATE_OPS(double)

#undef PICOCLIP_INSTANTIATE_OPS

}  // namespace picoclip
