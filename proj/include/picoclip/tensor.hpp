#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Design:
//  - Tensor<T> is a cheap handle onto shared storage (value + optional grad).
//    Values are immutable once an op has produced them; grad buffers and
//    parameter storage (via raw()) are the sanctioned mutable parts.
//  - A Tape<T> records executed primitives while it is alive; backward()
//    replays it in reverse, accumulating (+=) into grads, so a parameter
//    reused by several ops (weight sharing) collects the sum of its
//    contributions.
//  - With no live tape, every op is a pure forward evaluation. That is the
//    inference path and also what finite_diff_grad relies on.
//  - T is float or double. Double exists so gradient checks can run at
//    tight tolerance; training uses float.

#include <functional>
#include <memory>
#include <vector>

#include "picoclip/common.hpp"

namespace picoclip {

template <typename T>
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until backward needs it
    bool requires_grad = false;
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, T v, bool requires_grad = false);
    static Tensor from_values(std::vector<std::size_t> shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T v, bool requires_grad = false);
    static Tensor identity(std::size_t n);

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<std::size_t>& shape() const { return n_->shape; }
    std::size_t ndim() const { return n_->shape.size(); }
    std::size_t numel() const { return n_->value.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    T item() const;                                   // scalar tensors only
    T at(std::size_t flat) const { return n_->value[flat]; }
    T operator()(std::size_t r, std::size_t c) const; // 2-D access

    const std::vector<T>& raw() const { return n_->value; }
    std::vector<T>& raw() { return n_->value; }       // parameter init / optimizer / inherit
    const std::vector<T>& grad() const { return n_->grad; }
    std::vector<T>& grad() { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    void ensure_grad() { if (n_->grad.empty()) n_->grad.assign(n_->value.size(), T(0)); }
    void zero_grad() { n_->grad.clear(); }

    bool requires_grad() const { return n_ && n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; }

    bool all_finite() const;
    Tensor detached() const;  // value copy with no grad participation

    std::shared_ptr<TensorNode<T>> node() const { return n_; }

private:
    std::shared_ptr<TensorNode<T>> n_;
};

// Records backward closures for executed primitives. Constructing a Tape
// makes it the active one for the current thread; destruction restores the
// previous tape (tapes may nest, e.g. a test inside a training step).
template <typename T>
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }
    std::size_t size() const { return ops_.size(); }
    bool consumed() const { return consumed_; }

    template <typename U>
    friend void backward(const Tensor<U>& loss, Tape<U>& tape);

private:
    std::vector<std::function<void()>> ops_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

// Populates grads of every requires_grad tensor reachable from `loss`.
// Errors on non-scalar loss and on reuse of an already-consumed tape.
template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape);

// ---------------------------------------------------------------------------
// Primitives. All record onto the active tape when an input requires grad.
// Shapes are checked strictly; the only broadcast anywhere is scalar-vs-tensor
// (scale / scale_by). Everything else is explicit.
// ---------------------------------------------------------------------------

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

template <typename T> Tensor<T> softmax_rows(const Tensor<T>& a);
template <typename T> Tensor<T> log_softmax_rows(const Tensor<T>& a);
template <typename T> Tensor<T> logsumexp_rows(const Tensor<T>& a);
// log sum over b != k of exp(a[k][b]); the denominator of the interactive
// contrastive loss.
template <typename T> Tensor<T> logsumexp_rows_offdiag(const Tensor<T>& a);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T c);
// multiply by a learnable 1-element tensor (temperature etc.)
template <typename T> Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s);
template <typename T> Tensor<T> reciprocal(const Tensor<T>& a);
template <typename T> Tensor<T> exp_elem(const Tensor<T>& a);
template <typename T> Tensor<T> log_elem(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> l2_normalize_rows(const Tensor<T>& a);

template <typename T> Tensor<T> mean_reduce(const Tensor<T>& a);
template <typename T> Tensor<T> sum_reduce(const Tensor<T>& a);

template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& a, std::size_t lo, std::size_t hi);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& a, std::size_t lo, std::size_t hi);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& idx);
template <typename T> Tensor<T> take_diag(const Tensor<T>& a);
template <typename T> Tensor<T> take_col(const Tensor<T>& a, std::size_t col);
template <typename T> Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& bias);
template <typename T> Tensor<T> tile_rows(const Tensor<T>& a, std::size_t times);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, std::vector<std::size_t> shape);

// Multi-head plumbing over stacked batches. A batch of B sequences of n
// tokens lives in a single (B*n) x d matrix; split_heads regroups it as
// (B*H*n) x dh so per-(sample,head) matmuls are contiguous blocks.
template <typename T>
Tensor<T> split_heads(const Tensor<T>& a, std::size_t batch, std::size_t n, std::size_t heads, std::size_t dh);
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& a, std::size_t batch, std::size_t n, std::size_t heads, std::size_t dh);

// Block-diagonal matmul: batch independent (m x k) @ (k x n) products stacked
// along rows. The _nt variant multiplies by the transpose of b's blocks.
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, std::size_t batch);
template <typename T>
Tensor<T> batched_matmul_nt(const Tensor<T>& a, const Tensor<T>& b, std::size_t batch);

// Weighted mean over each group of rows (rows grouped contiguously, `batch`
// equal groups). Weights are constants; zero weight excludes a row.
template <typename T>
Tensor<T> row_group_weighted_mean(const Tensor<T>& a, const std::vector<T>& w, std::size_t batch);

// Image plumbing: NCHW -> one row per pixel ((B*H*W) x C), and im2col over
// that layout for convolution-as-matmul.
template <typename T> Tensor<T> nchw_to_rows(const Tensor<T>& a);
template <typename T>
Tensor<T> im2col_rows(const Tensor<T>& a, std::size_t batch, std::size_t h, std::size_t w,
                      std::size_t kernel, std::size_t stride, std::size_t pad);

// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h per
// coordinate, step scaled by max(1, |x_i|). Pure forward evaluations; this is
// the independent reference that backward() is checked against.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h);

template <typename T> void check_finite(const Tensor<T>& t, const char* op);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace picoclip
