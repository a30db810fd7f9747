#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "coslin/error.hpp"

namespace coslin {

using Shape = std::vector<std::size_t>;

class ComputationTape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;       // row-major
    bool requires_grad = false;
    std::vector<double> grad;       // empty until first accumulation
};

} // namespace detail

/// Dense tensor of 64-bit floats with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage. Values are
/// immutable after construction; only the grad slot mutates (during
/// backward and zero_grad). All entries must be finite -- constructors and
/// every primitive check, and a NaN/Inf raises NumericError instead of
/// propagating.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    /// Constant (non-differentiable) tensor from raw values.
    static Tensor from(Shape shape, std::vector<double> data);
    /// Trainable leaf: requires_grad is set, grad accumulates in backward.
    static Tensor param(Shape shape, std::vector<double> data);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t ndim() const { return impl_->shape.size(); }
    bool is_matrix() const { return ndim() == 2; }
    bool is_scalar() const { return size() == 1; }
    std::size_t rows() const;
    std::size_t cols() const;

    const std::vector<double>& data() const { return impl_->data; }
    double value() const;                       // scalar convenience
    double at(std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    /// Stable identity of the underlying storage.
    const void* id() const { return impl_.get(); }

    /// Internal: shared storage handle (used by the tape machinery).
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of executed primitives; replaying it backward fills the
/// grad slot of every requires_grad tensor reachable from a scalar loss.
///
/// A tape and the tensors recorded on it belong to one thread. Activate
/// recording with a TapeScope; primitives executed outside any scope run in
/// pure evaluation mode.
class ComputationTape {
public:
    ComputationTape() = default;
    ComputationTape(const ComputationTape&) = delete;
    ComputationTape& operator=(const ComputationTape&) = delete;

    std::size_t node_count() const { return nodes_.size(); }

    /// Internal: record one primitive. `pull` accumulates d(loss)/d(input)
    /// into the inputs' grad slots given that output.grad is populated.
    void record(std::shared_ptr<detail::TensorImpl> output, std::function<void()> pull);

private:
    friend void backward(const Tensor& loss, ComputationTape& tape);
    struct Node {
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void()> pull;
    };
    std::vector<Node> nodes_;
};

/// RAII guard that makes `tape` the active recording target for this thread.
class TapeScope {
public:
    explicit TapeScope(ComputationTape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    ComputationTape* previous_;
};

/// Tape currently recording on this thread, or nullptr.
ComputationTape* active_tape();

/// Reverse-mode sweep. `loss` must be a scalar produced by primitives
/// recorded on `tape`; afterwards every requires_grad tensor in the
/// subgraph holds d(loss)/d(tensor).
void backward(const Tensor& loss, ComputationTape& tape);

// ---- primitives ----------------------------------------------------------
// Each checks shapes (ShapeError), checks its output for non-finite entries
// (NumericError), and when a tape is active records an exact reverse-mode
// rule. Evaluation order is deterministic: identical inputs give
// bit-identical outputs on a fixed platform.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

/// [m x k] . [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Elementwise max(x, 0). The subgradient at exactly 0 is defined as 0.
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

/// Row-wise softmax with max-subtraction; rows sum to 1 within 1e-12.
Tensor softmax_rows(const Tensor& x);

/// [m x n] -> [m x 1] row sums.
Tensor row_sum(const Tensor& x);
Tensor sum(const Tensor& x);   // -> scalar
Tensor mean(const Tensor& x);  // -> scalar

/// Adds a length-n row vector to every row of an [m x n] matrix.
Tensor broadcast_add_row(const Tensor& a, const Tensor& row);

/// out[i][j] = a[i][j] / d[i]; `d` is an [m x 1] column.
Tensor div_cols(const Tensor& a, const Tensor& d);

/// Scales row i by the constant factor[i] (no gradient path to factors).
Tensor scale_rows(const Tensor& a, const std::vector<double>& factors);

/// Row-stochastic normalization: out[i][j] = a[i][j] / sum_j a[i][j].
/// An exactly-zero row stays a zero row (never NaN).
Tensor normalize_rows(const Tensor& a);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor reshape(const Tensor& a, Shape shape);

/// Per-row normalization to zero mean / unit variance followed by an affine
/// map: out[i] = (x[i] - mu_i) / sqrt(var_i + eps) * gain + bias.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);

/// Causal linear-attention core: out_i = sum_{j <= i} (q_i . k_j) v_j,
/// computed with one running [d x e] accumulator in O((N+M) d e) time.
Tensor causal_dot_prefix(const Tensor& q, const Tensor& k, const Tensor& v);

namespace detail {

/// Internal: construct the output of a custom primitive. Checks finiteness,
/// and marks the result differentiable when a tape is active and any input
/// requires grad (the caller then records its reverse rule).
Tensor op_output(Shape shape, std::vector<double> data,
                 std::initializer_list<const Tensor*> inputs, const char* op);

/// Internal: grad slot of a tensor, zero-allocated on first use.
std::vector<double>& grad_buffer(TensorImpl& t);

} // namespace detail

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }

} // namespace coslin
