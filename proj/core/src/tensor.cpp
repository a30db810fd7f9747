#include "coslin/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace coslin {

namespace {

thread_local ComputationTape* g_active_tape = nullptr;

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_product(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

void validate_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (std::size_t d : s) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(s));
    }
}

void check_finite(const std::vector<double>& data, const char* op) {
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
            throw NumericError(std::string("non-finite value in output of '") + op +
                               "' at flat index " + std::to_string(i));
        }
    }
}

std::vector<double>& ensure_grad(detail::TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    return t.grad;
}

void require_matrix(const Tensor& t, const char* op) {
    if (!t.is_matrix()) {
        throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad, const char* op) {
    check_finite(data, op);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor::wrap(std::move(impl));
}

bool want_record(std::initializer_list<const Tensor*> inputs) {
    if (!g_active_tape) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

} // namespace

namespace detail {

Tensor op_output(Shape shape, std::vector<double> data,
                 std::initializer_list<const Tensor*> inputs, const char* op) {
    return make_tensor(std::move(shape), std::move(data), want_record(inputs), op);
}

std::vector<double>& grad_buffer(TensorImpl& t) { return ensure_grad(t); }

} // namespace detail

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

Tensor Tensor::zeros(Shape shape) {
    validate_shape(shape);
    std::size_t n = shape_product(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, 0.0), false, "zeros");
}

Tensor Tensor::full(Shape shape, double value) {
    validate_shape(shape);
    std::size_t n = shape_product(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, value), false, "full");
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    validate_shape(shape);
    if (shape_product(shape) != data.size()) {
        throw ShapeError("from: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_product(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    return make_tensor(std::move(shape), std::move(data), false, "from");
}

Tensor Tensor::param(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

std::size_t Tensor::rows() const {
    require_matrix(*this, "rows");
    return impl_->shape[0];
}

std::size_t Tensor::cols() const {
    require_matrix(*this, "cols");
    return impl_->shape[1];
}

double Tensor::value() const {
    if (!is_scalar()) throw ShapeError("value: tensor is not scalar, shape " + shape_str(shape()));
    return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) {
        throw std::logic_error("grad() called before backward populated this tensor");
    }
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

// ---- tape -----------------------------------------------------------------

void ComputationTape::record(std::shared_ptr<detail::TensorImpl> output,
                             std::function<void()> pull) {
    nodes_.push_back(Node{std::move(output), std::move(pull)});
}

TapeScope::TapeScope(ComputationTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

ComputationTape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss, ComputationTape& tape) {
    if (!loss.defined() || !loss.is_scalar()) {
        throw ShapeError("backward: loss must be a scalar tensor");
    }
    // The loss must be the output of a primitive recorded on this tape.
    std::size_t start = tape.nodes_.size();
    for (std::size_t i = tape.nodes_.size(); i-- > 0;) {
        if (tape.nodes_[i].output.get() == loss.impl().get()) {
            start = i;
            break;
        }
    }
    if (start == tape.nodes_.size()) {
        throw std::invalid_argument(
            "backward: loss was not produced by primitives recorded on this tape");
    }
    ensure_grad(*loss.impl())[0] += 1.0;
    for (std::size_t i = start + 1; i-- > 0;) {
        auto& node = tape.nodes_[i];
        if (!node.output->grad.empty()) node.pull();
    }
}

// ---- elementwise ops ------------------------------------------------------

namespace {

template <typename Fwd, typename Pull>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Pull pull) {
    require_same_shape(a, b, op);
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i], bd[i]);
    Tensor result = make_tensor(a.shape(), std::move(out), want_record({&a, &b}), op);
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), bi = b.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, bi, oi, pull] { pull(*ai, *bi, *oi); });
    }
    return result;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](detail::TensorImpl& ai, detail::TensorImpl& bi, detail::TensorImpl& oi) {
            const auto& g = oi.grad;
            if (ai.requires_grad) {
                auto& ga = ensure_grad(ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bi.requires_grad) {
                auto& gb = ensure_grad(bi);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](detail::TensorImpl& ai, detail::TensorImpl& bi, detail::TensorImpl& oi) {
            const auto& g = oi.grad;
            if (ai.requires_grad) {
                auto& ga = ensure_grad(ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bi.requires_grad) {
                auto& gb = ensure_grad(bi);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](detail::TensorImpl& ai, detail::TensorImpl& bi, detail::TensorImpl& oi) {
            const auto& g = oi.grad;
            if (ai.requires_grad) {
                auto& ga = ensure_grad(ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi.data[i];
            }
            if (bi.requires_grad) {
                auto& gb = ensure_grad(bi);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai.data[i];
            }
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "div", [](double x, double y) { return x / y; },
        [](detail::TensorImpl& ai, detail::TensorImpl& bi, detail::TensorImpl& oi) {
            const auto& g = oi.grad;
            if (ai.requires_grad) {
                auto& ga = ensure_grad(ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bi.data[i];
            }
            if (bi.requires_grad) {
                auto& gb = ensure_grad(bi);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gb[i] -= g[i] * oi.data[i] / bi.data[i];
                }
            }
        });
}

Tensor add_scalar(const Tensor& a, double c) {
    const auto& ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + c;
    Tensor result = make_tensor(a.shape(), std::move(out), want_record({&a}), "add_scalar");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, oi] {
            auto& ga = ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i];
        });
    }
    return result;
}

Tensor mul_scalar(const Tensor& a, double c) {
    const auto& ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * c;
    Tensor result = make_tensor(a.shape(), std::move(out), want_record({&a}), "mul_scalar");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, oi, c] {
            auto& ga = ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i] * c;
        });
    }
    return result;
}

// ---- unary maps -----------------------------------------------------------

Tensor relu(const Tensor& x) {
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    Tensor result = make_tensor(x.shape(), std::move(out), want_record({&x}), "relu");
    if (result.requires_grad()) {
        ImplPtr xi = x.impl(), oi = result.impl();
        g_active_tape->record(oi, [xi, oi] {
            auto& gx = ensure_grad(*xi);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                if (xi->data[i] > 0.0) gx[i] += oi->grad[i];
            }
        });
    }
    return result;
}

Tensor exp(const Tensor& x) {
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = std::exp(xd[i]);
    Tensor result = make_tensor(x.shape(), std::move(out), want_record({&x}), "exp");
    if (result.requires_grad()) {
        ImplPtr xi = x.impl(), oi = result.impl();
        g_active_tape->record(oi, [xi, oi] {
            auto& gx = ensure_grad(*xi);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) gx[i] += oi->grad[i] * oi->data[i];
        });
    }
    return result;
}

Tensor log(const Tensor& x) {
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = std::log(xd[i]);
    Tensor result = make_tensor(x.shape(), std::move(out), want_record({&x}), "log");
    if (result.requires_grad()) {
        ImplPtr xi = x.impl(), oi = result.impl();
        g_active_tape->record(oi, [xi, oi] {
            auto& gx = ensure_grad(*xi);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) gx[i] += oi->grad[i] / xi->data[i];
        });
    }
    return result;
}

// ---- matrix ops -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
    }
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = ad[i * k + kk];
            const double* brow = bd + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    Tensor result = make_tensor({m, n}, std::move(out), want_record({&a, &b}), "matmul");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), bi = b.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, bi, oi, m, k, n] {
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                // a.grad += g . b^T
                auto& ga = ensure_grad(*ai);
                const double* bd2 = bi->data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        const double* grow = g + i * n;
                        const double* brow = bd2 + kk * n;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + kk] += acc;
                    }
                }
            }
            if (bi->requires_grad) {
                // b.grad += a^T . g
                auto& gb = ensure_grad(*bi);
                const double* ad2 = ai->data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double av = ad2[i * k + kk];
                        double* gbrow = gb.data() + kk * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return result;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    const auto& ad = a.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
    }
    Tensor result = make_tensor({n, m}, std::move(out), want_record({&a}), "transpose");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, oi, m, n] {
            auto& ga = ensure_grad(*ai);
            const auto& g = oi->grad;
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t i = 0; i < m; ++i) ga[i * n + j] += g[j * m + i];
            }
        });
    }
    return result;
}

Tensor softmax_rows(const Tensor& x) {
    require_matrix(x, "softmax_rows");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    const auto& xd = x.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = xd.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(row[j] - mx);
            denom += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= denom;
    }
    Tensor result = make_tensor({m, n}, std::move(out), want_record({&x}), "softmax_rows");
    if (result.requires_grad()) {
        ImplPtr xi = x.impl(), oi = result.impl();
        g_active_tape->record(oi, [xi, oi, m, n] {
            auto& gx = ensure_grad(*xi);
            const auto& g = oi->grad;
            const auto& y = oi->data;
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (std::size_t j = 0; j < n; ++j) {
                    gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                }
            }
        });
    }
    return result;
}

Tensor row_sum(const Tensor& x) {
    require_matrix(x, "row_sum");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    const auto& xd = x.data();
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i] += xd[i * n + j];
    }
    Tensor result = make_tensor({m, 1}, std::move(out), want_record({&x}), "row_sum");
    if (result.requires_grad()) {
        ImplPtr xi = x.impl(), oi = result.impl();
        g_active_tape->record(oi, [xi, oi, m, n] {
            auto& gx = ensure_grad(*xi);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += oi->grad[i];
            }
        });
    }
    return result;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor result = make_tensor({1}, {acc}, want_record({&x}), "sum");
    if (result.requires_grad()) {
        ImplPtr xi = x.impl(), oi = result.impl();
        g_active_tape->record(oi, [xi, oi] {
            auto& gx = ensure_grad(*xi);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[0];
        });
    }
    return result;
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    Tensor result = make_tensor({1}, {acc * inv}, want_record({&x}), "mean");
    if (result.requires_grad()) {
        ImplPtr xi = x.impl(), oi = result.impl();
        g_active_tape->record(oi, [xi, oi, inv] {
            auto& gx = ensure_grad(*xi);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[0] * inv;
        });
    }
    return result;
}

Tensor broadcast_add_row(const Tensor& a, const Tensor& row) {
    require_matrix(a, "broadcast_add_row");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (row.size() != n || row.ndim() > 2) {
        throw ShapeError("broadcast_add_row: row " + shape_str(row.shape()) +
                         " does not match matrix " + shape_str(a.shape()));
    }
    const auto& ad = a.data();
    const auto& rd = row.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = ad[i * n + j] + rd[j];
    }
    Tensor result = make_tensor({m, n}, std::move(out), want_record({&a, &row}), "broadcast_add_row");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), ri = row.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, ri, oi, m, n] {
            const auto& g = oi->grad;
            if (ai->requires_grad) {
                auto& ga = ensure_grad(*ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (ri->requires_grad) {
                auto& gr = ensure_grad(*ri);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
                }
            }
        });
    }
    return result;
}

Tensor div_cols(const Tensor& a, const Tensor& d) {
    require_matrix(a, "div_cols");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (!d.is_matrix() || d.shape()[0] != m || d.shape()[1] != 1) {
        throw ShapeError("div_cols: divisor " + shape_str(d.shape()) + " must be [" +
                         std::to_string(m) + "x1] for matrix " + shape_str(a.shape()));
    }
    const auto& ad = a.data();
    const auto& dd = d.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double inv = 1.0 / dd[i];
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = ad[i * n + j] * inv;
    }
    Tensor result = make_tensor({m, n}, std::move(out), want_record({&a, &d}), "div_cols");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), di = d.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, di, oi, m, n] {
            const auto& g = oi->grad;
            if (ai->requires_grad) {
                auto& ga = ensure_grad(*ai);
                for (std::size_t i = 0; i < m; ++i) {
                    const double inv = 1.0 / di->data[i];
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * inv;
                }
            }
            if (di->requires_grad) {
                auto& gd = ensure_grad(*di);
                for (std::size_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * oi->data[i * n + j];
                    gd[i] -= acc / di->data[i];
                }
            }
        });
    }
    return result;
}

Tensor scale_rows(const Tensor& a, const std::vector<double>& factors) {
    require_matrix(a, "scale_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (factors.size() != m) {
        throw ShapeError("scale_rows: need " + std::to_string(m) + " factors, got " +
                         std::to_string(factors.size()));
    }
    const auto& ad = a.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = ad[i * n + j] * factors[i];
    }
    Tensor result = make_tensor({m, n}, std::move(out), want_record({&a}), "scale_rows");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, oi, m, n, factors] {
            auto& ga = ensure_grad(*ai);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += oi->grad[i * n + j] * factors[i];
            }
        });
    }
    return result;
}

Tensor normalize_rows(const Tensor& a) {
    require_matrix(a, "normalize_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    const auto& ad = a.data();
    std::vector<double> out(m * n);
    std::vector<double> sums(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) sums[i] += ad[i * n + j];
        if (sums[i] == 0.0) {
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] = 0.0;
        } else {
            const double inv = 1.0 / sums[i];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] = ad[i * n + j] * inv;
        }
    }
    Tensor result = make_tensor({m, n}, std::move(out), want_record({&a}), "normalize_rows");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, oi, m, n, sums] {
            auto& ga = ensure_grad(*ai);
            const auto& g = oi->grad;
            const auto& y = oi->data;
            for (std::size_t i = 0; i < m; ++i) {
                if (sums[i] == 0.0) continue;
                const double inv = 1.0 / sums[i];
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (std::size_t j = 0; j < n; ++j) {
                    ga[i * n + j] += (g[i * n + j] - dot) * inv;
                }
            }
        });
    }
    return result;
}

// ---- structure ops --------------------------------------------------------

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input list");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        require_matrix(p, "concat_cols");
        if (p.rows() != m) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        total += p.cols();
    }
    std::vector<double> out(m * total);
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < pc; ++j) out[i * total + offset + j] = p.at(i, j);
        }
        offset += pc;
    }
    bool rec = false;
    if (g_active_tape) {
        for (const Tensor& p : parts) rec = rec || p.requires_grad();
    }
    Tensor result = make_tensor({m, total}, std::move(out), rec, "concat_cols");
    if (result.requires_grad()) {
        std::vector<ImplPtr> impls;
        impls.reserve(parts.size());
        for (const Tensor& p : parts) impls.push_back(p.impl());
        ImplPtr oi = result.impl();
        g_active_tape->record(oi, [impls, oi, m, total] {
            const auto& g = oi->grad;
            std::size_t off = 0;
            for (const ImplPtr& pi : impls) {
                const std::size_t pc = pi->shape[1];
                if (pi->requires_grad) {
                    auto& gp = ensure_grad(*pi);
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * total + off + j];
                    }
                }
                off += pc;
            }
        });
    }
    return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input list");
    const std::size_t n = parts[0].cols();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        require_matrix(p, "concat_rows");
        if (p.cols() != n) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) +
                             " vs " + shape_str(p.shape()));
        }
        total += p.rows();
    }
    std::vector<double> out;
    out.reserve(total * n);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    bool rec = false;
    if (g_active_tape) {
        for (const Tensor& p : parts) rec = rec || p.requires_grad();
    }
    Tensor result = make_tensor({total, n}, std::move(out), rec, "concat_rows");
    if (result.requires_grad()) {
        std::vector<ImplPtr> impls;
        impls.reserve(parts.size());
        for (const Tensor& p : parts) impls.push_back(p.impl());
        ImplPtr oi = result.impl();
        g_active_tape->record(oi, [impls, oi] {
            const auto& g = oi->grad;
            std::size_t off = 0;
            for (const ImplPtr& pi : impls) {
                const std::size_t cnt = pi->data.size();
                if (pi->requires_grad) {
                    auto& gp = ensure_grad(*pi);
                    for (std::size_t i = 0; i < cnt; ++i) gp[i] += g[off + i];
                }
                off += cnt;
            }
        });
    }
    return result;
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    require_matrix(a, "slice_cols");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (count == 0 || start + count > n) {
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(a.shape()));
    }
    std::vector<double> out(m * count);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.at(i, start + j);
    }
    Tensor result = make_tensor({m, count}, std::move(out), want_record({&a}), "slice_cols");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, oi, m, n, start, count] {
            auto& ga = ensure_grad(*ai);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < count; ++j) {
                    ga[i * n + start + j] += oi->grad[i * count + j];
                }
            }
        });
    }
    return result;
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    require_matrix(a, "slice_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (count == 0 || start + count > m) {
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(a.shape()));
    }
    std::vector<double> out(a.data().begin() + start * n, a.data().begin() + (start + count) * n);
    Tensor result = make_tensor({count, n}, std::move(out), want_record({&a}), "slice_rows");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, oi, n, start, count] {
            auto& ga = ensure_grad(*ai);
            for (std::size_t i = 0; i < count * n; ++i) ga[start * n + i] += oi->grad[i];
        });
    }
    return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
    validate_shape(shape);
    if (shape_product(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    }
    Tensor result = make_tensor(std::move(shape), a.data(), want_record({&a}), "reshape");
    if (result.requires_grad()) {
        ImplPtr ai = a.impl(), oi = result.impl();
        g_active_tape->record(oi, [ai, oi] {
            auto& ga = ensure_grad(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
        });
    }
    return result;
}

// ---- fused ops ------------------------------------------------------------

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_matrix(x, "layer_norm_rows");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (gain.size() != n || bias.size() != n) {
        throw ShapeError("layer_norm_rows: gain/bias must have " + std::to_string(n) +
                         " entries for " + shape_str(x.shape()));
    }
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    std::vector<double> out(m * n);
    std::vector<double> inv_std(m);
    std::vector<double> xhat(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xd[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = xd[i * n + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (xd[i * n + j] - mu) * inv_std[i];
            out[i * n + j] = xhat[i * n + j] * gd[j] + bd[j];
        }
    }
    Tensor result =
        make_tensor({m, n}, std::move(out), want_record({&x, &gain, &bias}), "layer_norm_rows");
    if (result.requires_grad()) {
        ImplPtr xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = result.impl();
        g_active_tape->record(oi, [xi, gi, bi, oi, m, n, inv_std, xhat] {
            const auto& g = oi->grad;
            if (bi->requires_grad) {
                auto& gb = ensure_grad(*bi);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                }
            }
            if (gi->requires_grad) {
                auto& gg = ensure_grad(*gi);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
                }
            }
            if (xi->requires_grad) {
                auto& gx = ensure_grad(*xi);
                const double invn = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double h = g[i * n + j] * gi->data[j];
                        mean_h += h;
                        mean_hx += h * xhat[i * n + j];
                    }
                    mean_h *= invn;
                    mean_hx *= invn;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double h = g[i * n + j] * gi->data[j];
                        gx[i * n + j] += (h - mean_h - xhat[i * n + j] * mean_hx) * inv_std[i];
                    }
                }
            }
        });
    }
    return result;
}

Tensor causal_dot_prefix(const Tensor& q, const Tensor& k, const Tensor& v) {
    require_matrix(q, "causal_dot_prefix");
    require_matrix(k, "causal_dot_prefix");
    require_matrix(v, "causal_dot_prefix");
    const std::size_t nq = q.shape()[0], d = q.shape()[1];
    const std::size_t mk = k.shape()[0], e = v.shape()[1];
    if (k.shape()[1] != d) {
        throw ShapeError("causal_dot_prefix: q " + shape_str(q.shape()) + " and k " +
                         shape_str(k.shape()) + " feature dims disagree");
    }
    if (v.shape()[0] != mk) {
        throw ShapeError("causal_dot_prefix: k " + shape_str(k.shape()) + " and v " +
                         shape_str(v.shape()) + " row counts disagree");
    }
    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();
    std::vector<double> out(nq * e, 0.0);
    std::vector<double> acc(d * e, 0.0);
    for (std::size_t i = 0; i < nq; ++i) {
        if (i < mk) {
            for (std::size_t a = 0; a < d; ++a) {
                const double kv = kd[i * d + a];
                for (std::size_t b = 0; b < e; ++b) acc[a * e + b] += kv * vd[i * e + b];
            }
        }
        for (std::size_t a = 0; a < d; ++a) {
            const double qv = qd[i * d + a];
            for (std::size_t b = 0; b < e; ++b) out[i * e + b] += qv * acc[a * e + b];
        }
    }
    Tensor result =
        make_tensor({nq, e}, std::move(out), want_record({&q, &k, &v}), "causal_dot_prefix");
    if (result.requires_grad()) {
        ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = result.impl();
        g_active_tape->record(oi, [qi, ki, vi, oi, nq, mk, d, e] {
            const double* g = oi->grad.data();
            const double* qd2 = qi->data.data();
            const double* kd2 = ki->data.data();
            const double* vd2 = vi->data.data();
            if (qi->requires_grad) {
                // Re-run the forward prefix: dq_i = g_i . S_i^T.
                auto& gq = ensure_grad(*qi);
                std::vector<double> acc(d * e, 0.0);
                for (std::size_t i = 0; i < nq; ++i) {
                    if (i < mk) {
                        for (std::size_t a = 0; a < d; ++a) {
                            const double kv = kd2[i * d + a];
                            for (std::size_t b = 0; b < e; ++b) acc[a * e + b] += kv * vd2[i * e + b];
                        }
                    }
                    for (std::size_t a = 0; a < d; ++a) {
                        double s = 0.0;
                        for (std::size_t b = 0; b < e; ++b) s += g[i * e + b] * acc[a * e + b];
                        gq[i * d + a] += s;
                    }
                }
            }
            if (ki->requires_grad || vi->requires_grad) {
                // Suffix accumulator Z_j = sum_{i >= j} q_i^T g_i gives
                // dk_j = Z_j v_j and dv_j = Z_j^T k_j.
                std::vector<double> suffix(d * e, 0.0);
                std::vector<double>* gk = ki->requires_grad ? &ensure_grad(*ki) : nullptr;
                std::vector<double>* gv = vi->requires_grad ? &ensure_grad(*vi) : nullptr;
                for (std::size_t j = mk; j-- > 0;) {
                    if (j < nq) {
                        for (std::size_t a = 0; a < d; ++a) {
                            const double qv = qd2[j * d + a];
                            for (std::size_t b = 0; b < e; ++b) {
                                suffix[a * e + b] += qv * g[j * e + b];
                            }
                        }
                    }
                    if (gk) {
                        for (std::size_t a = 0; a < d; ++a) {
                            double s = 0.0;
                            for (std::size_t b = 0; b < e; ++b) s += suffix[a * e + b] * vd2[j * e + b];
                            (*gk)[j * d + a] += s;
                        }
                    }
                    if (gv) {
                        for (std::size_t b = 0; b < e; ++b) {
                            double s = 0.0;
                            for (std::size_t a = 0; a < d; ++a) s += suffix[a * e + b] * kd2[j * d + a];
                            (*gv)[j * e + b] += s;
                        }
                    }
                }
            }
        });
    }
    return result;
}

} // namespace coslin
