#include "coslin/losses.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace coslin {

namespace {

double softmin3(double a, double b, double c, double gamma) {
    a /= -gamma;
    b /= -gamma;
    c /= -gamma;
    const double mx = std::max(std::max(a, b), c);
    const double s = std::exp(a - mx) + std::exp(b - mx) + std::exp(c - mx);
    return -gamma * (std::log(s) + mx);
}

} // namespace

Tensor mse(const Tensor& y, const Tensor& y_hat) {
    if (y.shape() != y_hat.shape()) {
        throw ShapeError("mse: length mismatch, " + std::to_string(y.size()) + " vs " +
                         std::to_string(y_hat.size()));
    }
    Tensor diff = sub(y_hat, y);
    return mean(mul(diff, diff));
}

Tensor soft_dtw(const Tensor& y, const Tensor& y_hat, double gamma) {
    if (gamma <= 0.0) {
        throw std::domain_error("soft_dtw: gamma must be positive, got " + std::to_string(gamma));
    }
    const std::size_t t1 = y.size(), t2 = y_hat.size();
    const auto& a = y.data();
    const auto& b = y_hat.data();
    const double inf = std::numeric_limits<double>::infinity();

    // Alignment DP on a (t1+2) x (t2+2) grid; the outer border is reused by
    // the reverse pass.
    const std::size_t w = t2 + 2;
    std::vector<double> cost(t1 * t2);
    for (std::size_t i = 0; i < t1; ++i) {
        for (std::size_t j = 0; j < t2; ++j) {
            const double d = a[i] - b[j];
            cost[i * t2 + j] = d * d;
        }
    }
    std::vector<double> r((t1 + 2) * w, inf);
    r[0] = 0.0;
    for (std::size_t i = 1; i <= t1; ++i) {
        for (std::size_t j = 1; j <= t2; ++j) {
            r[i * w + j] = cost[(i - 1) * t2 + (j - 1)] +
                           softmin3(r[(i - 1) * w + j], r[i * w + (j - 1)],
                                    r[(i - 1) * w + (j - 1)], gamma);
        }
    }
    const double value = r[t1 * w + t2];

    Tensor result = detail::op_output({1}, {value}, {&y, &y_hat}, "soft_dtw");
    if (result.requires_grad()) {
        auto yi = y.impl();
        auto hi = y_hat.impl();
        auto oi = result.impl();
        active_tape()->record(oi, [yi, hi, oi, r = std::move(r), cost = std::move(cost), t1, t2, w,
                                   gamma, inf]() mutable {
            const double gseed = oi->grad[0];
            // Reverse DP: e(i,j) is the alignment probability mass through
            // cell (i,j); d(loss)/d(cost_ij) = e(i,j).
            std::vector<double> rr = r;
            for (std::size_t i = 1; i <= t1; ++i) rr[i * w + t2 + 1] = -inf;
            for (std::size_t j = 1; j <= t2 + 1; ++j) rr[(t1 + 1) * w + j] = -inf;
            rr[(t1 + 1) * w + (t2 + 1)] = rr[t1 * w + t2];
            auto cost_ext = [&](std::size_t i, std::size_t j) -> double {
                // 1-based; cells beyond the series carry zero cost.
                if (i > t1 || j > t2) return 0.0;
                return cost[(i - 1) * t2 + (j - 1)];
            };
            std::vector<double> e((t1 + 2) * w, 0.0);
            e[(t1 + 1) * w + (t2 + 1)] = 1.0;
            for (std::size_t j = t2; j >= 1; --j) {
                for (std::size_t i = t1; i >= 1; --i) {
                    const double rij = rr[i * w + j];
                    const double ea = std::exp((rr[(i + 1) * w + j] - rij - cost_ext(i + 1, j)) / gamma);
                    const double eb = std::exp((rr[i * w + (j + 1)] - rij - cost_ext(i, j + 1)) / gamma);
                    const double ec =
                        std::exp((rr[(i + 1) * w + (j + 1)] - rij - cost_ext(i + 1, j + 1)) / gamma);
                    e[i * w + j] = e[(i + 1) * w + j] * ea + e[i * w + (j + 1)] * eb +
                                   e[(i + 1) * w + (j + 1)] * ec;
                }
            }
            if (hi->requires_grad) {
                auto& gh = detail::grad_buffer(*hi);
                for (std::size_t j = 1; j <= t2; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 1; i <= t1; ++i) {
                        acc += e[i * w + j] * 2.0 * (hi->data[j - 1] - yi->data[i - 1]);
                    }
                    gh[j - 1] += gseed * acc;
                }
            }
            if (yi->requires_grad) {
                auto& gy = detail::grad_buffer(*yi);
                for (std::size_t i = 1; i <= t1; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 1; j <= t2; ++j) {
                        acc += e[i * w + j] * 2.0 * (yi->data[i - 1] - hi->data[j - 1]);
                    }
                    gy[i - 1] += gseed * acc;
                }
            }
        });
    }
    return result;
}

Tensor hybrid_loss(const Tensor& y, const Tensor& y_hat, const LossConfig& config) {
    if (config.lambda < 0.0) {
        throw ConfigError("hybrid_loss: lambda must be non-negative");
    }
    Tensor base = mse(y, y_hat);
    if (config.lambda == 0.0) return base;
    return add(base, mul_scalar(soft_dtw(y, y_hat, config.gamma), config.lambda));
}

} // namespace coslin
