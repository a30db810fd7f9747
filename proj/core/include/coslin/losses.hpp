#pragma once

#include "coslin/tensor.hpp"

namespace coslin {

/// Hybrid-loss weights: lambda mixes the soft-DTW term into the MSE term,
/// gamma is the soft-min temperature of the alignment recursion.
struct LossConfig {
    double lambda = 0.5;
    double gamma = 1.0;
};

/// Mean squared error over equal-length series.
Tensor mse(const Tensor& y, const Tensor& y_hat);

/// Soft dynamic time warping with squared-difference ground cost:
///   r(i,j) = d(y_i, yhat_j) + softmin_gamma{r(i-1,j), r(i,j-1), r(i-1,j-1)}
/// where softmin_gamma(a) = -gamma log sum exp(-a/gamma), evaluated with
/// max-shift stabilization. Returns r(T1,T2). The gradient is the exact
/// reverse pass over alignment probabilities, not a finite-difference
/// approximation. Values can be negative for small inputs; no clamping is
/// applied (the loss is used for optimization, never for reporting).
Tensor soft_dtw(const Tensor& y, const Tensor& y_hat, double gamma);

/// mse(y, yhat) + lambda * soft_dtw(y, yhat, gamma).
Tensor hybrid_loss(const Tensor& y, const Tensor& y_hat, const LossConfig& config);

} // namespace coslin
