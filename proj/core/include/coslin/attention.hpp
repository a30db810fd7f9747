#pragma once

#include <optional>
#include <string>
#include <vector>

#include "coslin/tensor.hpp"

namespace coslin {

enum class AttentionVariant { Softmax, Linear, Cos, CosSquare };

const char* variant_name(AttentionVariant v);
std::optional<AttentionVariant> parse_variant(const std::string& name);

/// Selects the similarity kernel and its position re-weighting.
///
/// `horizon_m` is the re-weighting period M; it must be at least both
/// sequence lengths so the cosine weights stay non-negative. 0 means
/// "tightest legal value", i.e. max(query length, key length).
struct AttentionConfig {
    AttentionVariant variant = AttentionVariant::CosSquare;
    int horizon_m = 0;
    bool causal = false;
    double epsilon = 1e-6;
};

struct AttentionOutput {
    Tensor output;                  // [N x d2]
    std::optional<Tensor> weights;  // [N x M_keys] row-normalized map; direct forms only
};

/// Exponential-kernel attention: O_i = sum_j softmax_j(Q_i K_j^T) V_j.
/// causal=true masks keys j > i before normalization. Quadratic time/space;
/// serves as the baseline and as the oracle no linear form can replace.
AttentionOutput softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal);

/// The non-negative feature map applied to queries and keys (ReLU).
Tensor feature_map(const Tensor& x);

/// Position re-weight as a function of the index gap alone.
/// Domain: m >= 1 and |gap| <= m (the weights are non-negative there).
double cos_gap_weight(long long gap, long long m);         // cos(pi*gap / (2m))
double cos_square_gap_weight(long long gap, long long m);  // cos^2(pi*gap / (2m))

/// cos^2(pi (i-j) / (2M)) for 1-based positions i, j with M >= max(i, j).
/// Equals (1 + cos(pi (i-j) / M)) / 2 within 1e-15.
double cos_square_weight(int i, int j, int m);
double cos_weight(int i, int j, int m);

/// Quadratic-form re-weighted attention (Linear / Cos / CosSquare kernels):
///   O_i = sum_j s(Qt_i, Kt_j) V_j / (sum_j s(Qt_i, Kt_j) + epsilon)
/// with Qt = ReLU(Q), Kt = ReLU(K) and s multiplied by the variant's
/// position weight. Materializes the full N x M score matrix and populates
/// `weights` with its row-stochastic normalization (a zero score row stays
/// zero rather than NaN). causal=true restricts to j <= i.
AttentionOutput reweighted_attention_direct(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const AttentionConfig& config);

/// Streaming form of the CosSquare variant. Decomposes
///   cos^2(pi(i-j)/(2M)) = (1 + cos(pi i/M)cos(pi j/M) + sin(pi i/M)sin(pi j/M)) / 2
/// so the output reduces to three query-side contractions against [d1 x d2]
/// key/value accumulators: O((N+M) d1 d2) time, O(d1 d2) accumulator space.
/// Non-causal mode accumulates over all keys first; causal mode advances the
/// accumulators key by key. Output matches the direct form within 1e-10
/// relative; `weights` is absent (never materialized).
AttentionOutput cos_square_attention_linear(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const AttentionConfig& config);

/// Routes to the right implementation for `config.variant`;
/// `prefer_streaming` picks the linear form where one exists (CosSquare).
AttentionOutput attend(const Tensor& q, const Tensor& k, const Tensor& v,
                       const AttentionConfig& config, bool prefer_streaming = false);

/// Elementwise mean of per-head attention maps; rows stay stochastic.
Tensor mean_head_attention_map(const std::vector<Tensor>& maps);

} // namespace coslin
