#include "coslin/attention.hpp"

#include <cmath>
#include <memory>

namespace coslin {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

void validate_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
    if (!q.is_matrix() || !k.is_matrix() || !v.is_matrix()) {
        throw ShapeError(std::string(op) + ": q, k, v must be 2-d tensors");
    }
    if (q.cols() != k.cols()) {
        throw ShapeError(std::string(op) + ": q feature dim " + std::to_string(q.cols()) +
                         " != k feature dim " + std::to_string(k.cols()));
    }
    if (k.rows() != v.rows()) {
        throw ShapeError(std::string(op) + ": k has " + std::to_string(k.rows()) +
                         " rows but v has " + std::to_string(v.rows()));
    }
}

std::size_t resolve_horizon(const AttentionConfig& config, std::size_t n, std::size_t m_keys,
                            const char* op) {
    if (config.epsilon <= 0.0) {
        throw ConfigError(std::string(op) + ": epsilon must be positive");
    }
    if (config.horizon_m == 0) return std::max(n, m_keys);
    if (config.horizon_m < 0 || static_cast<std::size_t>(config.horizon_m) < std::max(n, m_keys)) {
        throw ConfigError(std::string(op) + ": horizon M=" + std::to_string(config.horizon_m) +
                          " must be >= both sequence lengths (" + std::to_string(n) + ", " +
                          std::to_string(m_keys) + ")");
    }
    return static_cast<std::size_t>(config.horizon_m);
}

/// Elementwise product of a score matrix with the variant's position weight
/// (and the causal 0/1 mask). The coefficients are constants, so backward is
/// the same elementwise scaling of the incoming gradient; they are recomputed
/// rather than stored to keep the direct form's footprint at one N x M block.
Tensor reweight_scores(const Tensor& scores, std::size_t horizon, AttentionVariant variant,
                       bool causal) {
    const std::size_t n = scores.rows(), m = scores.cols();
    auto coeff = [horizon, variant, causal](std::size_t i, std::size_t j) -> double {
        if (causal && j > i) return 0.0;
        switch (variant) {
            case AttentionVariant::Linear:
                return 1.0;
            case AttentionVariant::Cos:
                return cos_gap_weight(static_cast<long long>(i) - static_cast<long long>(j),
                                      static_cast<long long>(horizon));
            case AttentionVariant::CosSquare:
                return cos_square_gap_weight(static_cast<long long>(i) - static_cast<long long>(j),
                                             static_cast<long long>(horizon));
            default:
                throw ConfigError("reweight_scores: softmax has no position weight");
        }
    };
    std::vector<double> out(n * m);
    const auto& sd = scores.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = sd[i * m + j] * coeff(i, j);
    }
    Tensor result = detail::op_output({n, m}, std::move(out), {&scores}, "reweight_scores");
    if (result.requires_grad()) {
        auto si = scores.impl();
        auto oi = result.impl();
        active_tape()->record(oi, [si, oi, n, m, coeff] {
            auto& gs = detail::grad_buffer(*si);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) gs[i * m + j] += oi->grad[i * m + j] * coeff(i, j);
            }
        });
    }
    return result;
}

} // namespace

const char* variant_name(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::Softmax: return "softmax";
        case AttentionVariant::Linear: return "linear";
        case AttentionVariant::Cos: return "cos";
        case AttentionVariant::CosSquare: return "cos-square";
    }
    return "?";
}

std::optional<AttentionVariant> parse_variant(const std::string& name) {
    if (name == "softmax") return AttentionVariant::Softmax;
    if (name == "linear") return AttentionVariant::Linear;
    if (name == "cos") return AttentionVariant::Cos;
    if (name == "cos-square" || name == "cossquare") return AttentionVariant::CosSquare;
    return std::nullopt;
}

double cos_gap_weight(long long gap, long long m) {
    if (m < 1 || std::llabs(gap) > m) {
        throw std::domain_error("cos_gap_weight: need m >= 1 and |gap| <= m, got gap=" +
                                std::to_string(gap) + " m=" + std::to_string(m));
    }
    return std::cos(kPi * static_cast<double>(gap) / (2.0 * static_cast<double>(m)));
}

double cos_square_gap_weight(long long gap, long long m) {
    const double c = cos_gap_weight(gap, m);
    return c * c;
}

double cos_square_weight(int i, int j, int m) {
    if (i < 1 || j < 1) throw std::domain_error("cos_square_weight: positions are 1-based");
    if (m < std::max(i, j)) {
        throw std::domain_error("cos_square_weight: M=" + std::to_string(m) +
                                " < max(i,j)=" + std::to_string(std::max(i, j)));
    }
    return cos_square_gap_weight(i - j, m);
}

double cos_weight(int i, int j, int m) {
    if (i < 1 || j < 1) throw std::domain_error("cos_weight: positions are 1-based");
    if (m < std::max(i, j)) {
        throw std::domain_error("cos_weight: M=" + std::to_string(m) +
                                " < max(i,j)=" + std::to_string(std::max(i, j)));
    }
    return cos_gap_weight(i - j, m);
}

Tensor feature_map(const Tensor& x) { return relu(x); }

AttentionOutput softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal) {
    validate_qkv(q, k, v, "softmax_attention");
    Tensor scores = matmul(q, transpose(k));
    if (causal) {
        // Additive mask; -1e30 underflows to exactly 0 after the shifted exp.
        const std::size_t n = scores.rows(), m = scores.cols();
        std::vector<double> mask(n * m, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < m; ++j) mask[i * m + j] = -1e30;
        }
        scores = add(scores, Tensor::from({n, m}, std::move(mask)));
    }
    Tensor weights = softmax_rows(scores);
    return AttentionOutput{matmul(weights, v), weights};
}

AttentionOutput reweighted_attention_direct(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const AttentionConfig& config) {
    validate_qkv(q, k, v, "reweighted_attention_direct");
    if (config.variant == AttentionVariant::Softmax) {
        throw ConfigError("reweighted_attention_direct: use softmax_attention for the softmax variant");
    }
    const std::size_t horizon = resolve_horizon(config, q.rows(), k.rows(), "reweighted_attention_direct");

    Tensor scores = matmul(feature_map(q), transpose(feature_map(k)));
    scores = reweight_scores(scores, horizon, config.variant, config.causal);
    Tensor denom = add_scalar(row_sum(scores), config.epsilon);
    Tensor output = div_cols(matmul(scores, v), denom);
    return AttentionOutput{output, normalize_rows(scores)};
}

AttentionOutput cos_square_attention_linear(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const AttentionConfig& config) {
    validate_qkv(q, k, v, "cos_square_attention_linear");
    if (config.variant != AttentionVariant::CosSquare) {
        throw ConfigError("cos_square_attention_linear: only the cos-square variant streams");
    }
    const std::size_t n = q.rows(), m_keys = k.rows();
    const std::size_t horizon = resolve_horizon(config, n, m_keys, "cos_square_attention_linear");
    const double inv_m = 1.0 / static_cast<double>(horizon);

    Tensor qt = feature_map(q);
    Tensor kt = feature_map(k);

    // Angles are 1-based: position p (0-based storage) maps to pi (p+1) / M.
    std::vector<double> qcos(n), qsin(n), kcos(m_keys), ksin(m_keys);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = kPi * static_cast<double>(i + 1) * inv_m;
        qcos[i] = std::cos(a);
        qsin[i] = std::sin(a);
    }
    for (std::size_t j = 0; j < m_keys; ++j) {
        const double a = kPi * static_cast<double>(j + 1) * inv_m;
        kcos[j] = std::cos(a);
        ksin[j] = std::sin(a);
    }
    Tensor qc = scale_rows(qt, qcos);
    Tensor qs = scale_rows(qt, qsin);
    Tensor kc = scale_rows(kt, kcos);
    Tensor ks = scale_rows(kt, ksin);

    Tensor numer, denom_raw;
    if (config.causal) {
        Tensor ones = Tensor::full({m_keys, 1}, 1.0);
        numer = add(add(causal_dot_prefix(qt, kt, v), causal_dot_prefix(qc, kc, v)),
                    causal_dot_prefix(qs, ks, v));
        denom_raw = add(add(causal_dot_prefix(qt, kt, ones), causal_dot_prefix(qc, kc, ones)),
                        causal_dot_prefix(qs, ks, ones));
    } else {
        numer = add(add(matmul(qt, matmul(transpose(kt), v)), matmul(qc, matmul(transpose(kc), v))),
                    matmul(qs, matmul(transpose(ks), v)));
        denom_raw = add(add(matmul(qt, row_sum(transpose(kt))), matmul(qc, row_sum(transpose(kc)))),
                        matmul(qs, row_sum(transpose(ks))));
    }
    // The decomposition carries a 1/2 prefactor; keeping it makes the
    // epsilon-stabilized denominator identical to the direct form's.
    Tensor denom = add_scalar(mul_scalar(denom_raw, 0.5), config.epsilon);
    Tensor output = div_cols(mul_scalar(numer, 0.5), denom);
    return AttentionOutput{output, std::nullopt};
}

AttentionOutput attend(const Tensor& q, const Tensor& k, const Tensor& v,
                       const AttentionConfig& config, bool prefer_streaming) {
    if (config.variant == AttentionVariant::Softmax) {
        return softmax_attention(q, k, v, config.causal);
    }
    if (prefer_streaming && config.variant == AttentionVariant::CosSquare) {
        return cos_square_attention_linear(q, k, v, config);
    }
    return reweighted_attention_direct(q, k, v, config);
}

Tensor mean_head_attention_map(const std::vector<Tensor>& maps) {
    if (maps.empty()) {
        throw std::invalid_argument("mean_head_attention_map: need at least one head map");
    }
    const Shape& shape = maps[0].shape();
    for (const Tensor& m : maps) {
        if (m.shape() != shape) {
            throw ShapeError("mean_head_attention_map: head maps disagree in shape");
        }
    }
    std::vector<double> out(maps[0].size(), 0.0);
    const double inv = 1.0 / static_cast<double>(maps.size());
    for (const Tensor& m : maps) {
        const auto& d = m.data();
        for (std::size_t i = 0; i < d.size(); ++i) out[i] += d[i] * inv;
    }
    return Tensor::from(shape, std::move(out));
}

} // namespace coslin
