#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bmt/errors.hpp"
#include "bmt/model.hpp"
#include "bmt/tensor.hpp"

namespace bmt {

// Boolean attention pattern over [T_q x T_k]; true = the query may attend.
struct AttentionMask {
    enum class Kind { padding, causal, combined };

    Kind kind = Kind::padding;
    BoolMask matrix;

    static AttentionMask padding(size_t t_q, const std::vector<uint8_t>& key_valid) {
        AttentionMask m;
        m.kind = Kind::padding;
        m.matrix = BoolMask(t_q, key_valid.size(), false);
        for (size_t i = 0; i < t_q; ++i)
            for (size_t j = 0; j < key_valid.size(); ++j)
                if (key_valid[j]) m.matrix.set(i, j, true);
        return m;
    }

    static AttentionMask causal(size_t t) {
        AttentionMask m;
        m.kind = Kind::causal;
        m.matrix = BoolMask(t, t, false);
        for (size_t i = 0; i < t; ++i)
            for (size_t j = 0; j <= i; ++j) m.matrix.set(i, j, true);
        return m;
    }

    // Lower-triangular AND key validity; for right-padded sequences the causal
    // part already hides the pad keys from real queries.
    static AttentionMask causal_padding(const std::vector<uint8_t>& key_valid) {
        AttentionMask m = causal(key_valid.size());
        m.kind = Kind::combined;
        for (size_t i = 0; i < key_valid.size(); ++i)
            for (size_t j = 0; j <= i; ++j)
                if (!key_valid[j]) m.matrix.set(i, j, false);
        return m;
    }
};

// Softmax(Q K^T / sqrt(d)) V with optional masking; dropout lands on the
// attention weights, after the softmax.
inline Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                           const AttentionMask* mask, double dropout_p,
                                           const TrainContext& ctx) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw DimensionError("attention expects rank-2 q/k/v");
    if (q.cols() != k.cols())
        throw DimensionError("attention: query width " + shape_str(q.shape()) +
                             " does not match key width " + shape_str(k.shape()));
    if (k.rows() != v.rows())
        throw DimensionError("attention: key count " + shape_str(k.shape()) +
                             " does not match value count " + shape_str(v.shape()));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Tensor logits = scale(matmul(q, transpose(k)), inv_sqrt_d);
    Tensor weights = softmax_rows(logits, mask ? &mask->matrix : nullptr);
    if (ctx.train && dropout_p > 0.0) weights = dropout(weights, dropout_p, *ctx.rng);
    return matmul(weights, v);
}

// Multi-headed attention over possibly distinct query/key widths. Each head
// projects into a d_internal/H slice; concatenated heads map back to D_q.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const MultiHeadConfig& cfg, const AttentionParams& params,
                                   const AttentionMask* mask, const TrainContext& ctx) {
    if (cfg.d_internal % cfg.heads != 0)
        throw ConfigError("multi_head_attention: internal width " + std::to_string(cfg.d_internal) +
                          " is not divisible by heads=" + std::to_string(cfg.heads));
    if (q.cols() != static_cast<size_t>(cfg.d_q))
        throw DimensionError("multi_head_attention: query shape " + shape_str(q.shape()) +
                             " does not match configured D_q=" + std::to_string(cfg.d_q));
    if (k.cols() != static_cast<size_t>(cfg.d_k) || v.cols() != static_cast<size_t>(cfg.d_k))
        throw DimensionError("multi_head_attention: key/value shapes " + shape_str(k.shape()) +
                             ", " + shape_str(v.shape()) + " do not match configured D_k=" +
                             std::to_string(cfg.d_k));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
        const auto hs = static_cast<size_t>(h);
        Tensor qh = matmul(q, params.Wq[hs]);
        Tensor kh = matmul(k, params.Wk[hs]);
        Tensor vh = matmul(v, params.Wv[hs]);
        heads.push_back(scaled_dot_product_attention(qh, kh, vh, mask, cfg.dropout, ctx));
    }
    return matmul(concat_cols(heads), params.Wout);
}

} // namespace bmt
