#pragma once

#include <cstdint>
#include <vector>

#include "bmt/attention.hpp"
#include "bmt/data.hpp"
#include "bmt/encoder.hpp"
#include "bmt/model.hpp"
#include "bmt/tensor.hpp"

namespace bmt {

// One decoder layer: causal caption self-attention, two parallel cross
// attentions over the encoder streams (both take queries from the same
// self-attended captions), the bridge fusing the concatenation back to d_c
// (no residual there, dropout before the ReLU), then the position-wise net.
inline Tensor decoder_layer(const Tensor& caption_prev, const BiModalFeatures& enc,
                            const DecoderLayerParams& p, const std::vector<uint8_t>& caption_valid,
                            const ModelConfig& cfg, const TrainContext& ctx) {
    if (caption_prev.rank() != 2 || caption_prev.rows() == 0)
        throw ContractError("decoder_layer: caption input must have at least the start token");
    if (caption_prev.cols() != static_cast<size_t>(cfg.d_c))
        throw DimensionError("decoder_layer: caption width " + shape_str(caption_prev.shape()) +
                             " does not match configured d_c=" + std::to_string(cfg.d_c));
    const size_t t = caption_prev.rows();
    if (caption_valid.size() != t)
        throw DimensionError("decoder_layer: caption mask length does not match sequence length");

    const auto self_cfg = self_attention_config(cfg.d_c, cfg.heads, cfg.dropout);
    const auto cross_a_cfg = cross_attention_config(cfg.d_c, cfg.d_a, cfg.heads, cfg.d_internal, cfg.dropout);
    const auto cross_v_cfg = cross_attention_config(cfg.d_c, cfg.d_v, cfg.heads, cfg.d_internal, cfg.dropout);

    const AttentionMask self_mask = AttentionMask::causal_padding(caption_valid);
    const AttentionMask cross_audio = AttentionMask::padding(t, enc.audio_valid);
    const AttentionMask cross_visual = AttentionMask::padding(t, enc.visual_valid);

    Tensor c_self = detail::residual_block(caption_prev, p.ln_self, cfg.dropout, ctx, [&](Tensor x) {
        return multi_head_attention(x, x, x, self_cfg, p.self_att, &self_mask, ctx);
    });

    Tensor c_av = detail::residual_block(c_self, p.ln_cross_a, cfg.dropout, ctx, [&](Tensor x) {
        return multi_head_attention(x, enc.audio, enc.audio, cross_a_cfg, p.cross_a, &cross_audio, ctx);
    });
    Tensor c_va = detail::residual_block(c_self, p.ln_cross_v, cfg.dropout, ctx, [&](Tensor x) {
        return multi_head_attention(x, enc.visual, enc.visual, cross_v_cfg, p.cross_v, &cross_visual, ctx);
    });

    // Bridge: [t x 2*d_c] -> [t x d_c].
    Tensor fused = add_bias(matmul(concat_cols(c_av, c_va), p.bridge_W), p.bridge_b);
    if (ctx.train && cfg.dropout > 0.0) fused = dropout(fused, cfg.dropout, *ctx.rng);
    Tensor c_mm = relu(fused);

    return detail::residual_block(c_mm, p.ln_ffn, cfg.dropout, ctx, [&](Tensor x) {
        return detail::position_wise_ffn(x, p.ffn, cfg.dropout, ctx);
    });
}

// Embeds the token ids, adds positional encoding, runs the decoder stack and
// the final LayerNorm. Returns the caption features C_av [t x d_c].
inline Tensor caption_forward(const std::vector<int>& token_ids,
                              const std::vector<uint8_t>& caption_valid, const BiModalFeatures& enc,
                              const CaptionerParams& params, const ModelConfig& cfg,
                              const TrainContext& ctx) {
    if (token_ids.empty()) throw ContractError("caption_forward: empty token sequence");
    Tensor c = rows_select(params.embedding, token_ids);
    c = add(c, positional_encoding(c.rows(), c.cols()));
    if (ctx.train && cfg.dropout > 0.0) c = dropout(c, cfg.dropout, *ctx.rng);
    for (const auto& layer : params.decoder.layers)
        c = decoder_layer(c, enc, layer, caption_valid, cfg, ctx);
    return layer_norm(c, params.decoder.final_ln.gain, params.decoder.final_ln.bias);
}

// Row-stochastic next-word distributions, one row per position.
inline Tensor generate_distribution(const Tensor& caption_features, const GeneratorParams& p) {
    return softmax_rows(add_bias(matmul(caption_features, p.W), p.b));
}

inline Tensor caption_distribution(const std::vector<int>& token_ids,
                                   const std::vector<uint8_t>& caption_valid,
                                   const BiModalFeatures& enc, const CaptionerParams& params,
                                   const ModelConfig& cfg, const TrainContext& ctx) {
    return generate_distribution(caption_forward(token_ids, caption_valid, enc, params, cfg, ctx),
                                 params.generator);
}

struct GreedyResult {
    std::vector<int> tokens; // without the start/end specials
    bool truncated = false;
};

// Deterministic greedy decode: argmax each step (ties to the smallest id),
// stops at the end token or max_len.
inline GreedyResult greedy_caption(const BiModalFeatures& enc, const CaptionerParams& params,
                                   const ModelConfig& cfg, size_t max_len) {
    if (max_len < 1) throw ContractError("greedy_caption: max_len must be >= 1");
    const TrainContext ctx = TrainContext::eval();
    GreedyResult result;
    std::vector<int> prefix = {Vocabulary::start_id};
    for (size_t step = 0; step < max_len; ++step) {
        const std::vector<uint8_t> valid(prefix.size(), 1);
        Tensor dist = caption_distribution(prefix, valid, enc, params, cfg, ctx);
        const size_t last = dist.rows() - 1;
        int best = 0;
        double best_p = -1.0;
        for (size_t j = 0; j < dist.cols(); ++j)
            if (dist.at(last, j) > best_p) {
                best_p = dist.at(last, j);
                best = static_cast<int>(j);
            }
        if (best == Vocabulary::end_id) return result;
        result.tokens.push_back(best);
        prefix.push_back(best);
    }
    result.truncated = true;
    return result;
}

} // namespace bmt
