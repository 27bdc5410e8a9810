#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "bmt/attention.hpp"
#include "bmt/data.hpp"
#include "bmt/model.hpp"
#include "bmt/tensor.hpp"

namespace bmt {

// Encoder output: visual-attended audio features and audio-attended visual
// features, with the pad masks carried along for downstream attention.
struct BiModalFeatures {
    Tensor audio;  // [T_a x d_a]
    Tensor visual; // [T_v x d_v]
    std::vector<uint8_t> audio_valid;
    std::vector<uint8_t> visual_valid;
};

// Sinusoid table: PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(same).
inline Tensor positional_encoding(size_t T, size_t d) {
    if (d % 2 != 0)
        throw ConfigError("positional_encoding requires an even feature size, got " +
                          std::to_string(d));
    std::vector<double> v(T * d);
    for (size_t p = 0; p < T; ++p)
        for (size_t i = 0; i < d / 2; ++i) {
            const double rate = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
            const double angle = static_cast<double>(p) / rate;
            v[p * d + 2 * i] = std::sin(angle);
            v[p * d + 2 * i + 1] = std::cos(angle);
        }
    return Tensor::from_values({T, d}, std::move(v));
}

namespace detail {

// Pre-norm residual wrapper: x + Dropout(sublayer(LayerNorm(x))).
template <class Sublayer>
Tensor residual_block(const Tensor& x, const LayerNormParams& ln, double dropout_p,
                      const TrainContext& ctx, Sublayer sublayer) {
    Tensor out = sublayer(layer_norm(x, ln.gain, ln.bias));
    if (ctx.train && dropout_p > 0.0) out = dropout(out, dropout_p, *ctx.rng);
    return add(x, out);
}

// Position-wise d -> 4d -> d network, dropout between the two layers.
inline Tensor position_wise_ffn(const Tensor& x, const FfnParams& p, double dropout_p,
                                const TrainContext& ctx) {
    Tensor h = relu(add_bias(matmul(x, p.W1), p.b1));
    if (ctx.train && dropout_p > 0.0) h = dropout(h, dropout_p, *ctx.rng);
    return add_bias(matmul(h, p.W2), p.b2);
}

} // namespace detail

struct EncoderLayerMasks {
    AttentionMask self_audio, self_visual, cross_audio, cross_visual;
};

inline EncoderLayerMasks make_encoder_masks(const std::vector<uint8_t>& audio_valid,
                                            const std::vector<uint8_t>& visual_valid) {
    EncoderLayerMasks m;
    m.self_audio = AttentionMask::padding(audio_valid.size(), audio_valid);
    m.self_visual = AttentionMask::padding(visual_valid.size(), visual_valid);
    m.cross_audio = AttentionMask::padding(audio_valid.size(), visual_valid);   // audio queries, visual keys
    m.cross_visual = AttentionMask::padding(visual_valid.size(), audio_valid);  // visual queries, audio keys
    return m;
}

// One bi-modal layer: per-modality self-attention, cross attention with
// queries from one stream and keys/values from the other, then per-modality
// position-wise networks. Every sub-layer is wrapped pre-norm with a residual.
inline std::pair<Tensor, Tensor> encoder_layer(const Tensor& audio_prev, const Tensor& visual_prev,
                                               const EncoderLayerParams& p,
                                               const EncoderLayerMasks& masks,
                                               const ModelConfig& cfg, const TrainContext& ctx) {
    if (audio_prev.cols() != static_cast<size_t>(cfg.d_a) ||
        visual_prev.cols() != static_cast<size_t>(cfg.d_v))
        throw DimensionError("encoder_layer: inputs " + shape_str(audio_prev.shape()) + ", " +
                             shape_str(visual_prev.shape()) + " do not match configured d_a=" +
                             std::to_string(cfg.d_a) + ", d_v=" + std::to_string(cfg.d_v));

    const auto self_a_cfg = self_attention_config(cfg.d_a, cfg.heads, cfg.dropout);
    const auto self_v_cfg = self_attention_config(cfg.d_v, cfg.heads, cfg.dropout);
    const auto cross_a_cfg = cross_attention_config(cfg.d_a, cfg.d_v, cfg.heads, cfg.d_internal, cfg.dropout);
    const auto cross_v_cfg = cross_attention_config(cfg.d_v, cfg.d_a, cfg.heads, cfg.d_internal, cfg.dropout);

    Tensor audio_self = detail::residual_block(audio_prev, p.ln_self_a, cfg.dropout, ctx, [&](Tensor x) {
        return multi_head_attention(x, x, x, self_a_cfg, p.self_a, &masks.self_audio, ctx);
    });
    Tensor visual_self = detail::residual_block(visual_prev, p.ln_self_v, cfg.dropout, ctx, [&](Tensor x) {
        return multi_head_attention(x, x, x, self_v_cfg, p.self_v, &masks.self_visual, ctx);
    });

    Tensor audio_mm = detail::residual_block(audio_self, p.ln_cross_a, cfg.dropout, ctx, [&](Tensor x) {
        return multi_head_attention(x, visual_self, visual_self, cross_a_cfg, p.cross_a,
                                    &masks.cross_audio, ctx);
    });
    Tensor visual_mm = detail::residual_block(visual_self, p.ln_cross_v, cfg.dropout, ctx, [&](Tensor x) {
        return multi_head_attention(x, audio_self, audio_self, cross_v_cfg, p.cross_v,
                                    &masks.cross_visual, ctx);
    });

    Tensor audio_fc = detail::residual_block(audio_mm, p.ln_ffn_a, cfg.dropout, ctx, [&](Tensor x) {
        return detail::position_wise_ffn(x, p.ffn_a, cfg.dropout, ctx);
    });
    Tensor visual_fc = detail::residual_block(visual_mm, p.ln_ffn_v, cfg.dropout, ctx, [&](Tensor x) {
        return detail::position_wise_ffn(x, p.ffn_v, cfg.dropout, ctx);
    });

    return {audio_fc, visual_fc};
}

// Full encoder: positional encoding (with dropout on its output), then the
// layer stack. Shapes are preserved end to end.
inline BiModalFeatures encode(const Tensor& audio, const Tensor& visual,
                              std::vector<uint8_t> audio_valid, std::vector<uint8_t> visual_valid,
                              const EncoderParams& params, const ModelConfig& cfg,
                              const TrainContext& ctx) {
    if (audio.rank() != 2 || visual.rank() != 2)
        throw DimensionError("encode expects rank-2 feature matrices");
    if (audio.rows() == 0 || visual.rows() == 0)
        throw ContractError("encode: empty feature sequence");
    if (audio_valid.size() != audio.rows() || visual_valid.size() != visual.rows())
        throw DimensionError("encode: pad mask lengths do not match feature lengths");
    if (static_cast<int>(params.layers.size()) != cfg.num_layers)
        throw ConfigError("encode: parameter stack has " + std::to_string(params.layers.size()) +
                          " layers, config says " + std::to_string(cfg.num_layers));

    Tensor a = add(audio, positional_encoding(audio.rows(), audio.cols()));
    Tensor v = add(visual, positional_encoding(visual.rows(), visual.cols()));
    if (ctx.train && cfg.dropout > 0.0) {
        a = dropout(a, cfg.dropout, *ctx.rng);
        v = dropout(v, cfg.dropout, *ctx.rng);
    }

    const EncoderLayerMasks masks = make_encoder_masks(audio_valid, visual_valid);
    for (const auto& layer : params.layers) {
        auto [a_next, v_next] = encoder_layer(a, v, layer, masks, cfg, ctx);
        a = a_next;
        v = v_next;
    }

    BiModalFeatures out;
    out.audio = a;
    out.visual = v;
    out.audio_valid = std::move(audio_valid);
    out.visual_valid = std::move(visual_valid);
    return out;
}

inline Tensor features_to_tensor(const FeatureSequence& f) {
    return Tensor::from_values({f.T, f.d}, f.values);
}

// Convenience entry point from raw feature tracks (no padding).
inline BiModalFeatures encode(const FeatureSequence& audio, const FeatureSequence& visual,
                              const EncoderParams& params, const ModelConfig& cfg,
                              const TrainContext& ctx) {
    return encode(features_to_tensor(audio), features_to_tensor(visual),
                  std::vector<uint8_t>(audio.T, 1), std::vector<uint8_t>(visual.T, 1), params, cfg,
                  ctx);
}

} // namespace bmt
