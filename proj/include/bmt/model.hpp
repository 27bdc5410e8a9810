#pragma once

#include <map>
#include <string>
#include <vector>

#include "bmt/config.hpp"
#include "bmt/errors.hpp"
#include "bmt/rng.hpp"
#include "bmt/tensor.hpp"

namespace bmt {

// Forward-pass mode: training enables dropout and needs a generator.
struct TrainContext {
    bool train = false;
    Rng* rng = nullptr;

    static TrainContext eval() { return {}; }
    static TrainContext training(Rng& rng) { return {true, &rng}; }
};

// Flat parameter registry keyed by path, e.g. "encoder.layer0.self_att_a.Wq.head0".
// The map order (lexicographic) fixes the optimizer and checkpoint order.
struct ParamStore {
    std::map<std::string, Tensor> by_path;

    bool contains(const std::string& path) const { return by_path.count(path) != 0; }

    const Tensor& at(const std::string& path) const {
        auto it = by_path.find(path);
        if (it == by_path.end()) throw ContractError("no parameter at path " + path);
        return it->second;
    }

    void insert(const std::string& path, Tensor t) {
        if (!by_path.emplace(path, std::move(t)).second)
            throw ContractError("duplicate parameter path " + path);
    }

    void zero_grads() {
        for (auto& [path, t] : by_path) t.zero_grad();
    }

    size_t total_values() const {
        size_t n = 0;
        for (const auto& [path, t] : by_path) n += t.size();
        return n;
    }
};

// Creates parameters (seeded init), attaches to an existing store (loaded
// checkpoint), or mixes both (pre-populated encoder + fresh everything else).
// Shapes are validated either way.
class ParamBuilder {
public:
    enum class Mode { create, attach, create_or_attach };

    ParamBuilder(ParamStore& store, Rng& rng, bool trainable, Mode mode = Mode::create)
        : store_(store), rng_(&rng), mode_(mode), trainable_(trainable) {}

    // Attach-only mode: every requested parameter must already exist.
    ParamBuilder(ParamStore& store, bool trainable)
        : store_(store), rng_(nullptr), mode_(Mode::attach), trainable_(trainable) {}

    Tensor weight(const std::string& path, size_t fan_in, size_t fan_out) {
        return fetch_or_create(path, {fan_in, fan_out},
                               [&] { return Tensor::xavier(fan_in, fan_out, *rng_, trainable_); });
    }

    Tensor kernel(const std::string& path, size_t k, size_t d_in, size_t d_out) {
        const double bound = std::sqrt(6.0 / static_cast<double>(k * d_in + d_out));
        return fetch_or_create(path, {k, d_in, d_out}, [&] {
            return Tensor::uniform({k, d_in, d_out}, -bound, bound, *rng_, trainable_);
        });
    }

    Tensor zeros(const std::string& path, Shape shape) {
        return fetch_or_create(path, shape, [&] { return Tensor::zeros(shape, trainable_); });
    }

    Tensor ones(const std::string& path, Shape shape) {
        return fetch_or_create(path, shape, [&] { return Tensor::full(shape, 1.0, trainable_); });
    }

private:
    template <class Make>
    Tensor fetch_or_create(const std::string& path, const Shape& shape, Make make) {
        auto it = store_.by_path.find(path);
        if (it != store_.by_path.end()) {
            if (mode_ == Mode::create) throw ContractError("duplicate parameter path " + path);
            if (it->second.shape() != shape)
                throw FormatError("checkpoint parameter " + path + " has shape " +
                                  shape_str(it->second.shape()) + ", expected " + shape_str(shape));
            return it->second;
        }
        if (mode_ == Mode::attach)
            throw FormatError("checkpoint is missing parameter " + path);
        Tensor t = make();
        store_.insert(path, t);
        return t;
    }

    ParamStore& store_;
    Rng* rng_;
    Mode mode_;
    bool trainable_;
};

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

struct LayerNormParams {
    Tensor gain, bias;
};

struct MultiHeadConfig {
    int heads = 1;
    int d_q = 0;
    int d_k = 0;
    int d_internal = 0; // total internal width; each head projects into d_internal/heads
    double dropout = 0.0;
};

struct AttentionParams {
    std::vector<Tensor> Wq, Wk, Wv; // one per head: [D_q x D_in/H], [D_k x D_in/H]
    Tensor Wout;                    // [D_in x D_q]
};

struct FfnParams {
    Tensor W1, b1, W2, b2; // d -> 4d -> d
};

struct EncoderLayerParams {
    LayerNormParams ln_self_a, ln_self_v, ln_cross_a, ln_cross_v, ln_ffn_a, ln_ffn_v;
    AttentionParams self_a, self_v, cross_a, cross_v;
    FfnParams ffn_a, ffn_v;
};

struct EncoderParams {
    std::vector<EncoderLayerParams> layers;
};

struct DecoderLayerParams {
    LayerNormParams ln_self, ln_cross_a, ln_cross_v, ln_ffn;
    AttentionParams self_att, cross_a, cross_v;
    Tensor bridge_W, bridge_b; // [2*d_c x d_c], [d_c]
    FfnParams ffn;
};

struct DecoderParams {
    std::vector<DecoderLayerParams> layers;
    LayerNormParams final_ln;
};

struct GeneratorParams {
    Tensor W, b; // [d_c x vocab], [vocab]
};

struct CaptionerParams {
    EncoderParams encoder;
    DecoderParams decoder;
    GeneratorParams generator;
    Tensor embedding; // [vocab x d_c]
};

struct ProposalHeadParams {
    int kernel_size = 1;
    Tensor w1, b1; // [k x d x hidden]
    Tensor w2, b2; // [1 x hidden x hidden]
    Tensor w3, b3; // [1 x hidden x 3*|Psi|]
};

struct ProposalModelParams {
    EncoderParams encoder;
    std::vector<ProposalHeadParams> heads_audio, heads_visual;
};

// ---------------------------------------------------------------------------
// Builders (paths are stable: they define the checkpoint layout)
// ---------------------------------------------------------------------------

namespace detail {

inline LayerNormParams build_layer_norm(ParamBuilder& b, const std::string& prefix, size_t d) {
    LayerNormParams p;
    p.gain = b.ones(prefix + ".gain", {d});
    p.bias = b.zeros(prefix + ".bias", {d});
    return p;
}

inline AttentionParams build_attention(ParamBuilder& b, const std::string& prefix,
                                       const MultiHeadConfig& cfg) {
    if (cfg.d_internal % cfg.heads != 0)
        throw ConfigError("attention at " + prefix + ": internal width " +
                          std::to_string(cfg.d_internal) + " is not divisible by heads=" +
                          std::to_string(cfg.heads));
    const auto slice = static_cast<size_t>(cfg.d_internal / cfg.heads);
    AttentionParams p;
    for (int h = 0; h < cfg.heads; ++h) {
        const std::string hs = ".head" + std::to_string(h);
        p.Wq.push_back(b.weight(prefix + ".Wq" + hs, static_cast<size_t>(cfg.d_q), slice));
        p.Wk.push_back(b.weight(prefix + ".Wk" + hs, static_cast<size_t>(cfg.d_k), slice));
        p.Wv.push_back(b.weight(prefix + ".Wv" + hs, static_cast<size_t>(cfg.d_k), slice));
    }
    p.Wout = b.weight(prefix + ".Wout", static_cast<size_t>(cfg.d_internal),
                      static_cast<size_t>(cfg.d_q));
    return p;
}

inline FfnParams build_ffn(ParamBuilder& b, const std::string& prefix, size_t d) {
    FfnParams p;
    const size_t hidden = d * ModelConfig::ff_multiplier;
    p.W1 = b.weight(prefix + ".W1", d, hidden);
    p.b1 = b.zeros(prefix + ".b1", {hidden});
    p.W2 = b.weight(prefix + ".W2", hidden, d);
    p.b2 = b.zeros(prefix + ".b2", {d});
    return p;
}

} // namespace detail

inline MultiHeadConfig self_attention_config(int d, int heads, double dropout) {
    return {heads, d, d, d, dropout};
}

inline MultiHeadConfig cross_attention_config(int d_q, int d_k, int heads, int d_internal,
                                              double dropout) {
    return {heads, d_q, d_k, d_internal, dropout};
}

inline EncoderParams build_encoder(ParamBuilder& b, const ModelConfig& cfg) {
    EncoderParams enc;
    const auto d_a = static_cast<size_t>(cfg.d_a);
    const auto d_v = static_cast<size_t>(cfg.d_v);
    for (int n = 0; n < cfg.num_layers; ++n) {
        const std::string lp = "encoder.layer" + std::to_string(n);
        EncoderLayerParams layer;
        layer.ln_self_a = detail::build_layer_norm(b, lp + ".ln_self_a", d_a);
        layer.ln_self_v = detail::build_layer_norm(b, lp + ".ln_self_v", d_v);
        layer.ln_cross_a = detail::build_layer_norm(b, lp + ".ln_cross_a", d_a);
        layer.ln_cross_v = detail::build_layer_norm(b, lp + ".ln_cross_v", d_v);
        layer.ln_ffn_a = detail::build_layer_norm(b, lp + ".ln_ffn_a", d_a);
        layer.ln_ffn_v = detail::build_layer_norm(b, lp + ".ln_ffn_v", d_v);
        layer.self_a = detail::build_attention(b, lp + ".self_att_a",
                                               self_attention_config(cfg.d_a, cfg.heads, cfg.dropout));
        layer.self_v = detail::build_attention(b, lp + ".self_att_v",
                                               self_attention_config(cfg.d_v, cfg.heads, cfg.dropout));
        layer.cross_a = detail::build_attention(
            b, lp + ".cross_att_a",
            cross_attention_config(cfg.d_a, cfg.d_v, cfg.heads, cfg.d_internal, cfg.dropout));
        layer.cross_v = detail::build_attention(
            b, lp + ".cross_att_v",
            cross_attention_config(cfg.d_v, cfg.d_a, cfg.heads, cfg.d_internal, cfg.dropout));
        layer.ffn_a = detail::build_ffn(b, lp + ".ffn_a", d_a);
        layer.ffn_v = detail::build_ffn(b, lp + ".ffn_v", d_v);
        enc.layers.push_back(std::move(layer));
    }
    return enc;
}

inline DecoderParams build_decoder(ParamBuilder& b, const ModelConfig& cfg) {
    DecoderParams dec;
    const auto d_c = static_cast<size_t>(cfg.d_c);
    for (int n = 0; n < cfg.num_layers; ++n) {
        const std::string lp = "decoder.layer" + std::to_string(n);
        DecoderLayerParams layer;
        layer.ln_self = detail::build_layer_norm(b, lp + ".ln_self", d_c);
        layer.ln_cross_a = detail::build_layer_norm(b, lp + ".ln_cross_a", d_c);
        layer.ln_cross_v = detail::build_layer_norm(b, lp + ".ln_cross_v", d_c);
        layer.ln_ffn = detail::build_layer_norm(b, lp + ".ln_ffn", d_c);
        layer.self_att = detail::build_attention(b, lp + ".self_att",
                                                 self_attention_config(cfg.d_c, cfg.heads, cfg.dropout));
        layer.cross_a = detail::build_attention(
            b, lp + ".cross_att_audio",
            cross_attention_config(cfg.d_c, cfg.d_a, cfg.heads, cfg.d_internal, cfg.dropout));
        layer.cross_v = detail::build_attention(
            b, lp + ".cross_att_visual",
            cross_attention_config(cfg.d_c, cfg.d_v, cfg.heads, cfg.d_internal, cfg.dropout));
        layer.bridge_W = b.weight(lp + ".bridge.W", 2 * d_c, d_c);
        layer.bridge_b = b.zeros(lp + ".bridge.b", {d_c});
        layer.ffn = detail::build_ffn(b, lp + ".ffn", d_c);
        dec.layers.push_back(std::move(layer));
    }
    dec.final_ln = detail::build_layer_norm(b, "decoder.final_ln", d_c);
    return dec;
}

inline CaptionerParams build_captioner(ParamBuilder& b, const ModelConfig& cfg) {
    if (cfg.vocab_size < 4) throw ConfigError("captioner needs vocab_size >= 4 (special tokens)");
    CaptionerParams p;
    p.embedding = b.weight("embedding.table", static_cast<size_t>(cfg.vocab_size),
                           static_cast<size_t>(cfg.d_c));
    p.encoder = build_encoder(b, cfg);
    p.decoder = build_decoder(b, cfg);
    p.generator.W = b.weight("generator.W", static_cast<size_t>(cfg.d_c),
                             static_cast<size_t>(cfg.vocab_size));
    p.generator.b = b.zeros("generator.b", {static_cast<size_t>(cfg.vocab_size)});
    return p;
}

inline ProposalHeadParams build_proposal_head(ParamBuilder& b, const std::string& prefix,
                                              int kernel_size, int d_in, int hidden, int anchors) {
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw ConfigError("proposal head at " + prefix + ": kernel size must be odd, got " +
                          std::to_string(kernel_size));
    ProposalHeadParams p;
    p.kernel_size = kernel_size;
    const auto k = static_cast<size_t>(kernel_size);
    const auto d = static_cast<size_t>(d_in);
    const auto h = static_cast<size_t>(hidden);
    const auto out = static_cast<size_t>(3 * anchors);
    p.w1 = b.kernel(prefix + ".conv1.W", k, d, h);
    p.b1 = b.zeros(prefix + ".conv1.b", {h});
    p.w2 = b.kernel(prefix + ".conv2.W", 1, h, h);
    p.b2 = b.zeros(prefix + ".conv2.b", {h});
    p.w3 = b.kernel(prefix + ".conv3.W", 1, h, out);
    p.b3 = b.zeros(prefix + ".conv3.b", {out});
    return p;
}

inline ProposalModelParams build_proposal_model(ParamBuilder& b, const ModelConfig& cfg,
                                                const ProposalConfig& pcfg) {
    ProposalModelParams p;
    p.encoder = build_encoder(b, cfg);
    for (size_t i = 0; i < pcfg.kernels_audio.size(); ++i)
        p.heads_audio.push_back(build_proposal_head(
            b, "proposals.audio.head" + std::to_string(i), pcfg.kernels_audio[i],
            cfg.d_a, pcfg.head_hidden, pcfg.anchors_audio));
    for (size_t i = 0; i < pcfg.kernels_visual.size(); ++i)
        p.heads_visual.push_back(build_proposal_head(
            b, "proposals.visual.head" + std::to_string(i), pcfg.kernels_visual[i],
            cfg.d_v, pcfg.head_hidden, pcfg.anchors_visual));
    return p;
}

} // namespace bmt
