#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "bmt/errors.hpp"

namespace bmt {

// Dimensions of the bi-modal transformer. d_internal is the total internal
// attention width of the bi-modal (cross) blocks; self-attention blocks use
// their own query width. The feed-forward hidden width is fixed at 4x.
struct ModelConfig {
    int d_a = 128;
    int d_v = 1024;
    int d_c = 300;
    int num_layers = 2;
    int heads = 4;
    int d_internal = 1024;
    double dropout = 0.1;
    int vocab_size = 0; // resolved from data when 0

    static constexpr int ff_multiplier = 4;
};

struct ProposalConfig {
    int anchors_audio = 48;
    int anchors_visual = 128;
    int kernel_count = 10;              // K_a == K_v
    std::vector<int> kernels_audio;     // empty -> estimated from annotations
    std::vector<int> kernels_visual;
    int head_hidden = 512;
    double head_dropout = 0.1;
    int pad_audio = 800;
    int pad_visual = 300;
};

enum class StageOrder { separate, cap_then_prop, prop_then_cap };

inline const char* stage_order_name(StageOrder s) {
    switch (s) {
        case StageOrder::separate: return "separate";
        case StageOrder::cap_then_prop: return "cap_then_prop";
        default: return "prop_then_cap";
    }
}

inline StageOrder stage_order_from_string(const std::string& s) {
    if (s == "separate") return StageOrder::separate;
    if (s == "cap_then_prop") return StageOrder::cap_then_prop;
    if (s == "prop_then_cap") return StageOrder::prop_then_cap;
    throw ConfigError("unknown stage order \"" + s + "\"");
}

struct TrainConfig {
    StageOrder stage_order = StageOrder::cap_then_prop;
    double label_smoothing = 0.7;
    double learning_rate = 5e-5;
    int caption_batch_size = 32;
    int proposal_batch_size = 16;
    double coeff_loc = 1.0;
    double coeff_obj = 1.0;
    double coeff_noobj = 100.0;
    int max_epochs = 0;        // 0 = unbounded (max_steps governs)
    int max_steps = 0;         // 0 = unbounded (max_epochs governs)
    int early_stop_patience = 30;
    uint64_t seed = 1;
};

// ---------------------------------------------------------------------------
// JSON binding
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& field) {
    if (j.contains(key)) field = j.at(key).get<T>();
}

} // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    detail::maybe(j, "d_a", c.d_a);
    detail::maybe(j, "d_v", c.d_v);
    detail::maybe(j, "d_c", c.d_c);
    detail::maybe(j, "num_layers", c.num_layers);
    detail::maybe(j, "heads", c.heads);
    detail::maybe(j, "d_internal", c.d_internal);
    detail::maybe(j, "dropout", c.dropout);
    detail::maybe(j, "vocab_size", c.vocab_size);
    return c;
}

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
    return {{"d_a", c.d_a},           {"d_v", c.d_v},
            {"d_c", c.d_c},           {"num_layers", c.num_layers},
            {"heads", c.heads},       {"d_internal", c.d_internal},
            {"dropout", c.dropout},   {"vocab_size", c.vocab_size}};
}

inline nlohmann::ordered_json proposal_config_to_json(const ProposalConfig& c) {
    return {{"anchors_audio", c.anchors_audio},   {"anchors_visual", c.anchors_visual},
            {"kernel_count", c.kernel_count},     {"kernels_audio", c.kernels_audio},
            {"kernels_visual", c.kernels_visual}, {"head_hidden", c.head_hidden},
            {"head_dropout", c.head_dropout},     {"pad_audio", c.pad_audio},
            {"pad_visual", c.pad_visual}};
}

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
    return {{"stage_order", stage_order_name(c.stage_order)},
            {"label_smoothing", c.label_smoothing},
            {"learning_rate", c.learning_rate},
            {"caption_batch_size", c.caption_batch_size},
            {"proposal_batch_size", c.proposal_batch_size},
            {"coeff_loc", c.coeff_loc},
            {"coeff_obj", c.coeff_obj},
            {"coeff_noobj", c.coeff_noobj},
            {"max_epochs", c.max_epochs},
            {"max_steps", c.max_steps},
            {"early_stop_patience", c.early_stop_patience},
            {"seed", c.seed}};
}

inline ProposalConfig proposal_config_from_json(const nlohmann::json& j) {
    ProposalConfig c;
    detail::maybe(j, "anchors_audio", c.anchors_audio);
    detail::maybe(j, "anchors_visual", c.anchors_visual);
    detail::maybe(j, "kernel_count", c.kernel_count);
    detail::maybe(j, "kernels_audio", c.kernels_audio);
    detail::maybe(j, "kernels_visual", c.kernels_visual);
    detail::maybe(j, "head_hidden", c.head_hidden);
    detail::maybe(j, "head_dropout", c.head_dropout);
    detail::maybe(j, "pad_audio", c.pad_audio);
    detail::maybe(j, "pad_visual", c.pad_visual);
    return c;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("stage_order")) c.stage_order = stage_order_from_string(j.at("stage_order").get<std::string>());
    detail::maybe(j, "label_smoothing", c.label_smoothing);
    detail::maybe(j, "learning_rate", c.learning_rate);
    detail::maybe(j, "caption_batch_size", c.caption_batch_size);
    detail::maybe(j, "proposal_batch_size", c.proposal_batch_size);
    detail::maybe(j, "coeff_loc", c.coeff_loc);
    detail::maybe(j, "coeff_obj", c.coeff_obj);
    detail::maybe(j, "coeff_noobj", c.coeff_noobj);
    detail::maybe(j, "max_epochs", c.max_epochs);
    detail::maybe(j, "max_steps", c.max_steps);
    detail::maybe(j, "early_stop_patience", c.early_stop_patience);
    detail::maybe(j, "seed", c.seed);
    return c;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

inline void validate_model_config(const ModelConfig& c) {
    if (c.d_a <= 0 || c.d_v <= 0 || c.d_c <= 0)
        throw ConfigError("model dims must be positive");
    if (c.num_layers < 0) throw ConfigError("num_layers must be >= 0");
    if (c.heads <= 0) throw ConfigError("heads must be positive");
    if (c.d_internal <= 0) throw ConfigError("d_internal must be positive");
    if (c.dropout < 0.0 || c.dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    for (int d : {c.d_a, c.d_v, c.d_c, c.d_internal})
        if (d % c.heads != 0)
            throw ConfigError("attention width " + std::to_string(d) +
                              " is not divisible by heads=" + std::to_string(c.heads));
}

inline void validate_proposal_config(const ProposalConfig& c) {
    if (c.anchors_audio <= 0 || c.anchors_visual <= 0)
        throw ConfigError("anchor counts must be positive");
    if (c.kernel_count <= 0) throw ConfigError("kernel_count must be positive");
    if (c.head_hidden <= 0) throw ConfigError("head_hidden must be positive");
    if (c.pad_audio <= 0 || c.pad_visual <= 0) throw ConfigError("pad lengths must be positive");
    for (const auto* list : {&c.kernels_audio, &c.kernels_visual})
        for (int k : *list)
            if (k < 1 || k % 2 == 0)
                throw ConfigError("kernel sizes must be odd and >= 1, got " + std::to_string(k));
    if (!c.kernels_audio.empty() && static_cast<int>(c.kernels_audio.size()) != c.kernel_count)
        throw ConfigError("kernels_audio length differs from kernel_count");
    if (!c.kernels_visual.empty() && static_cast<int>(c.kernels_visual.size()) != c.kernel_count)
        throw ConfigError("kernels_visual length differs from kernel_count");
}

// Pool bookkeeping: proposals = T_a*K_a*|Psi_a| + T_v*K_v*|Psi_v|; each decodes
// from three raw values.
struct PoolStats {
    uint64_t proposals = 0;
    uint64_t raw_values = 0;
};

inline PoolStats proposal_pool_size(uint64_t T_a, uint64_t K_a, uint64_t anchors_a, uint64_t T_v,
                                    uint64_t K_v, uint64_t anchors_v) {
    PoolStats s;
    s.proposals = T_a * K_a * anchors_a + T_v * K_v * anchors_v;
    s.raw_values = 3 * s.proposals;
    return s;
}

// Modality balance: T_a*|Psi_a| should equal T_v*|Psi_v| so both
// streams contribute evenly to the common pool.
struct BalanceReport {
    uint64_t audio_product = 0;
    uint64_t visual_product = 0;
    bool balanced = false;
};

inline BalanceReport modality_balance(uint64_t T_a, uint64_t anchors_a, uint64_t T_v,
                                      uint64_t anchors_v) {
    BalanceReport r;
    r.audio_product = T_a * anchors_a;
    r.visual_product = T_v * anchors_v;
    r.balanced = r.audio_product == r.visual_product;
    return r;
}

} // namespace bmt
