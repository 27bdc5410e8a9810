#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bmt/checkpoint.hpp"
#include "bmt/config.hpp"
#include "bmt/data.hpp"
#include "bmt/decoder.hpp"
#include "bmt/encoder.hpp"
#include "bmt/errors.hpp"
#include "bmt/model.hpp"
#include "bmt/proposals.hpp"
#include "bmt/tensor.hpp"

namespace bmt {

// Log level from BMT_LOG_LEVEL: 0 silent, 1 warnings (default), 2 progress.
inline int log_level() {
    static const int level = [] {
        const char* env = std::getenv("BMT_LOG_LEVEL");
        return env ? std::atoi(env) : 1;
    }();
    return level;
}

inline void log_warn(const std::string& msg) {
    if (log_level() >= 1) std::fprintf(stderr, "[warn] %s\n", msg.c_str());
}

inline void log_info(const std::string& msg) {
    if (log_level() >= 2) std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

// ---------------------------------------------------------------------------
// Caption loss: label-smoothed KL divergence
// ---------------------------------------------------------------------------

// Mean over non-pad positions of KL(smoothed_target || pred). The smoothed
// target puts (1-gamma) on the true token and gamma/(V_eff-1) on every other
// non-pad token, where V_eff excludes the pad id. pad_id = -1 disables the
// pad column exclusion (V_eff = vocab).
inline Tensor caption_loss(const Tensor& pred_dist, const std::vector<int>& target_ids,
                           double gamma, const std::vector<uint8_t>& target_real,
                           int pad_id = Vocabulary::pad_id) {
    if (pred_dist.rank() != 2)
        throw DimensionError("caption_loss: predictions must be [t x vocab]");
    const size_t t = pred_dist.rows();
    const size_t vocab = pred_dist.cols();
    if (target_ids.size() != t || target_real.size() != t)
        throw DimensionError("caption_loss: target length does not match prediction rows");
    if (gamma < 0.0 || gamma >= 1.0)
        throw ConfigError("caption_loss: label smoothing must be in [0, 1)");

    const size_t v_eff = pad_id >= 0 ? vocab - 1 : vocab;
    if (v_eff < 2 && gamma > 0.0)
        throw ConfigError("caption_loss: smoothing needs at least two non-pad tokens");

    size_t n_real = 0;
    for (uint8_t r : target_real) n_real += r ? 1 : 0;
    if (n_real == 0) throw ContractError("caption_loss: every target position is padding");

    const double off_mass = gamma > 0.0 ? gamma / static_cast<double>(v_eff - 1) : 0.0;
    std::vector<double> smoothed(t * vocab, 0.0);
    double entropy_term = 0.0; // sum of q * log(q), constant wrt the prediction
    for (size_t i = 0; i < t; ++i) {
        if (!target_real[i]) continue;
        const int truth = target_ids[i];
        if (truth < 0 || static_cast<size_t>(truth) >= vocab)
            throw ContractError("caption_loss: target id " + std::to_string(truth) +
                                " outside vocabulary of " + std::to_string(vocab));
        if (truth == pad_id)
            throw ContractError("caption_loss: real target position holds the pad token");
        for (size_t j = 0; j < vocab; ++j) {
            if (static_cast<int>(j) == pad_id) continue;
            const double q = static_cast<int>(j) == truth ? 1.0 - gamma : off_mass;
            smoothed[i * vocab + j] = q;
            if (q > 0.0) entropy_term += q * std::log(q);
        }
    }
    Tensor target = Tensor::from_values({t, vocab}, std::move(smoothed));
    Tensor cross = sum(mul(target, log(pred_dist))); // sum of q * log(p)
    Tensor kl = add(scale(cross, -1.0), Tensor::scalar(entropy_term));
    return scale(kl, 1.0 / static_cast<double>(n_real));
}

// ---------------------------------------------------------------------------
// YOLO-like proposal targets and loss
// ---------------------------------------------------------------------------

struct AssignedTarget {
    int position = 0;
    int anchor_index = 0;
    double center_offset = 0.0;     // target for sigma(c), in [0, 1]
    double log_length_ratio = 0.0;  // target for l = ln(gt_len_cells / anchor)
    double gt_length_cells = 0.0;
};

struct TargetAssignment {
    int T = 0; // grid length the positions index into
    int anchor_count = 0;
    std::vector<AssignedTarget> positives;
};

// Each ground-truth segment claims the cell containing its center and the
// anchor with the closest log length ratio (ties toward the smaller anchor).
// Collisions keep the longer segment.
inline TargetAssignment assign_targets(const std::vector<EventSegment>& gt, const AnchorSet& anchors,
                                       int T) {
    if (T <= 0) throw ContractError("assign_targets: grid length must be positive");
    TargetAssignment out;
    out.T = T;
    out.anchor_count = static_cast<int>(anchors.anchors_cells.size());
    std::map<std::pair<int, int>, size_t> occupied; // (position, anchor) -> index into positives
    for (const auto& seg : gt) {
        const double len_cells = (seg.end_sec - seg.start_sec) / anchors.cell_seconds;
        const double center_cells = (seg.start_sec + seg.end_sec) / 2.0 / anchors.cell_seconds;
        int p = static_cast<int>(std::floor(center_cells));
        p = std::clamp(p, 0, T - 1);

        int best_anchor = 0;
        double best_score = std::numeric_limits<double>::infinity();
        for (size_t a = 0; a < anchors.anchors_cells.size(); ++a) {
            const double score = std::abs(std::log(len_cells / anchors.anchors_cells[a]));
            if (score < best_score) {
                best_score = score;
                best_anchor = static_cast<int>(a);
            }
        }

        AssignedTarget tgt;
        tgt.position = p;
        tgt.anchor_index = best_anchor;
        tgt.center_offset = std::clamp(center_cells - static_cast<double>(p), 0.0, 1.0);
        tgt.log_length_ratio = std::log(len_cells / anchors.anchors_cells[static_cast<size_t>(best_anchor)]);
        tgt.gt_length_cells = len_cells;

        const auto key = std::make_pair(p, best_anchor);
        auto it = occupied.find(key);
        if (it == occupied.end()) {
            occupied.emplace(key, out.positives.size());
            out.positives.push_back(tgt);
        } else {
            AssignedTarget& held = out.positives[it->second];
            log_warn("assign_targets: two segments map to cell " + std::to_string(p) + " anchor " +
                     std::to_string(best_anchor) + " (" + modality_name(anchors.modality) +
                     "); keeping the longer one");
            if (tgt.gt_length_cells > held.gt_length_cells) held = tgt;
        }
    }
    return out;
}

struct ProposalLossCoeffs {
    double loc = 1.0;
    double obj = 1.0;
    double noobj = 100.0;
};

namespace detail {

// Constant masks/targets shared by every head of one modality.
struct ProposalTargets {
    Tensor target_c, target_l, target_obj;
    Tensor mask_c, mask_l, mask_obj_pos, mask_obj_neg;
};

inline ProposalTargets build_proposal_targets(const TargetAssignment& assign, size_t T_padded,
                                              const std::vector<uint8_t>& valid) {
    const auto A = static_cast<size_t>(assign.anchor_count);
    const Shape shape = {T_padded, A, 3};
    const size_t n = T_padded * A * 3;
    std::vector<double> tc(n, 0.0), tl(n, 0.0), to(n, 0.0);
    std::vector<double> mc(n, 0.0), ml(n, 0.0), mop(n, 0.0), mon(n, 0.0);
    auto idx = [A](size_t p, size_t a, size_t ch) { return (p * A + a) * 3 + ch; };
    for (size_t p = 0; p < T_padded; ++p) {
        if (!valid[p]) continue;
        for (size_t a = 0; a < A; ++a) mon[idx(p, a, 2)] = 1.0; // negative until claimed
    }
    for (const auto& pos : assign.positives) {
        const auto p = static_cast<size_t>(pos.position);
        const auto a = static_cast<size_t>(pos.anchor_index);
        tc[idx(p, a, 0)] = pos.center_offset;
        tl[idx(p, a, 1)] = pos.log_length_ratio;
        to[idx(p, a, 2)] = 1.0;
        mc[idx(p, a, 0)] = 1.0;
        ml[idx(p, a, 1)] = 1.0;
        mop[idx(p, a, 2)] = 1.0;
        mon[idx(p, a, 2)] = 0.0;
    }
    ProposalTargets t;
    t.target_c = Tensor::from_values(shape, std::move(tc));
    t.target_l = Tensor::from_values(shape, std::move(tl));
    t.target_obj = Tensor::from_values(shape, std::move(to));
    t.mask_c = Tensor::from_values(shape, std::move(mc));
    t.mask_l = Tensor::from_values(shape, std::move(ml));
    t.mask_obj_pos = Tensor::from_values(shape, std::move(mop));
    t.mask_obj_neg = Tensor::from_values(shape, std::move(mon));
    return t;
}

inline Tensor head_loss(const Tensor& raw, const ProposalTargets& t, const ProposalLossCoeffs& c) {
    Tensor dc = sub(sigmoid(raw), t.target_c);
    Tensor loc_c = sum(mul(mul(dc, dc), t.mask_c));
    Tensor dl = sub(raw, t.target_l);
    Tensor loc_l = sum(mul(mul(dl, dl), t.mask_l));
    Tensor bce = bce_with_logits(raw, t.target_obj);
    Tensor obj = sum(mul(bce, t.mask_obj_pos));
    Tensor noobj = sum(mul(bce, t.mask_obj_neg));
    return add(add(scale(add(loc_c, loc_l), c.loc), scale(obj, c.obj)), scale(noobj, c.noobj));
}

} // namespace detail

// Sums the YOLO-like loss over every head of both modalities:
//   coeff_loc * [(sigma(c)-c_hat)^2 + (l-l_hat)^2]  at positives
// + coeff_obj * BCE(sigma(o), 1)                    at positives
// + coeff_noobj * BCE(sigma(o), 0)                  at (unpadded) negatives.
inline Tensor proposal_loss(const std::vector<Tensor>& audio_heads_raw,
                            const std::vector<Tensor>& visual_heads_raw,
                            const TargetAssignment& audio_assign,
                            const TargetAssignment& visual_assign,
                            const ProposalLossCoeffs& coeffs,
                            const std::vector<uint8_t>& audio_valid,
                            const std::vector<uint8_t>& visual_valid) {
    Tensor total = Tensor::scalar(0.0);
    if (!audio_heads_raw.empty()) {
        const auto targets =
            detail::build_proposal_targets(audio_assign, audio_heads_raw[0].shape()[0], audio_valid);
        for (const auto& raw : audio_heads_raw)
            total = add(total, detail::head_loss(raw, targets, coeffs));
    }
    if (!visual_heads_raw.empty()) {
        const auto targets = detail::build_proposal_targets(visual_assign,
                                                            visual_heads_raw[0].shape()[0], visual_valid);
        for (const auto& raw : visual_heads_raw)
            total = add(total, detail::head_loss(raw, targets, coeffs));
    }
    return total;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    int64_t step = 0;
    std::map<std::string, std::vector<double>> m, v;
};

// Standard bias-corrected Adam over every trainable parameter that received a
// gradient. Parameters without gradients keep their values and moments.
inline void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (auto& [path, t] : params.by_path) {
        if (!t.requires_grad() || !t.has_grad()) continue;
        const auto& g = t.grad();
        auto& m = state.m[path];
        auto& v = state.v[path];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        auto& w = t.leaf_values_mut();
        for (size_t i = 0; i < g.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            w[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter snapshots (early stopping, freeze assertions)
// ---------------------------------------------------------------------------

using ParamSnapshot = std::map<std::string, std::vector<double>>;

inline ParamSnapshot snapshot_params(const ParamStore& params, const std::string& prefix = "") {
    ParamSnapshot snap;
    for (const auto& [path, t] : params.by_path)
        if (prefix.empty() || path.rfind(prefix, 0) == 0) snap.emplace(path, t.values());
    return snap;
}

inline void restore_params(ParamStore& params, const ParamSnapshot& snap) {
    for (const auto& [path, values] : snap) {
        auto it = params.by_path.find(path);
        if (it == params.by_path.end()) throw ContractError("restore_params: unknown path " + path);
        it->second.leaf_values_mut() = values;
    }
}

// Bit-identical comparison of two snapshots.
inline bool snapshots_identical(const ParamSnapshot& a, const ParamSnapshot& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [path, values] : a) {
        auto it = b.find(path);
        if (it == b.end() || it->second.size() != values.size()) return false;
        for (size_t i = 0; i < values.size(); ++i)
            if (std::memcmp(&values[i], &it->second[i], sizeof(double)) != 0) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Caption training
// ---------------------------------------------------------------------------

struct CaptionTrainItem {
    std::string video_id;
    FeatureSequence audio, visual; // clipped to the segment
    std::vector<int> caption_ids;  // without the start/end specials
};

struct HistoryEntry {
    int epoch = 0;
    int steps = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct CaptionRunConfig {
    ModelConfig model; // vocab_size must be resolved
    TrainConfig train;
};

struct CaptionTrainResult {
    ParamStore params;
    CaptionerParams views;
    std::vector<HistoryEntry> history;
    int best_epoch = 0;
    double best_val_loss = 0.0;
};

namespace detail {

struct EncodedCaptionBatchItem {
    Tensor audio, visual;
    std::vector<uint8_t> audio_valid, visual_valid;
    std::vector<int> input_ids, target_ids;
    std::vector<uint8_t> caption_valid;
};

// Pads one caption item against batch-wide lengths and builds the
// teacher-forcing input/target pair.
inline EncodedCaptionBatchItem prepare_caption_item(const CaptionTrainItem& item, size_t pad_a,
                                                    size_t pad_v, size_t pad_t) {
    EncodedCaptionBatchItem out;
    PaddedFeatures a = pad_features(item.audio, pad_a, item.video_id);
    PaddedFeatures v = pad_features(item.visual, pad_v, item.video_id);
    out.audio = features_to_tensor(a.features);
    out.visual = features_to_tensor(v.features);
    out.audio_valid = std::move(a.valid);
    out.visual_valid = std::move(v.valid);

    std::vector<int> input = {Vocabulary::start_id};
    input.insert(input.end(), item.caption_ids.begin(), item.caption_ids.end());
    std::vector<int> target = item.caption_ids;
    target.push_back(Vocabulary::end_id);
    const size_t len = input.size(); // == target.size()
    if (len > pad_t)
        throw DataError("item " + item.video_id + ": caption length " + std::to_string(len) +
                        " exceeds pad length " + std::to_string(pad_t));
    out.input_ids = pad_tokens(input, pad_t);
    out.target_ids = pad_tokens(target, pad_t);
    out.caption_valid.assign(pad_t, 0);
    std::fill(out.caption_valid.begin(), out.caption_valid.begin() + static_cast<long>(len), uint8_t{1});
    return out;
}

inline Tensor caption_item_loss(const EncodedCaptionBatchItem& it, const CaptionerParams& views,
                                const CaptionRunConfig& cfg, const TrainContext& ctx) {
    BiModalFeatures enc = encode(it.audio, it.visual, it.audio_valid, it.visual_valid,
                                 views.encoder, cfg.model, ctx);
    Tensor dist = caption_distribution(it.input_ids, it.caption_valid, enc, views, cfg.model, ctx);
    return caption_loss(dist, it.target_ids, cfg.train.label_smoothing, it.caption_valid);
}

inline Tensor caption_batch_loss(const std::vector<CaptionTrainItem>& items,
                                 const std::vector<size_t>& batch, const CaptionerParams& views,
                                 const CaptionRunConfig& cfg, const TrainContext& ctx) {
    size_t pad_a = 0, pad_v = 0, pad_t = 0;
    for (size_t i : batch) {
        pad_a = std::max(pad_a, items[i].audio.T);
        pad_v = std::max(pad_v, items[i].visual.T);
        pad_t = std::max(pad_t, items[i].caption_ids.size() + 1);
    }
    Tensor total = Tensor::scalar(0.0);
    for (size_t i : batch) {
        const auto prepared = prepare_caption_item(items[i], pad_a, pad_v, pad_t);
        total = add(total, caption_item_loss(prepared, views, cfg, ctx));
    }
    return scale(total, 1.0 / static_cast<double>(batch.size()));
}

} // namespace detail

// Mean loss over a dataset in eval mode (no dropout), batch of one.
inline double caption_dataset_loss(const std::vector<CaptionTrainItem>& items,
                                   const CaptionerParams& views, const CaptionRunConfig& cfg) {
    if (items.empty()) throw DataError("caption_dataset_loss: empty dataset");
    const TrainContext ctx = TrainContext::eval();
    double total = 0.0;
    for (size_t i = 0; i < items.size(); ++i)
        total += detail::caption_batch_loss(items, {i}, views, cfg, ctx).item();
    return total / static_cast<double>(items.size());
}

// Teacher-forcing training with label-smoothed KL, early stopping on the
// validation loss. Deterministic for a given seed. An optional pre-populated
// store carries frozen (or warm-start) encoder weights.
inline CaptionTrainResult train_captioner(const std::vector<CaptionTrainItem>& train_items,
                                          const std::vector<CaptionTrainItem>& val_items,
                                          const CaptionRunConfig& cfg,
                                          ParamStore preset = ParamStore{}) {
    if (train_items.empty()) throw DataError("train_captioner: empty dataset");
    validate_model_config(cfg.model);

    CaptionTrainResult result;
    result.params = std::move(preset);
    Rng init_rng(cfg.train.seed);
    ParamBuilder builder(result.params, init_rng, true, ParamBuilder::Mode::create_or_attach);
    result.views = build_captioner(builder, cfg.model);

    Rng train_rng(cfg.train.seed ^ 0x5eedull);
    AdamState adam;
    const AdamConfig adam_cfg{cfg.train.learning_rate, 0.9, 0.999, 1e-8};

    const auto& vals = val_items.empty() ? train_items : val_items;
    ParamSnapshot best = snapshot_params(result.params);
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int patience_left = cfg.train.early_stop_patience;
    int steps_done = 0;

    std::vector<size_t> order(train_items.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    const int max_epochs = cfg.train.max_epochs > 0 ? cfg.train.max_epochs
                                                    : std::numeric_limits<int>::max();
    for (int epoch = 1; epoch <= max_epochs; ++epoch) {
        train_rng.shuffle(order);
        double epoch_loss = 0.0;
        int epoch_steps = 0;
        const auto bs = static_cast<size_t>(std::max(1, cfg.train.caption_batch_size));
        for (size_t start = 0; start < order.size(); start += bs) {
            if (cfg.train.max_steps > 0 && steps_done >= cfg.train.max_steps) break;
            std::vector<size_t> batch(order.begin() + static_cast<long>(start),
                                      order.begin() +
                                          static_cast<long>(std::min(start + bs, order.size())));
            TrainContext ctx = TrainContext::training(train_rng);
            Tensor loss = detail::caption_batch_loss(train_items, batch, result.views, cfg, ctx);
            if (!std::isfinite(loss.item()))
                throw NumericError("train_captioner: non-finite loss at step " +
                                   std::to_string(steps_done));
            backward(loss);
            adam_step(result.params, adam, adam_cfg);
            result.params.zero_grads();
            epoch_loss += loss.item();
            ++epoch_steps;
            ++steps_done;
        }
        if (epoch_steps == 0) break;

        const double val_loss = caption_dataset_loss(vals, result.views, cfg);
        result.history.push_back({epoch, epoch_steps,
                                  epoch_loss / static_cast<double>(epoch_steps), val_loss});
        log_info("captioner epoch " + std::to_string(epoch) + " train " +
                 std::to_string(epoch_loss / epoch_steps) + " val " + std::to_string(val_loss));

        if (val_loss < best_val - 1e-12) {
            best_val = val_loss;
            best = snapshot_params(result.params);
            best_epoch = epoch;
            patience_left = cfg.train.early_stop_patience;
        } else if (cfg.train.early_stop_patience > 0 && --patience_left <= 0) {
            break;
        }
        if (cfg.train.max_steps > 0 && steps_done >= cfg.train.max_steps) break;
    }

    restore_params(result.params, best);
    result.best_epoch = best_epoch;
    result.best_val_loss = best_val;
    return result;
}

// ---------------------------------------------------------------------------
// Proposal generator training
// ---------------------------------------------------------------------------

struct ProposalTrainItem {
    std::string video_id;
    FeatureSequence audio, visual; // whole video
    std::vector<EventSegment> gt;
};

struct ProposalRunConfig {
    ModelConfig model;
    ProposalConfig proposals;
    TrainConfig train;
};

struct ProposalTrainResult {
    ParamStore params;
    ProposalModelParams views;
    AnchorSet anchors_audio, anchors_visual;
    std::vector<HistoryEntry> history;
    int best_epoch = 0;
    double best_val_loss = 0.0;
};

namespace detail {

struct PreparedProposalItem {
    Tensor audio, visual;
    std::vector<uint8_t> audio_valid, visual_valid;
    TargetAssignment assign_audio, assign_visual;
    std::optional<BiModalFeatures> cached_encoding; // frozen-encoder fast path
};

inline PreparedProposalItem prepare_proposal_item(const ProposalTrainItem& item,
                                                  const ProposalRunConfig& cfg,
                                                  const AnchorSet& anchors_audio,
                                                  const AnchorSet& anchors_visual) {
    PreparedProposalItem out;
    PaddedFeatures a = pad_features(item.audio, static_cast<size_t>(cfg.proposals.pad_audio),
                                    item.video_id);
    PaddedFeatures v = pad_features(item.visual, static_cast<size_t>(cfg.proposals.pad_visual),
                                    item.video_id);
    out.audio = features_to_tensor(a.features);
    out.visual = features_to_tensor(v.features);
    out.audio_valid = std::move(a.valid);
    out.visual_valid = std::move(v.valid);
    out.assign_audio = assign_targets(item.gt, anchors_audio, static_cast<int>(item.audio.T));
    out.assign_visual = assign_targets(item.gt, anchors_visual, static_cast<int>(item.visual.T));
    return out;
}

inline std::vector<Tensor> run_heads(const Tensor& stream, const std::vector<uint8_t>& valid,
                                     const std::vector<ProposalHeadParams>& heads, int anchors,
                                     int hidden, double head_dropout, const TrainContext& ctx) {
    std::vector<Tensor> raws;
    Tensor x = mask_rows(stream, valid);
    for (const auto& head : heads) {
        ProposalHeadConfig hc;
        hc.kernel_size = head.kernel_size;
        hc.hidden = hidden;
        hc.input_dim = static_cast<int>(stream.cols());
        hc.anchor_count = anchors;
        hc.dropout = head_dropout;
        raws.push_back(proposal_head_forward(x, hc, head, ctx));
    }
    return raws;
}

inline Tensor proposal_item_loss(PreparedProposalItem& item, const ProposalModelParams& views,
                                 const ProposalRunConfig& cfg, bool frozen_encoder,
                                 const TrainContext& ctx) {
    const BiModalFeatures* enc;
    BiModalFeatures local;
    if (frozen_encoder) {
        if (!item.cached_encoding) {
            const TrainContext eval_ctx = TrainContext::eval();
            item.cached_encoding = encode(item.audio, item.visual, item.audio_valid,
                                          item.visual_valid, views.encoder, cfg.model, eval_ctx);
        }
        enc = &*item.cached_encoding;
    } else {
        local = encode(item.audio, item.visual, item.audio_valid, item.visual_valid, views.encoder,
                       cfg.model, ctx);
        enc = &local;
    }
    auto raw_a = run_heads(enc->audio, enc->audio_valid, views.heads_audio,
                           cfg.proposals.anchors_audio, cfg.proposals.head_hidden,
                           cfg.proposals.head_dropout, ctx);
    auto raw_v = run_heads(enc->visual, enc->visual_valid, views.heads_visual,
                           cfg.proposals.anchors_visual, cfg.proposals.head_hidden,
                           cfg.proposals.head_dropout, ctx);
    const ProposalLossCoeffs coeffs{cfg.train.coeff_loc, cfg.train.coeff_obj, cfg.train.coeff_noobj};
    return proposal_loss(raw_a, raw_v, item.assign_audio, item.assign_visual, coeffs,
                         enc->audio_valid, enc->visual_valid);
}

} // namespace detail

// Whole-video training of all proposal heads of both modalities. When the
// encoder is frozen (cap_then_prop) it runs in eval mode and its outputs are
// cached per video; gradients cannot reach it since its leaves are untracked.
inline ProposalTrainResult train_proposal_generator(const std::vector<ProposalTrainItem>& train_items,
                                                    const std::vector<ProposalTrainItem>& val_items,
                                                    const ProposalRunConfig& cfg,
                                                    const AnchorSet& anchors_audio,
                                                    const AnchorSet& anchors_visual,
                                                    ParamStore preset, bool frozen_encoder) {
    if (train_items.empty()) throw DataError("train_proposal_generator: empty dataset");
    validate_model_config(cfg.model);
    validate_proposal_config(cfg.proposals);
    if (frozen_encoder && preset.by_path.empty())
        throw ConfigError("train_proposal_generator: cap_then_prop requires a pre-trained encoder "
                          "checkpoint");
    if (static_cast<int>(anchors_audio.anchors_cells.size()) != cfg.proposals.anchors_audio ||
        static_cast<int>(anchors_visual.anchors_cells.size()) != cfg.proposals.anchors_visual)
        throw ConfigError("train_proposal_generator: anchor sets do not match configured counts");

    ProposalTrainResult result;
    result.params = std::move(preset);
    result.anchors_audio = anchors_audio;
    result.anchors_visual = anchors_visual;
    Rng init_rng(cfg.train.seed);
    ParamBuilder builder(result.params, init_rng, true, ParamBuilder::Mode::create_or_attach);
    result.views = build_proposal_model(builder, cfg.model, cfg.proposals);

    std::vector<detail::PreparedProposalItem> prepared;
    prepared.reserve(train_items.size());
    for (const auto& it : train_items)
        prepared.push_back(detail::prepare_proposal_item(it, cfg, anchors_audio, anchors_visual));
    std::vector<detail::PreparedProposalItem> prepared_val;
    for (const auto& it : val_items)
        prepared_val.push_back(detail::prepare_proposal_item(it, cfg, anchors_audio, anchors_visual));
    auto& vals = prepared_val.empty() ? prepared : prepared_val;

    Rng train_rng(cfg.train.seed ^ 0x9e3779b9ull);
    AdamState adam;
    const AdamConfig adam_cfg{cfg.train.learning_rate, 0.9, 0.999, 1e-8};

    ParamSnapshot best = snapshot_params(result.params);
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int patience_left = cfg.train.early_stop_patience;
    int steps_done = 0;

    std::vector<size_t> order(prepared.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto eval_loss = [&](std::vector<detail::PreparedProposalItem>& items) {
        const TrainContext ctx = TrainContext::eval();
        double total = 0.0;
        for (auto& it : items)
            total += detail::proposal_item_loss(it, result.views, cfg, frozen_encoder, ctx).item();
        return total / static_cast<double>(items.size());
    };

    const int max_epochs = cfg.train.max_epochs > 0 ? cfg.train.max_epochs
                                                    : std::numeric_limits<int>::max();
    for (int epoch = 1; epoch <= max_epochs; ++epoch) {
        train_rng.shuffle(order);
        double epoch_loss = 0.0;
        int epoch_steps = 0;
        const auto bs = static_cast<size_t>(std::max(1, cfg.train.proposal_batch_size));
        for (size_t start = 0; start < order.size(); start += bs) {
            if (cfg.train.max_steps > 0 && steps_done >= cfg.train.max_steps) break;
            TrainContext ctx = TrainContext::training(train_rng);
            Tensor total = Tensor::scalar(0.0);
            size_t count = 0;
            for (size_t k = start; k < std::min(start + bs, order.size()); ++k) {
                total = add(total, detail::proposal_item_loss(prepared[order[k]], result.views, cfg,
                                                              frozen_encoder, ctx));
                ++count;
            }
            Tensor loss = scale(total, 1.0 / static_cast<double>(count));
            if (!std::isfinite(loss.item()))
                throw NumericError("train_proposal_generator: non-finite loss at step " +
                                   std::to_string(steps_done));
            backward(loss);
            adam_step(result.params, adam, adam_cfg);
            result.params.zero_grads();
            epoch_loss += loss.item();
            ++epoch_steps;
            ++steps_done;
        }
        if (epoch_steps == 0) break;

        const double val_loss = eval_loss(vals);
        result.history.push_back({epoch, epoch_steps,
                                  epoch_loss / static_cast<double>(epoch_steps), val_loss});
        log_info("proposals epoch " + std::to_string(epoch) + " train " +
                 std::to_string(epoch_loss / epoch_steps) + " val " + std::to_string(val_loss));

        if (val_loss < best_val - 1e-12) {
            best_val = val_loss;
            best = snapshot_params(result.params);
            best_epoch = epoch;
            patience_left = cfg.train.early_stop_patience;
        } else if (cfg.train.early_stop_patience > 0 && --patience_left <= 0) {
            break;
        }
        if (cfg.train.max_steps > 0 && steps_done >= cfg.train.max_steps) break;
    }

    restore_params(result.params, best);
    result.best_epoch = best_epoch;
    result.best_val_loss = best_val;
    return result;
}

} // namespace bmt
