#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bmt/checkpoint.hpp"
#include "bmt/config.hpp"
#include "bmt/data.hpp"
#include "bmt/decoder.hpp"
#include "bmt/encoder.hpp"
#include "bmt/metrics.hpp"
#include "bmt/model.hpp"
#include "bmt/proposals.hpp"
#include "bmt/training.hpp"

namespace bmt {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration files
// ---------------------------------------------------------------------------

struct DataPaths {
    std::string annotations;
    std::string features_dir;
    std::string val_annotations; // empty -> validate on the training set
    std::string embedding_file;  // optional pre-trained word vectors (BMTF, one row per vocab id)
    int min_token_count = 1;
    int max_caption_len = 30;
};

struct RunConfig {
    ModelConfig model;
    ProposalConfig proposals;
    TrainConfig train;
    DataPaths data;
    std::string out_dir;
};

inline nlohmann::json load_json_file(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("proposals")) c.proposals = proposal_config_from_json(j.at("proposals"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::maybe(d, "annotations", c.data.annotations);
        detail::maybe(d, "features_dir", c.data.features_dir);
        detail::maybe(d, "val_annotations", c.data.val_annotations);
        detail::maybe(d, "embedding_file", c.data.embedding_file);
        detail::maybe(d, "min_token_count", c.data.min_token_count);
        detail::maybe(d, "max_caption_len", c.data.max_caption_len);
    }
    detail::maybe(j, "out_dir", c.out_dir);
    return c;
}

inline RunConfig load_run_config(const fs::path& path) {
    return run_config_from_json(load_json_file(path));
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["model"] = model_config_to_json(c.model);
    j["proposals"] = proposal_config_to_json(c.proposals);
    j["train"] = train_config_to_json(c.train);
    j["data"] = {{"annotations", c.data.annotations},
                 {"features_dir", c.data.features_dir},
                 {"val_annotations", c.data.val_annotations},
                 {"embedding_file", c.data.embedding_file},
                 {"min_token_count", c.data.min_token_count},
                 {"max_caption_len", c.data.max_caption_len}};
    j["out_dir"] = c.out_dir;
    return j;
}

// ---------------------------------------------------------------------------
// Dataset assembly from feature files + annotations
// ---------------------------------------------------------------------------

struct VideoFeatures {
    std::string video_id;
    FeatureSequence audio, visual;
};

inline std::vector<std::string> discover_videos(const fs::path& features_dir) {
    if (!fs::is_directory(features_dir))
        throw DataError("features directory does not exist: " + features_dir.string());
    std::vector<std::string> vids;
    for (const auto& entry : fs::directory_iterator(features_dir)) {
        const std::string name = entry.path().filename().string();
        const std::string suffix = ".audio.bmtf";
        if (name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            vids.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(vids.begin(), vids.end());
    return vids;
}

inline VideoFeatures load_video_features(const fs::path& features_dir, const std::string& vid) {
    VideoFeatures f;
    f.video_id = vid;
    f.audio = load_features(features_dir / (vid + ".audio.bmtf"));
    f.visual = load_features(features_dir / (vid + ".visual.bmtf"));
    return f;
}

// One caption item per annotated segment: features clipped to the segment.
inline std::vector<CaptionTrainItem> build_caption_items(const AnnotationSet& annotations,
                                                         const fs::path& features_dir,
                                                         const Vocabulary& vocab,
                                                         int max_caption_len) {
    std::vector<CaptionTrainItem> items;
    for (const auto& [vid, ann] : annotations) {
        const VideoFeatures vf = load_video_features(features_dir, vid);
        for (const auto& seg : ann.segments) {
            auto [ca, cv] = clip_features(vf.audio, vf.visual, seg.start_sec, seg.end_sec);
            CaptionTrainItem item;
            item.video_id = vid;
            item.audio = std::move(ca);
            item.visual = std::move(cv);
            item.caption_ids = vocab.encode(seg.sentence);
            if (static_cast<int>(item.caption_ids.size()) + 1 > max_caption_len)
                item.caption_ids.resize(static_cast<size_t>(max_caption_len - 1));
            items.push_back(std::move(item));
        }
    }
    if (items.empty()) throw DataError("no caption items assembled from the annotations");
    return items;
}

inline std::vector<ProposalTrainItem> build_proposal_items(const AnnotationSet& annotations,
                                                           const fs::path& features_dir) {
    std::vector<ProposalTrainItem> items;
    for (const auto& [vid, ann] : annotations) {
        VideoFeatures vf = load_video_features(features_dir, vid);
        ProposalTrainItem item;
        item.video_id = vid;
        item.audio = std::move(vf.audio);
        item.visual = std::move(vf.visual);
        item.gt = ann.segments;
        items.push_back(std::move(item));
    }
    if (items.empty()) throw DataError("no proposal items assembled from the annotations");
    return items;
}

inline std::vector<double> gt_segment_lengths(const AnnotationSet& annotations) {
    std::vector<double> lengths;
    for (const auto& [vid, ann] : annotations)
        for (const auto& seg : ann.segments) lengths.push_back(seg.end_sec - seg.start_sec);
    return lengths;
}

// ---------------------------------------------------------------------------
// Checkpoint payload configs
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json vocab_to_json(const Vocabulary& v) {
    nlohmann::ordered_json entries = nlohmann::ordered_json::array();
    for (int id = 0; id < v.size(); ++id)
        entries.push_back({v.id_to_token[static_cast<size_t>(id)], v.counts[static_cast<size_t>(id)]});
    return entries;
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
    Vocabulary v;
    int id = 0;
    for (const auto& e : j) {
        const auto token = e.at(0).get<std::string>();
        v.id_to_token.push_back(token);
        v.counts.push_back(e.at(1).get<int64_t>());
        v.token_to_id.emplace(token, id++);
    }
    if (v.size() < 4) throw FormatError("embedded vocabulary misses the special tokens");
    return v;
}

inline nlohmann::ordered_json anchors_to_json(const AnchorSet& a) {
    return {{"modality", modality_name(a.modality)},
            {"cell_seconds", a.cell_seconds},
            {"anchors_cells", a.anchors_cells}};
}

inline AnchorSet anchors_from_json(const nlohmann::json& j) {
    AnchorSet a;
    a.modality = j.at("modality").get<std::string>() == "audio" ? Modality::audio : Modality::visual;
    a.cell_seconds = j.at("cell_seconds").get<double>();
    a.anchors_cells = j.at("anchors_cells").get<std::vector<double>>();
    return a;
}

// ---------------------------------------------------------------------------
// Loaded model bundles
// ---------------------------------------------------------------------------

struct LoadedCaptioner {
    ModelConfig model;
    Vocabulary vocab;
    int max_caption_len = 30;
    ParamStore params;
    CaptionerParams views;
};

inline LoadedCaptioner load_captioner(const fs::path& checkpoint_path, bool trainable = false) {
    Checkpoint ck = load_checkpoint(checkpoint_path, trainable);
    if (ck.config.value("kind", std::string{}) != "captioner")
        throw FormatError(checkpoint_path.string() + ": not a captioner checkpoint");
    LoadedCaptioner lc;
    lc.model = model_config_from_json(ck.config.at("model"));
    lc.vocab = vocab_from_json(ck.config.at("vocab"));
    lc.max_caption_len = ck.config.value("max_caption_len", 30);
    lc.params = std::move(ck.params);
    ParamBuilder attach(lc.params, trainable);
    lc.views = build_captioner(attach, lc.model);
    return lc;
}

struct LoadedProposalModel {
    ModelConfig model;
    ProposalConfig proposals;
    AnchorSet anchors_audio, anchors_visual;
    ParamStore params;
    ProposalModelParams views;
};

inline LoadedProposalModel load_proposal_model(const fs::path& checkpoint_path,
                                               bool trainable = false) {
    Checkpoint ck = load_checkpoint(checkpoint_path, trainable);
    if (ck.config.value("kind", std::string{}) != "proposal_generator")
        throw FormatError(checkpoint_path.string() + ": not a proposal generator checkpoint");
    LoadedProposalModel lp;
    lp.model = model_config_from_json(ck.config.at("model"));
    lp.proposals = proposal_config_from_json(ck.config.at("proposals"));
    lp.anchors_audio = anchors_from_json(ck.config.at("anchors_audio"));
    lp.anchors_visual = anchors_from_json(ck.config.at("anchors_visual"));
    lp.params = std::move(ck.params);
    ParamBuilder attach(lp.params, trainable);
    lp.views = build_proposal_model(attach, lp.model, lp.proposals);
    return lp;
}

// Extracts only the encoder.* parameters of a checkpoint as a preset store.
inline ParamStore extract_encoder_params(const ParamStore& source, bool trainable) {
    ParamStore out;
    for (const auto& [path, t] : source.by_path)
        if (path.rfind("encoder.", 0) == 0)
            out.insert(path, Tensor::from_values(t.shape(), t.values(), trainable));
    if (out.by_path.empty()) throw FormatError("checkpoint carries no encoder parameters");
    return out;
}

// Pre-trained word embeddings from a feature file carrying one row per
// vocabulary id. The table stays trainable (fine-tuned from this init).
inline Tensor load_embedding_table(const fs::path& path, int vocab_size, int d_c) {
    const FeatureSequence f = load_features(path);
    if (f.T != static_cast<size_t>(vocab_size) || f.d != static_cast<size_t>(d_c))
        throw DataError(path.string() + ": embedding table is " + std::to_string(f.T) + "x" +
                        std::to_string(f.d) + ", expected " + std::to_string(vocab_size) + "x" +
                        std::to_string(d_c) + " (one row per vocabulary id)");
    return Tensor::from_values({f.T, f.d}, f.values, /*requires_grad=*/true);
}

// ---------------------------------------------------------------------------
// History / config echo files
// ---------------------------------------------------------------------------

inline void save_history(const fs::path& path, const std::vector<HistoryEntry>& history) {
    std::string out;
    for (const auto& h : history) {
        nlohmann::ordered_json line = {{"epoch", h.epoch},
                                       {"steps", h.steps},
                                       {"train_loss", h.train_loss},
                                       {"val_loss", h.val_loss}};
        out += line.dump();
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline void save_config_echo(const fs::path& path, const nlohmann::ordered_json& config) {
    write_file_atomic(path, config.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Stage runners (shared by the CLI and the acceptance harness)
// ---------------------------------------------------------------------------

struct CaptionStageResult {
    CaptionRunConfig cfg;
    Vocabulary vocab;
    CaptionTrainResult train;
    fs::path checkpoint_path;
};

// Trains the captioning module per the run config; optionally starts from a
// frozen or warm encoder preset. Writes checkpoint + history + config echo.
inline CaptionStageResult run_caption_training(const RunConfig& rc, ParamStore encoder_preset,
                                               const fs::path& out_dir) {
    const AnnotationSet train_ann = load_annotations(rc.data.annotations);
    const AnnotationSet val_ann = rc.data.val_annotations.empty()
                                      ? train_ann
                                      : load_annotations(rc.data.val_annotations);
    Vocabulary vocab = build_vocab(train_ann, rc.data.min_token_count);

    CaptionRunConfig cfg;
    cfg.model = rc.model;
    cfg.model.vocab_size = vocab.size();
    cfg.train = rc.train;

    const auto items = build_caption_items(train_ann, rc.data.features_dir, vocab,
                                           rc.data.max_caption_len);
    const auto val_items = rc.data.val_annotations.empty()
                               ? items
                               : build_caption_items(val_ann, rc.data.features_dir, vocab,
                                                     rc.data.max_caption_len);

    if (!rc.data.embedding_file.empty() && !encoder_preset.contains("embedding.table"))
        encoder_preset.insert("embedding.table", load_embedding_table(rc.data.embedding_file,
                                                                      vocab.size(), cfg.model.d_c));

    CaptionStageResult out;
    out.cfg = cfg;
    out.vocab = vocab;
    out.train = train_captioner(items, val_items, cfg, std::move(encoder_preset));

    nlohmann::ordered_json ck_config;
    ck_config["kind"] = "captioner";
    ck_config["model"] = model_config_to_json(cfg.model);
    ck_config["train"] = train_config_to_json(cfg.train);
    ck_config["max_caption_len"] = rc.data.max_caption_len;
    ck_config["vocab"] = vocab_to_json(vocab);

    fs::create_directories(out_dir);
    out.checkpoint_path = out_dir / "captioner.bmtc";
    save_checkpoint(out.checkpoint_path, ck_config, out.train.params);
    save_history(out_dir / "history.jsonl", out.train.history);
    save_vocab(out_dir / "vocab.tsv", vocab);
    save_config_echo(out_dir / "config.json", run_config_to_json(rc));
    return out;
}

struct ProposalStageResult {
    ProposalRunConfig cfg;
    ProposalTrainResult train;
    fs::path checkpoint_path;
    bool encoder_frozen = false;
    bool encoder_identity_ok = true; // bit-identity of frozen encoder params
};

inline ProposalStageResult run_proposal_training(const RunConfig& rc, ParamStore encoder_preset,
                                                 bool freeze_encoder, const fs::path& out_dir) {
    const AnnotationSet train_ann = load_annotations(rc.data.annotations);
    const AnnotationSet val_ann = rc.data.val_annotations.empty()
                                      ? train_ann
                                      : load_annotations(rc.data.val_annotations);

    auto items = build_proposal_items(train_ann, rc.data.features_dir);
    auto val_items = rc.data.val_annotations.empty()
                         ? std::vector<ProposalTrainItem>{}
                         : build_proposal_items(val_ann, rc.data.features_dir);

    ProposalRunConfig cfg;
    cfg.model = rc.model;
    cfg.proposals = rc.proposals;
    cfg.train = rc.train;

    // Anchors (and kernels, unless pinned in the config) come from the
    // training annotations via seeded K-means.
    const auto lengths = gt_segment_lengths(train_ann);
    const double cell_a = items[0].audio.cell_seconds;
    const double cell_v = items[0].visual.cell_seconds;
    const AnchorSet anchors_audio = estimate_anchors(lengths, cfg.proposals.anchors_audio, cell_a,
                                                     cfg.train.seed, Modality::audio);
    const AnchorSet anchors_visual = estimate_anchors(lengths, cfg.proposals.anchors_visual, cell_v,
                                                      cfg.train.seed, Modality::visual);
    if (cfg.proposals.kernels_audio.empty())
        cfg.proposals.kernels_audio =
            estimate_kernel_sizes(lengths, cfg.proposals.kernel_count, cell_a, cfg.train.seed);
    if (cfg.proposals.kernels_visual.empty())
        cfg.proposals.kernels_visual =
            estimate_kernel_sizes(lengths, cfg.proposals.kernel_count, cell_v, cfg.train.seed);
    validate_proposal_config(cfg.proposals);

    const BalanceReport balance =
        modality_balance(static_cast<uint64_t>(cfg.proposals.pad_audio),
                         static_cast<uint64_t>(cfg.proposals.anchors_audio),
                         static_cast<uint64_t>(cfg.proposals.pad_visual),
                         static_cast<uint64_t>(cfg.proposals.anchors_visual));
    if (!balance.balanced)
        log_warn("modality balance off: T_a*|Psi_a|=" + std::to_string(balance.audio_product) +
                 " vs T_v*|Psi_v|=" + std::to_string(balance.visual_product));

    ProposalStageResult out;
    out.cfg = cfg;
    out.encoder_frozen = freeze_encoder;

    const ParamSnapshot enc_before =
        freeze_encoder ? snapshot_params(encoder_preset, "encoder.") : ParamSnapshot{};
    out.train = train_proposal_generator(items, val_items, cfg, anchors_audio, anchors_visual,
                                         std::move(encoder_preset), freeze_encoder);
    if (freeze_encoder) {
        const ParamSnapshot enc_after = snapshot_params(out.train.params, "encoder.");
        out.encoder_identity_ok = snapshots_identical(enc_before, enc_after);
        if (!out.encoder_identity_ok)
            throw ContractError("frozen encoder parameters changed during proposal training");
    }

    nlohmann::ordered_json ck_config;
    ck_config["kind"] = "proposal_generator";
    ck_config["model"] = model_config_to_json(cfg.model);
    ck_config["proposals"] = proposal_config_to_json(cfg.proposals);
    ck_config["train"] = train_config_to_json(cfg.train);
    ck_config["anchors_audio"] = anchors_to_json(out.train.anchors_audio);
    ck_config["anchors_visual"] = anchors_to_json(out.train.anchors_visual);
    ck_config["encoder_frozen"] = freeze_encoder;

    fs::create_directories(out_dir);
    out.checkpoint_path = out_dir / "proposal_generator.bmtc";
    save_checkpoint(out.checkpoint_path, ck_config, out.train.params);
    save_history(out_dir / "history.jsonl", out.train.history);
    save_config_echo(out_dir / "config.json", run_config_to_json(rc));
    return out;
}

// ---------------------------------------------------------------------------
// Inference passes
// ---------------------------------------------------------------------------

// Runs the proposal model over every video in the directory; returns top_k
// confidence-sorted segments per video.
inline PredictionSet propose_all(const LoadedProposalModel& lp, const fs::path& features_dir,
                                 int top_k) {
    PredictionSet out;
    const TrainContext ctx = TrainContext::eval();
    for (const auto& vid : discover_videos(features_dir)) {
        const VideoFeatures vf = load_video_features(features_dir, vid);
        BiModalFeatures enc = encode(vf.audio, vf.visual, lp.views.encoder, lp.model, ctx);
        const auto proposals = generate_proposals(enc, lp.views, lp.proposals, lp.anchors_audio,
                                                  lp.anchors_visual, top_k);
        std::vector<ScoredSegment> segs;
        for (const auto& p : proposals)
            segs.push_back({p.start_sec(), p.end_sec(), p.confidence, {}});
        out.emplace(vid, std::move(segs));
    }
    if (out.empty()) throw DataError("no feature pairs found under " + features_dir.string());
    return out;
}

// Clips features to each segment and greedy-decodes a caption for it.
inline PredictionSet caption_segments(const LoadedCaptioner& lc, const fs::path& features_dir,
                                      const PredictionSet& segments) {
    PredictionSet out;
    const TrainContext ctx = TrainContext::eval();
    for (const auto& [vid, segs] : segments) {
        const VideoFeatures vf = load_video_features(features_dir, vid);
        std::vector<ScoredSegment> captioned;
        for (const auto& seg : segs) {
            auto [ca, cv] = clip_features(vf.audio, vf.visual, seg.start_sec, seg.end_sec);
            BiModalFeatures enc = encode(ca, cv, lc.views.encoder, lc.model, ctx);
            const GreedyResult g = greedy_caption(enc, lc.views, lc.model,
                                                  static_cast<size_t>(lc.max_caption_len));
            ScoredSegment s = seg;
            s.caption = lc.vocab.decode(g.tokens);
            captioned.push_back(std::move(s));
        }
        out.emplace(vid, std::move(captioned));
    }
    return out;
}

inline PredictionSet gt_as_segments(const AnnotationSet& ann) {
    PredictionSet out;
    for (const auto& [vid, va] : ann) {
        std::vector<ScoredSegment> segs;
        for (const auto& seg : va.segments) segs.push_back({seg.start_sec, seg.end_sec, 1.0, {}});
        out.emplace(vid, std::move(segs));
    }
    return out;
}

// Exact greedy reproduction rate of the training captions.
inline double caption_exact_match_rate(const std::vector<CaptionTrainItem>& items,
                                       const CaptionerParams& views, const ModelConfig& model,
                                       size_t max_len) {
    if (items.empty()) throw DataError("caption_exact_match_rate: empty dataset");
    const TrainContext ctx = TrainContext::eval();
    size_t hits = 0;
    for (const auto& item : items) {
        BiModalFeatures enc = encode(item.audio, item.visual, views.encoder, model, ctx);
        const GreedyResult g = greedy_caption(enc, views, model, max_len);
        if (g.tokens == item.caption_ids) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(items.size());
}

// ---------------------------------------------------------------------------
// Ablation orderings (separate / prop->cap / cap->prop)
// ---------------------------------------------------------------------------

struct AblationCell {
    double bleu3 = 0.0;
    double bleu4 = 0.0;
    double f1 = 0.0;
};

struct AblationReport {
    std::map<std::string, AblationCell> by_procedure; // keyed by stage-order name
    bool frozen_encoder_identity = false;
    int top_k = 0;
};

inline nlohmann::ordered_json ablation_report_to_json(const AblationReport& r) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::object();
    for (const auto& [name, cell] : r.by_procedure)
        rows[name] = {{"bleu3", cell.bleu3}, {"bleu4", cell.bleu4}, {"f1", cell.f1}};
    return {{"table", rows},
            {"top_k", r.top_k},
            {"frozen_encoder_identity", r.frozen_encoder_identity}};
}

// Runs the three training procedures on one dataset and scores each full
// pipeline (propose -> caption -> evaluate). Stages that repeat with the same
// seed and config are trained once and shared.
inline AblationReport run_ablation_orderings(const RunConfig& caption_rc,
                                             const RunConfig& proposal_rc, int top_k,
                                             const fs::path& work_dir) {
    AblationReport report;
    report.top_k = top_k;
    const AnnotationSet gt = load_annotations(caption_rc.data.annotations);
    const fs::path features_dir = caption_rc.data.features_dir;

    // Stage pool. "separate" and "cap_then_prop" share the captioner;
    // "separate" and "prop_then_cap" share the independently-trained
    // proposal generator (identical seeds and configs).
    CaptionStageResult cap_solo =
        run_caption_training(caption_rc, ParamStore{}, work_dir / "cap_solo");
    ProposalStageResult prop_solo =
        run_proposal_training(proposal_rc, ParamStore{}, false, work_dir / "prop_solo");

    ProposalStageResult prop_frozen = run_proposal_training(
        proposal_rc, extract_encoder_params(cap_solo.train.params, false), true,
        work_dir / "prop_frozen");
    report.frozen_encoder_identity = prop_frozen.encoder_identity_ok;

    CaptionStageResult cap_frozen = run_caption_training(
        caption_rc, extract_encoder_params(prop_solo.train.params, false),
        work_dir / "cap_frozen");

    struct Combo {
        const char* name;
        const CaptionStageResult* cap;
        const ProposalStageResult* prop;
    };
    const std::vector<Combo> combos = {
        {"separate", &cap_solo, &prop_solo},
        {"prop_then_cap", &cap_frozen, &prop_solo},
        {"cap_then_prop", &cap_solo, &prop_frozen},
    };

    for (const auto& combo : combos) {
        const LoadedProposalModel lp = load_proposal_model(combo.prop->checkpoint_path);
        const LoadedCaptioner lc = load_captioner(combo.cap->checkpoint_path);
        PredictionSet proposals = propose_all(lp, features_dir, top_k);
        PredictionSet captioned = caption_segments(lc, features_dir, proposals);
        const fs::path pred_path = work_dir / (std::string(combo.name) + ".predictions.json");
        save_predictions(pred_path, captioned);
        const EvalReport eval = proposal_prf(captioned, gt, default_tiou_thresholds(), true);
        report.by_procedure[combo.name] = {eval.bleu3, eval.bleu4, eval.f1};
    }
    return report;
}

} // namespace bmt
