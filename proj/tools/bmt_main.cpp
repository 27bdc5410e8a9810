// bmt: batch CLI for the bi-modal transformer pipeline.
//
// Subcommands: synth-data, estimate-anchors, train-captioner, train-proposals,
// propose, caption, evaluate. Exit codes: 0 success, 2 usage/config,
// 3 data/format, 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bmt/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

int run_synth_data(const std::string& spec_path, const std::string& out_dir) {
    const bmt::SynthSpec spec = bmt::synth_spec_from_json(bmt::load_json_file(spec_path));
    const bmt::SynthDataset ds = bmt::synth_dataset(spec);
    bmt::save_synth_dataset(out_dir, spec, ds);
    size_t segments = 0;
    for (const auto& [vid, ann] : ds.annotations) segments += ann.segments.size();
    std::printf("wrote %zu videos (%zu segments) to %s\n", ds.annotations.size(), segments,
                out_dir.c_str());
    return 0;
}

int run_estimate_anchors(const std::string& annotations_path, const std::string& modality,
                         int count, int kernel_count, double cell_seconds, uint64_t seed) {
    const auto ann = bmt::load_annotations(annotations_path);
    const auto lengths = bmt::gt_segment_lengths(ann);
    const bmt::Modality mod = modality == "audio" ? bmt::Modality::audio : bmt::Modality::visual;
    const bmt::AnchorSet anchors = bmt::estimate_anchors(lengths, count, cell_seconds, seed, mod);
    const auto kernels = bmt::estimate_kernel_sizes(lengths, kernel_count, cell_seconds, seed);

    nlohmann::ordered_json out;
    out["modality"] = modality;
    out["cell_seconds"] = cell_seconds;
    out["segment_count"] = lengths.size();
    out["anchors_cells"] = anchors.anchors_cells;
    nlohmann::ordered_json anchors_sec = nlohmann::ordered_json::array();
    for (double a : anchors.anchors_cells) anchors_sec.push_back(a * cell_seconds);
    out["anchors_seconds"] = anchors_sec;
    out["kernel_sizes"] = kernels;
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_train_captioner(const std::string& config_path, const std::string& encoder_checkpoint,
                        bool freeze_encoder) {
    const bmt::RunConfig rc = bmt::load_run_config(config_path);
    if (rc.out_dir.empty()) throw bmt::ConfigError("config misses out_dir");
    bmt::ParamStore preset;
    if (!encoder_checkpoint.empty()) {
        const bmt::Checkpoint ck = bmt::load_checkpoint(encoder_checkpoint, !freeze_encoder);
        preset = bmt::extract_encoder_params(ck.params, !freeze_encoder);
    } else if (freeze_encoder) {
        throw bmt::ConfigError("--freeze-encoder requires --encoder-checkpoint");
    }
    const auto result = bmt::run_caption_training(rc, std::move(preset), rc.out_dir);
    std::printf("captioner: best epoch %d, val loss %.6f -> %s\n", result.train.best_epoch,
                result.train.best_val_loss, result.checkpoint_path.string().c_str());
    return 0;
}

int run_train_proposals(const std::string& config_path, const std::string& encoder_checkpoint,
                        bool freeze_encoder) {
    const bmt::RunConfig rc = bmt::load_run_config(config_path);
    if (rc.out_dir.empty()) throw bmt::ConfigError("config misses out_dir");
    if (rc.train.stage_order == bmt::StageOrder::cap_then_prop && encoder_checkpoint.empty())
        throw bmt::ConfigError("stage order cap_then_prop requires --encoder-checkpoint");
    bmt::ParamStore preset;
    if (!encoder_checkpoint.empty()) {
        const bmt::Checkpoint ck = bmt::load_checkpoint(encoder_checkpoint, !freeze_encoder);
        preset = bmt::extract_encoder_params(ck.params, !freeze_encoder);
    } else if (freeze_encoder) {
        throw bmt::ConfigError("--freeze-encoder requires --encoder-checkpoint");
    }
    const auto result =
        bmt::run_proposal_training(rc, std::move(preset), freeze_encoder, rc.out_dir);
    std::printf("proposal generator: best epoch %d, val loss %.6f -> %s\n", result.train.best_epoch,
                result.train.best_val_loss, result.checkpoint_path.string().c_str());
    return 0;
}

int run_propose(const std::string& checkpoint, const std::string& features_dir, int top_k,
                const std::string& out_path) {
    const bmt::LoadedProposalModel lp = bmt::load_proposal_model(checkpoint);
    const bmt::PredictionSet preds = bmt::propose_all(lp, features_dir, top_k);
    bmt::save_predictions(out_path, preds);
    nlohmann::ordered_json echo = {{"checkpoint", checkpoint},
                                   {"features_dir", features_dir},
                                   {"top_k", top_k}};
    bmt::save_config_echo(out_path + ".config.json", echo);
    std::printf("wrote proposals for %zu videos to %s\n", preds.size(), out_path.c_str());
    return 0;
}

int run_caption(const std::string& checkpoint, const std::string& features_dir,
                const std::string& proposals_path, const std::string& gt_path,
                const std::string& out_path) {
    if (proposals_path.empty() == gt_path.empty())
        throw bmt::ConfigError("caption needs exactly one of --proposals or --gt");
    const bmt::LoadedCaptioner lc = bmt::load_captioner(checkpoint);
    bmt::PredictionSet segments;
    if (!proposals_path.empty())
        segments = bmt::load_predictions(proposals_path);
    else
        segments = bmt::gt_as_segments(bmt::load_annotations(gt_path));
    const bmt::PredictionSet captioned = bmt::caption_segments(lc, features_dir, segments);
    bmt::save_predictions(out_path, captioned);
    nlohmann::ordered_json echo = {{"checkpoint", checkpoint},
                                   {"features_dir", features_dir},
                                   {"proposals", proposals_path},
                                   {"gt", gt_path}};
    bmt::save_config_echo(out_path + ".config.json", echo);
    std::printf("wrote captions for %zu videos to %s\n", captioned.size(), out_path.c_str());
    return 0;
}

int run_evaluate(const std::string& predictions_path, const std::string& gt_path, bool with_bleu,
                 const std::string& out_path) {
    const bmt::PredictionSet preds = bmt::load_predictions(predictions_path);
    const bmt::AnnotationSet gt = bmt::load_annotations(gt_path);
    const bmt::EvalReport report =
        bmt::proposal_prf(preds, gt, bmt::default_tiou_thresholds(), with_bleu);
    const auto j = bmt::eval_report_to_json(report);
    std::cout << j.dump(2) << "\n";
    // headline numbers scaled x100 for display
    std::printf("F1 %.2f | Precision %.2f | Recall %.2f", report.f1 * 100.0,
                report.precision * 100.0, report.recall * 100.0);
    if (report.has_bleu)
        std::printf(" | B@3 %.2f | B@4 %.2f", report.bleu3 * 100.0, report.bleu4 * 100.0);
    std::printf("  (x100)\n");
    if (!out_path.empty()) {
        bmt::write_file_atomic(out_path, j.dump(2) + "\n");
        nlohmann::ordered_json echo = {{"predictions", predictions_path},
                                       {"ground_truth", gt_path},
                                       {"bleu", with_bleu}};
        bmt::save_config_echo(out_path + ".config.json", echo);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"bi-modal transformer for dense event captioning"};
    app.require_subcommand(1);

    std::string spec_path, out_dir;
    auto* synth = app.add_subcommand("synth-data", "generate a synthetic bi-modal dataset");
    synth->add_option("--spec", spec_path, "synthesis spec JSON")->required();
    synth->add_option("--out", out_dir, "output directory")->required();

    std::string ann_path, modality = "audio";
    int count = 10, kernel_count = 10;
    double cell_seconds = 0.96;
    uint64_t seed = 1;
    auto* anchors = app.add_subcommand("estimate-anchors",
                                       "K-means anchors and kernel sizes from annotations");
    anchors->add_option("--annotations", ann_path, "annotation JSON")->required();
    anchors->add_option("--modality", modality, "audio or visual")
        ->check(CLI::IsMember({"audio", "visual"}));
    anchors->add_option("--count", count, "number of anchors");
    anchors->add_option("--kernel-count", kernel_count, "number of kernel sizes");
    anchors->add_option("--cell-seconds", cell_seconds, "temporal span of one feature cell")
        ->required();
    anchors->add_option("--seed", seed, "K-means seed");

    std::string config_path, encoder_ckpt;
    bool freeze_encoder = false;
    auto* train_cap = app.add_subcommand("train-captioner", "stage 1: train the captioning module");
    train_cap->add_option("--config", config_path, "run config JSON")->required();
    train_cap->add_option("--encoder-checkpoint", encoder_ckpt,
                          "start from this checkpoint's encoder");
    train_cap->add_flag("--freeze-encoder", freeze_encoder, "keep the loaded encoder fixed");

    std::string pconfig_path, pencoder_ckpt;
    bool pfreeze = false;
    auto* train_prop =
        app.add_subcommand("train-proposals", "stage 2: train the proposal generator");
    train_prop->add_option("--config", pconfig_path, "run config JSON")->required();
    train_prop->add_option("--encoder-checkpoint", pencoder_ckpt,
                           "start from this checkpoint's encoder");
    train_prop->add_flag("--freeze-encoder", pfreeze, "keep the loaded encoder fixed");

    std::string prop_ckpt, prop_features, prop_out;
    int top_k = 100;
    auto* propose = app.add_subcommand("propose", "generate event proposals for every video");
    propose->add_option("--checkpoint", prop_ckpt, "proposal generator checkpoint")->required();
    propose->add_option("--features-dir", prop_features, "directory of .bmtf feature files")
        ->required();
    propose->add_option("--top-k", top_k, "proposals kept per video");
    propose->add_option("--out", prop_out, "output prediction file")->required();

    std::string cap_ckpt, cap_features, cap_props, cap_gt, cap_out;
    auto* caption = app.add_subcommand("caption", "caption proposed or ground-truth segments");
    caption->add_option("--checkpoint", cap_ckpt, "captioner checkpoint")->required();
    caption->add_option("--features-dir", cap_features, "directory of .bmtf feature files")
        ->required();
    caption->add_option("--proposals", cap_props, "segments from a proposal file");
    caption->add_option("--gt", cap_gt, "segments from ground-truth annotations");
    caption->add_option("--out", cap_out, "output prediction file")->required();

    std::string eval_pred, eval_gt, eval_out;
    bool with_bleu = false;
    auto* evaluate = app.add_subcommand("evaluate", "precision/recall/F1 (and BLEU) report");
    evaluate->add_option("--predictions", eval_pred, "prediction file")->required();
    evaluate->add_option("--ground-truth", eval_gt, "annotation JSON")->required();
    evaluate->add_flag("--bleu", with_bleu, "also score captions with BLEU@3-4");
    evaluate->add_option("--out", eval_out, "also write the report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2; // usage errors exit 2; --help exits 0
    }

    try {
        if (synth->parsed()) return run_synth_data(spec_path, out_dir);
        if (anchors->parsed())
            return run_estimate_anchors(ann_path, modality, count, kernel_count, cell_seconds, seed);
        if (train_cap->parsed()) return run_train_captioner(config_path, encoder_ckpt, freeze_encoder);
        if (train_prop->parsed()) return run_train_proposals(pconfig_path, pencoder_ckpt, pfreeze);
        if (propose->parsed()) return run_propose(prop_ckpt, prop_features, top_k, prop_out);
        if (caption->parsed()) return run_caption(cap_ckpt, cap_features, cap_props, cap_gt, cap_out);
        if (evaluate->parsed()) return run_evaluate(eval_pred, eval_gt, with_bleu, eval_out);
    } catch (const bmt::ConfigError& e) {
        std::fprintf(stderr, "error: config: %s\n", e.what());
        return 2;
    } catch (const bmt::FormatError& e) {
        std::fprintf(stderr, "error: format: %s\n", e.what());
        return 3;
    } catch (const bmt::DataError& e) {
        std::fprintf(stderr, "error: data: %s\n", e.what());
        return 3;
    } catch (const bmt::NumericError& e) {
        std::fprintf(stderr, "error: numeric: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
