#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "bmt/data.hpp"
#include "bmt/errors.hpp"

namespace bmt {

// Temporal intersection over union of [s1, e1] and [s2, e2].
inline double tiou(double s1, double e1, double s2, double e2) {
    if (e1 < s1 || e2 < s2)
        throw ContractError("tiou: inverted interval");
    const double inter = std::max(0.0, std::min(e1, e2) - std::max(s1, s2));
    const double uni = (e1 - s1) + (e2 - s2) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

inline const std::vector<double>& default_tiou_thresholds() {
    static const std::vector<double> t = {0.3, 0.5, 0.7, 0.9};
    return t;
}

// A predicted segment, optionally captioned.
struct ScoredSegment {
    double start_sec = 0.0;
    double end_sec = 0.0;
    double confidence = 1.0;
    std::string caption;
};

// video id -> predictions (writer keeps them confidence-sorted)
using PredictionSet = std::map<std::string, std::vector<ScoredSegment>>;

// Deterministic ranking for evaluation and serialization.
inline void sort_by_confidence(std::vector<ScoredSegment>& segs) {
    std::sort(segs.begin(), segs.end(), [](const ScoredSegment& a, const ScoredSegment& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        if (a.start_sec != b.start_sec) return a.start_sec < b.start_sec;
        return a.end_sec < b.end_sec;
    });
}

// Greedy one-to-one matching in descending confidence order: each prediction
// takes the unmatched ground-truth segment with the highest tIoU >= threshold.
// Returns (prediction index, gt index) pairs.
inline std::vector<std::pair<size_t, size_t>> greedy_match(
    const std::vector<ScoredSegment>& preds_sorted, const std::vector<EventSegment>& gt,
    double threshold) {
    std::vector<std::pair<size_t, size_t>> matches;
    std::vector<uint8_t> taken(gt.size(), 0);
    for (size_t p = 0; p < preds_sorted.size(); ++p) {
        double best = -1.0;
        size_t best_g = gt.size();
        for (size_t g = 0; g < gt.size(); ++g) {
            if (taken[g]) continue;
            const double t = tiou(preds_sorted[p].start_sec, preds_sorted[p].end_sec,
                                  gt[g].start_sec, gt[g].end_sec);
            if (t >= threshold && t > best) {
                best = t;
                best_g = g;
            }
        }
        if (best_g < gt.size()) {
            taken[best_g] = 1;
            matches.emplace_back(p, best_g);
        }
    }
    return matches;
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

namespace detail {

inline std::map<std::vector<std::string>, int64_t> ngram_counts(const std::vector<std::string>& toks,
                                                                size_t n) {
    std::map<std::vector<std::string>, int64_t> counts;
    if (toks.size() < n) return counts;
    for (size_t i = 0; i + n <= toks.size(); ++i)
        ++counts[std::vector<std::string>(toks.begin() + static_cast<long>(i),
                                          toks.begin() + static_cast<long>(i + n))];
    return counts;
}

} // namespace detail

// Corpus BLEU with uniform weights up to max_n, clipped counts and the
// standard brevity penalty. A missing n-gram order anywhere zeroes the score.
inline double bleu(const std::vector<std::vector<std::string>>& candidates,
                   const std::vector<std::vector<std::vector<std::string>>>& references,
                   int max_n) {
    if (max_n < 1 || max_n > 4) throw ConfigError("bleu: N must be in 1..4");
    if (candidates.empty()) throw DataError("bleu: empty candidate corpus");
    if (candidates.size() != references.size())
        throw DataError("bleu: candidate/reference counts differ");

    int64_t cand_total_len = 0;
    int64_t ref_total_len = 0;
    for (size_t i = 0; i < candidates.size(); ++i) {
        const auto c_len = static_cast<int64_t>(candidates[i].size());
        cand_total_len += c_len;
        if (references[i].empty()) throw DataError("bleu: candidate without references");
        // closest reference length; ties toward the shorter reference
        int64_t best_len = static_cast<int64_t>(references[i][0].size());
        for (const auto& r : references[i]) {
            const auto len = static_cast<int64_t>(r.size());
            if (std::abs(len - c_len) < std::abs(best_len - c_len) ||
                (std::abs(len - c_len) == std::abs(best_len - c_len) && len < best_len))
                best_len = len;
        }
        ref_total_len += best_len;
    }

    std::vector<double> precisions;
    for (int n = 1; n <= max_n; ++n) {
        int64_t matched = 0, total = 0;
        for (size_t i = 0; i < candidates.size(); ++i) {
            auto cand_counts = detail::ngram_counts(candidates[i], static_cast<size_t>(n));
            std::map<std::vector<std::string>, int64_t> ref_max;
            for (const auto& r : references[i])
                for (const auto& [ng, cnt] : detail::ngram_counts(r, static_cast<size_t>(n)))
                    ref_max[ng] = std::max(ref_max[ng], cnt);
            for (const auto& [ng, cnt] : cand_counts) {
                total += cnt;
                auto it = ref_max.find(ng);
                if (it != ref_max.end()) matched += std::min(cnt, it->second);
            }
        }
        if (total == 0 || matched == 0) return 0.0;
        precisions.push_back(static_cast<double>(matched) / static_cast<double>(total));
    }

    const double bp = cand_total_len > ref_total_len
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(ref_total_len) /
                                               static_cast<double>(cand_total_len));
    if (max_n == 1) return bp * precisions[0];
    double log_sum = 0.0;
    for (double p : precisions) log_sum += std::log(p);
    return bp * std::exp(log_sum / static_cast<double>(max_n));
}

// Single-reference convenience wrapper.
inline double bleu(const std::vector<std::vector<std::string>>& candidates,
                   const std::vector<std::vector<std::string>>& references, int max_n) {
    std::vector<std::vector<std::vector<std::string>>> wrapped;
    wrapped.reserve(references.size());
    for (const auto& r : references) wrapped.push_back({r});
    return bleu(candidates, wrapped, max_n);
}

// ---------------------------------------------------------------------------
// Precision / recall / F1 over tIoU thresholds
// ---------------------------------------------------------------------------

struct VideoScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double bleu3 = 0.0;
    double bleu4 = 0.0;
};

struct EvalReport {
    std::vector<double> thresholds;
    double precision = 0.0; // averaged over thresholds, then videos
    double recall = 0.0;
    double f1 = 0.0;
    std::vector<double> per_threshold_precision; // averaged over videos
    std::vector<double> per_threshold_recall;
    std::map<std::string, VideoScore> per_video;
    bool has_bleu = false;
    double bleu3 = 0.0;
    double bleu4 = 0.0;
    size_t ignored_prediction_videos = 0; // predictions without a GT record
};

// Averaging order is thresholds first, then videos; F1 is the harmonic mean
// of the aggregated precision and recall. A video with no predictions scores
// precision 0 (a video empty on both sides scores 1).
inline EvalReport proposal_prf(const PredictionSet& predictions, const AnnotationSet& ground_truth,
                               const std::vector<double>& thresholds = default_tiou_thresholds(),
                               bool with_bleu = false) {
    if (thresholds.empty()) throw ConfigError("proposal_prf: no thresholds");
    if (ground_truth.empty()) throw DataError("proposal_prf: empty ground truth");
    EvalReport report;
    report.thresholds = thresholds;
    report.per_threshold_precision.assign(thresholds.size(), 0.0);
    report.per_threshold_recall.assign(thresholds.size(), 0.0);
    for (const auto& [vid, segs] : predictions)
        if (!ground_truth.count(vid)) ++report.ignored_prediction_videos;

    static const std::vector<ScoredSegment> kNoPreds;
    for (const auto& [vid, ann] : ground_truth) {
        auto pit = predictions.find(vid);
        std::vector<ScoredSegment> preds = pit == predictions.end() ? kNoPreds : pit->second;
        sort_by_confidence(preds);

        VideoScore score;
        for (size_t ti = 0; ti < thresholds.size(); ++ti) {
            const auto matches = greedy_match(preds, ann.segments, thresholds[ti]);
            const auto tp = static_cast<double>(matches.size());
            double p, r;
            if (preds.empty())
                p = ann.segments.empty() ? 1.0 : 0.0;
            else
                p = tp / static_cast<double>(preds.size());
            r = ann.segments.empty() ? 1.0 : tp / static_cast<double>(ann.segments.size());
            score.precision += p;
            score.recall += r;
            report.per_threshold_precision[ti] += p;
            report.per_threshold_recall[ti] += r;

            if (with_bleu && !matches.empty()) {
                std::vector<std::vector<std::string>> cands, refs;
                for (const auto& [pi, gi] : matches) {
                    cands.push_back(tokenize(preds[pi].caption));
                    refs.push_back(tokenize(ann.segments[gi].sentence));
                }
                score.bleu3 += bleu(cands, refs, 3);
                score.bleu4 += bleu(cands, refs, 4);
            }
        }
        const auto nt = static_cast<double>(thresholds.size());
        score.precision /= nt;
        score.recall /= nt;
        score.bleu3 /= nt;
        score.bleu4 /= nt;
        score.f1 = (score.precision + score.recall) > 0.0
                       ? 2.0 * score.precision * score.recall / (score.precision + score.recall)
                       : 0.0;
        report.per_video.emplace(vid, score);
    }

    const auto nv = static_cast<double>(ground_truth.size());
    for (auto& v : report.per_threshold_precision) v /= nv;
    for (auto& v : report.per_threshold_recall) v /= nv;
    for (const auto& [vid, s] : report.per_video) {
        report.precision += s.precision;
        report.recall += s.recall;
        report.bleu3 += s.bleu3;
        report.bleu4 += s.bleu4;
    }
    report.precision /= nv;
    report.recall /= nv;
    report.bleu3 /= nv;
    report.bleu4 /= nv;
    report.has_bleu = with_bleu;
    report.f1 = (report.precision + report.recall) > 0.0
                    ? 2.0 * report.precision * report.recall / (report.precision + report.recall)
                    : 0.0;
    return report;
}

inline nlohmann::ordered_json eval_report_to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["protocol"] = {
        {"averaging", "thresholds-then-videos"},
        {"matching", "greedy one-to-one in descending confidence order"},
        {"empty_prediction_precision", 0.0},
        {"thresholds", r.thresholds},
    };
    j["aggregate"] = {{"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1}};
    nlohmann::ordered_json per_t = nlohmann::ordered_json::array();
    for (size_t i = 0; i < r.thresholds.size(); ++i)
        per_t.push_back({{"tiou", r.thresholds[i]},
                         {"precision", r.per_threshold_precision[i]},
                         {"recall", r.per_threshold_recall[i]}});
    j["per_threshold"] = per_t;
    if (r.has_bleu) j["bleu"] = {{"bleu3", r.bleu3}, {"bleu4", r.bleu4}};
    nlohmann::ordered_json per_v = nlohmann::ordered_json::object();
    for (const auto& [vid, s] : r.per_video) {
        nlohmann::ordered_json entry = {{"precision", s.precision},
                                        {"recall", s.recall},
                                        {"f1", s.f1}};
        if (r.has_bleu) {
            entry["bleu3"] = s.bleu3;
            entry["bleu4"] = s.bleu4;
        }
        per_v[vid] = entry;
    }
    j["per_video"] = per_v;
    if (r.ignored_prediction_videos > 0)
        j["ignored_prediction_videos"] = r.ignored_prediction_videos;
    return j;
}

// ---------------------------------------------------------------------------
// Prediction file format: one record per video, segments confidence-sorted.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json predictions_to_json(const PredictionSet& preds) {
    nlohmann::ordered_json results = nlohmann::ordered_json::array();
    for (const auto& [vid, segs] : preds) {
        std::vector<ScoredSegment> sorted = segs;
        sort_by_confidence(sorted);
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& s : sorted) {
            nlohmann::ordered_json e = {{"start_sec", s.start_sec},
                                        {"end_sec", s.end_sec},
                                        {"confidence", s.confidence}};
            if (!s.caption.empty()) e["caption"] = s.caption;
            arr.push_back(e);
        }
        results.push_back({{"video_id", vid}, {"segments", arr}});
    }
    return {{"results", results}};
}

inline PredictionSet predictions_from_json(const nlohmann::json& j, const std::string& source) {
    PredictionSet out;
    if (!j.contains("results") || !j.at("results").is_array())
        throw FormatError(source + ": prediction file must carry a \"results\" array");
    for (const auto& rec : j.at("results")) {
        const std::string vid = rec.at("video_id").get<std::string>();
        if (out.count(vid)) throw DataError(source + ": duplicate video id \"" + vid + "\"");
        std::vector<ScoredSegment> segs;
        for (const auto& e : rec.at("segments")) {
            ScoredSegment s;
            s.start_sec = e.at("start_sec").get<double>();
            s.end_sec = e.at("end_sec").get<double>();
            s.confidence = e.value("confidence", 1.0);
            s.caption = e.value("caption", std::string{});
            segs.push_back(std::move(s));
        }
        out.emplace(vid, std::move(segs));
    }
    return out;
}

inline void save_predictions(const std::filesystem::path& path, const PredictionSet& preds) {
    write_file_atomic(path, predictions_to_json(preds).dump(2) + "\n");
}

inline PredictionSet load_predictions(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return predictions_from_json(j, path.string());
}

} // namespace bmt
