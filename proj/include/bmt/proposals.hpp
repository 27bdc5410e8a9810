#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "bmt/config.hpp"
#include "bmt/data.hpp"
#include "bmt/encoder.hpp"
#include "bmt/model.hpp"
#include "bmt/tensor.hpp"

namespace bmt {

// ---------------------------------------------------------------------------
// K-means over ground-truth segment lengths
// ---------------------------------------------------------------------------

struct KmeansResult {
    std::vector<double> centroids; // sorted ascending
    double inertia = 0.0;
};

namespace detail {

inline double kmeans_inertia(const std::vector<double>& xs, const std::vector<double>& centers) {
    double total = 0.0;
    for (double x : xs) {
        double best = std::numeric_limits<double>::infinity();
        for (double c : centers) best = std::min(best, (x - c) * (x - c));
        total += best;
    }
    return total;
}

// One Lloyd run from the given initial centers; empty clusters are reseeded
// to the point farthest from every current center.
inline KmeansResult lloyd_run(const std::vector<double>& xs, std::vector<double> centers,
                              int max_iters) {
    const size_t n = xs.size();
    const size_t k = centers.size();
    std::vector<size_t> assign(n, 0);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = iter == 0;
        for (size_t i = 0; i < n; ++i) {
            size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (size_t c = 0; c < k; ++c) {
                const double d = (xs[i] - centers[c]) * (xs[i] - centers[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (assign[i] != best || iter == 0) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed) break;
        std::vector<double> sums(k, 0.0);
        std::vector<size_t> counts(k, 0);
        for (size_t i = 0; i < n; ++i) {
            sums[assign[i]] += xs[i];
            ++counts[assign[i]];
        }
        bool stable = true;
        for (size_t c = 0; c < k; ++c) {
            double next;
            if (counts[c] == 0) {
                // reseed to the farthest point
                size_t far = 0;
                double far_d = -1.0;
                for (size_t i = 0; i < n; ++i) {
                    double d = std::numeric_limits<double>::infinity();
                    for (double cc : centers) d = std::min(d, (xs[i] - cc) * (xs[i] - cc));
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                next = xs[far];
            } else {
                next = sums[c] / static_cast<double>(counts[c]);
            }
            if (next != centers[c]) stable = false;
            centers[c] = next;
        }
        if (stable) break;
    }
    KmeansResult r;
    r.centroids = std::move(centers);
    std::sort(r.centroids.begin(), r.centroids.end());
    r.inertia = kmeans_inertia(xs, r.centroids);
    return r;
}

inline std::vector<double> kmeanspp_init(const std::vector<double>& xs, size_t k, Rng& rng) {
    std::vector<double> centers;
    centers.push_back(xs[rng.uniform_index(xs.size())]);
    std::vector<double> d2(xs.size());
    while (centers.size() < k) {
        double total = 0.0;
        for (size_t i = 0; i < xs.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (double c : centers) best = std::min(best, (xs[i] - c) * (xs[i] - c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) {
            centers.push_back(xs[rng.uniform_index(xs.size())]);
            continue;
        }
        double threshold = rng.uniform() * total;
        size_t pick = xs.size() - 1;
        double acc = 0.0;
        for (size_t i = 0; i < xs.size(); ++i) {
            acc += d2[i];
            if (acc >= threshold) {
                pick = i;
                break;
            }
        }
        centers.push_back(xs[pick]);
    }
    return centers;
}

} // namespace detail

// Seeded k-means++ Lloyd with restarts (plus one deterministic quantile
// spread); deterministic for a given seed.
inline KmeansResult kmeans_1d(const std::vector<double>& xs, int k, uint64_t seed,
                              int restarts = 256, int max_iters = 300) {
    if (k < 1) throw ConfigError("kmeans_1d: cluster count must be >= 1");
    std::set<double> distinct(xs.begin(), xs.end());
    if (static_cast<int>(distinct.size()) < k)
        throw DataError("kmeans_1d: need at least " + std::to_string(k) +
                        " distinct values, got " + std::to_string(distinct.size()));
    // restart 0: centers spread over the sorted distinct values
    std::vector<double> sorted(distinct.begin(), distinct.end());
    std::vector<double> spread;
    for (int c = 0; c < k; ++c) {
        const size_t idx = k == 1 ? sorted.size() / 2
                                  : (static_cast<size_t>(c) * (sorted.size() - 1)) /
                                        static_cast<size_t>(k - 1);
        spread.push_back(sorted[idx]);
    }
    KmeansResult best = detail::lloyd_run(xs, std::move(spread), max_iters);

    Rng rng(seed);
    for (int r = 0; r < restarts; ++r) {
        auto centers = detail::kmeanspp_init(xs, static_cast<size_t>(k), rng);
        KmeansResult run = detail::lloyd_run(xs, std::move(centers), max_iters);
        if (run.inertia < best.inertia) best = std::move(run);
    }
    return best;
}

// ---------------------------------------------------------------------------
// Anchors and kernel sizes
// ---------------------------------------------------------------------------

// Segment-length priors, expressed in grid-cell units of the modality.
struct AnchorSet {
    Modality modality = Modality::audio;
    std::vector<double> anchors_cells; // strictly positive, ascending
    double cell_seconds = 1.0;
};

inline AnchorSet estimate_anchors(const std::vector<double>& gt_lengths_sec, int count,
                                  double cell_seconds, uint64_t seed,
                                  Modality modality = Modality::audio) {
    if (count < 1) throw ConfigError("estimate_anchors: count must be >= 1");
    if (cell_seconds <= 0.0) throw ConfigError("estimate_anchors: cell_seconds must be positive");
    const KmeansResult km = kmeans_1d(gt_lengths_sec, count, seed);
    AnchorSet a;
    a.modality = modality;
    a.cell_seconds = cell_seconds;
    for (double c : km.centroids) a.anchors_cells.push_back(c / cell_seconds);
    return a;
}

// Smallest odd integer >= x (an odd value stays put).
inline int next_odd(double x) {
    int c = static_cast<int>(std::ceil(x));
    if (c < 1) c = 1;
    return c % 2 == 0 ? c + 1 : c;
}

// Kernel sizes are the same centroids in cell units, rounded up to odd;
// duplicates are bumped by +2 so the head set keeps `count` distinct sizes.
inline std::vector<int> estimate_kernel_sizes(const std::vector<double>& gt_lengths_sec, int count,
                                              double cell_seconds, uint64_t seed) {
    if (cell_seconds <= 0.0) throw ConfigError("estimate_kernel_sizes: cell_seconds must be positive");
    const KmeansResult km = kmeans_1d(gt_lengths_sec, count, seed);
    std::vector<int> sizes;
    for (double c : km.centroids) sizes.push_back(next_odd(c / cell_seconds));
    std::sort(sizes.begin(), sizes.end());
    for (size_t i = 1; i < sizes.size(); ++i)
        if (sizes[i] <= sizes[i - 1]) sizes[i] = sizes[i - 1] + 2;
    return sizes;
}

// ---------------------------------------------------------------------------
// Proposal generation head
// ---------------------------------------------------------------------------

struct ProposalHeadConfig {
    int kernel_size = 1;
    int hidden = 512;
    int input_dim = 0;
    int anchor_count = 0;
    double dropout = 0.1;
};

// Fully-convolutional head: conv(k) -> ReLU -> dropout -> conv(1) -> ReLU ->
// dropout -> conv(1), preserving the sequence length. Output [T x |Psi| x 3]
// of raw (c, l, o) per position and anchor.
inline Tensor proposal_head_forward(const Tensor& x, const ProposalHeadConfig& cfg,
                                    const ProposalHeadParams& p, const TrainContext& ctx) {
    if (x.rank() != 2 || x.cols() != static_cast<size_t>(cfg.input_dim))
        throw DimensionError("proposal_head_forward: input " + shape_str(x.shape()) +
                             " does not match configured width " + std::to_string(cfg.input_dim));
    if (p.kernel_size != cfg.kernel_size)
        throw ConfigError("proposal_head_forward: parameter kernel size " +
                          std::to_string(p.kernel_size) + " differs from config " +
                          std::to_string(cfg.kernel_size));
    Tensor h = relu(add_bias(conv1d(x, p.w1), p.b1));
    if (ctx.train && cfg.dropout > 0.0) h = dropout(h, cfg.dropout, *ctx.rng);
    h = relu(add_bias(conv1d(h, p.w2), p.b2));
    if (ctx.train && cfg.dropout > 0.0) h = dropout(h, cfg.dropout, *ctx.rng);
    Tensor raw = add_bias(conv1d(h, p.w3), p.b3);
    return reshape(raw, {x.rows(), static_cast<size_t>(cfg.anchor_count), 3});
}

// Zeroes the padded rows so convolutions see exactly the virtual zero padding.
inline Tensor mask_rows(const Tensor& x, const std::vector<uint8_t>& valid) {
    if (x.rank() != 2 || valid.size() != x.rows())
        throw DimensionError("mask_rows: mask length does not match row count");
    std::vector<double> m(x.size());
    for (size_t r = 0; r < x.rows(); ++r)
        std::fill(m.begin() + static_cast<long>(r * x.cols()),
                  m.begin() + static_cast<long>((r + 1) * x.cols()), valid[r] ? 1.0 : 0.0);
    return mul(x, Tensor::from_values(x.shape(), std::move(m)));
}

// ---------------------------------------------------------------------------
// Decoding and pooling
// ---------------------------------------------------------------------------

struct Proposal {
    double center_sec = 0.0;
    double length_sec = 0.0;
    double confidence = 0.0;
    Modality modality = Modality::audio;
    int head_index = 0;
    int position = 0;
    int anchor_index = 0;

    double start_sec() const { return std::max(0.0, center_sec - length_sec / 2.0); }
    double end_sec() const { return center_sec + length_sec / 2.0; }
};

// center = (p + sigma(c)) * cell, length = anchor * exp(l) * cell,
// confidence = sigma(o); l is clamped to [-8, 8] before exponentiation.
inline Proposal decode_proposal(double c, double l, double o, int position, double anchor_cells,
                                double cell_seconds, Modality modality = Modality::audio,
                                int head_index = 0, int anchor_index = 0) {
    if (anchor_cells <= 0.0)
        throw ContractError("decode_proposal: anchor must be positive, got " +
                            std::to_string(anchor_cells));
    const double l_clamped = std::clamp(l, -8.0, 8.0);
    Proposal p;
    p.center_sec = (static_cast<double>(position) + detail::stable_sigmoid(c)) * cell_seconds;
    p.length_sec = anchor_cells * std::exp(l_clamped) * cell_seconds;
    p.confidence = detail::stable_sigmoid(o);
    p.modality = modality;
    p.head_index = head_index;
    p.position = position;
    p.anchor_index = anchor_index;
    return p;
}

namespace detail {

// Confidence descending; ties broken toward earlier centers, audio before
// visual, then head and anchor indices, so the ranking is total.
inline bool proposal_order(const Proposal& a, const Proposal& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.center_sec != b.center_sec) return a.center_sec < b.center_sec;
    if (a.modality != b.modality) return a.modality == Modality::audio;
    if (a.head_index != b.head_index) return a.head_index < b.head_index;
    if (a.position != b.position) return a.position < b.position;
    return a.anchor_index < b.anchor_index;
}

inline void decode_modality_pool(const Tensor& features, const std::vector<uint8_t>& valid,
                                 const std::vector<ProposalHeadParams>& heads,
                                 const AnchorSet& anchors, int head_hidden, double head_dropout,
                                 std::vector<Proposal>& pool) {
    if (heads.empty()) return;
    const TrainContext ctx = TrainContext::eval();
    Tensor x = mask_rows(features, valid);
    for (size_t hi = 0; hi < heads.size(); ++hi) {
        ProposalHeadConfig hc;
        hc.kernel_size = heads[hi].kernel_size;
        hc.hidden = head_hidden;
        hc.input_dim = static_cast<int>(features.cols());
        hc.anchor_count = static_cast<int>(anchors.anchors_cells.size());
        hc.dropout = head_dropout;
        Tensor raw = proposal_head_forward(x, hc, heads[hi], ctx);
        for (size_t pos = 0; pos < features.rows(); ++pos) {
            if (!valid[pos]) continue;
            for (size_t a = 0; a < anchors.anchors_cells.size(); ++a)
                pool.push_back(decode_proposal(raw.at(pos, a, 0), raw.at(pos, a, 1), raw.at(pos, a, 2),
                                               static_cast<int>(pos), anchors.anchors_cells[a],
                                               anchors.cell_seconds, anchors.modality,
                                               static_cast<int>(hi), static_cast<int>(a)));
        }
    }
}

} // namespace detail

// Fills one common pool from every head of both modalities, ranks it by
// confidence and returns the top_k. No NMS.
inline std::vector<Proposal> generate_proposals(const BiModalFeatures& enc,
                                                const ProposalModelParams& params,
                                                const ProposalConfig& pcfg,
                                                const AnchorSet& anchors_audio,
                                                const AnchorSet& anchors_visual, int top_k = 100) {
    if (top_k <= 0) throw ConfigError("generate_proposals: top_k must be positive");
    std::vector<Proposal> pool;
    detail::decode_modality_pool(enc.audio, enc.audio_valid, params.heads_audio, anchors_audio,
                                 pcfg.head_hidden, pcfg.head_dropout, pool);
    detail::decode_modality_pool(enc.visual, enc.visual_valid, params.heads_visual, anchors_visual,
                                 pcfg.head_hidden, pcfg.head_dropout, pool);
    std::sort(pool.begin(), pool.end(), detail::proposal_order);
    if (pool.size() > static_cast<size_t>(top_k)) pool.resize(static_cast<size_t>(top_k));
    return pool;
}

// ---------------------------------------------------------------------------
// Feature clipping
// ---------------------------------------------------------------------------

namespace detail {

inline FeatureSequence clip_one(const FeatureSequence& f, double start_sec, double end_sec) {
    // keep rows whose [t*cell, (t+1)*cell) span intersects [start, end)
    long long first = -1, last = -1;
    for (size_t t = 0; t < f.T; ++t) {
        const double row_start = static_cast<double>(t) * f.cell_seconds;
        const double row_end = row_start + f.cell_seconds;
        if (row_start < end_sec && row_end > start_sec) {
            if (first < 0) first = static_cast<long long>(t);
            last = static_cast<long long>(t);
        }
    }
    if (first < 0) {
        // degenerate rounding: fall back to the row containing the segment center
        const double center = (start_sec + end_sec) / 2.0;
        auto row = static_cast<long long>(std::floor(center / f.cell_seconds));
        row = std::clamp(row, 0ll, static_cast<long long>(f.T) - 1);
        first = last = row;
    }
    FeatureSequence out;
    out.modality = f.modality;
    out.cell_seconds = f.cell_seconds;
    out.d = f.d;
    out.T = static_cast<size_t>(last - first + 1);
    out.values.assign(f.values.begin() + static_cast<long>(static_cast<size_t>(first) * f.d),
                      f.values.begin() + static_cast<long>((static_cast<size_t>(last) + 1) * f.d));
    return out;
}

} // namespace detail

// Clips both modality tracks to the rows intersecting [start, end); the two
// clipped lengths generally differ because the cell granularities do.
inline std::pair<FeatureSequence, FeatureSequence> clip_features(const FeatureSequence& audio,
                                                                 const FeatureSequence& visual,
                                                                 double start_sec, double end_sec) {
    if (!(end_sec > start_sec))
        throw ContractError("clip_features: zero-length segment [" + std::to_string(start_sec) +
                            ", " + std::to_string(end_sec) + ")");
    const double extent = std::max(audio.span_seconds(), visual.span_seconds());
    if (end_sec <= 0.0 || start_sec >= extent)
        throw ContractError("clip_features: segment does not overlap the video extent");
    return {detail::clip_one(audio, start_sec, end_sec), detail::clip_one(visual, start_sec, end_sec)};
}

} // namespace bmt
