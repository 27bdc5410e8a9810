// Independent test oracles: finite differences, brute-force convolution,
// exhaustive/multi-restart K-means, dynamic-programming 1-D K-means, and an
// optimal bipartite matcher. These deliberately avoid the library's own code
// paths for the quantities they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "bmt/metrics.hpp"
#include "bmt/rng.hpp"
#include "bmt/tensor.hpp"

namespace oracle {

// ---------------------------------------------------------------------------
// Central finite differences
// ---------------------------------------------------------------------------

struct GradCheck {
    double max_rel_err = 0.0;
    size_t checked = 0;
};

// Compares reverse-mode gradients of `make_loss` against central differences
// for every entry of every leaf. Error is |ad - fd| / max(1, |ad|, |fd|).
// An entry that misses the tolerance at the primary step is re-adjudicated at
// smaller steps: a kink (ReLU) within h of the evaluation point contaminates
// the h-sized stencil but vanishes as h shrinks, while a genuinely wrong
// reverse-mode gradient keeps failing at every step size.
template <class LossFn>
GradCheck gradcheck(LossFn make_loss, std::vector<bmt::Tensor> leaves, double h = 1e-5,
                    double tol = 1e-3) {
    for (auto& t : leaves) t.zero_grad();
    bmt::Tensor loss = make_loss();
    bmt::backward(loss);
    std::vector<std::vector<double>> ad;
    ad.reserve(leaves.size());
    for (auto& t : leaves) ad.push_back(t.grad());

    GradCheck result;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& vals = leaves[li].leaf_values_mut();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            auto fd_at = [&](double step) {
                vals[i] = orig + step;
                const double f_plus = make_loss().item();
                vals[i] = orig - step;
                const double f_minus = make_loss().item();
                vals[i] = orig;
                return (f_plus - f_minus) / (2.0 * step);
            };
            auto rel_err = [&](double fd) {
                return std::abs(ad[li][i] - fd) / std::max({1.0, std::abs(ad[li][i]), std::abs(fd)});
            };
            double err = rel_err(fd_at(h));
            for (double refined : {h * 0.1, h * 0.01}) {
                if (err <= tol) break;
                err = std::min(err, rel_err(fd_at(refined)));
            }
            result.max_rel_err = std::max(result.max_rel_err, err);
            ++result.checked;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Brute-force 1-D convolution (zero padding, stride 1)
// ---------------------------------------------------------------------------

inline std::vector<double> conv1d_brute(const std::vector<double>& x, size_t T, size_t din,
                                        const std::vector<double>& w, size_t k, size_t dout) {
    std::vector<double> out(T * dout, 0.0);
    const long long half = static_cast<long long>((k - 1) / 2);
    for (size_t t = 0; t < T; ++t)
        for (size_t o = 0; o < dout; ++o) {
            double acc = 0.0;
            for (size_t j = 0; j < k; ++j)
                for (size_t i = 0; i < din; ++i) {
                    const long long src = static_cast<long long>(t) + static_cast<long long>(j) - half;
                    if (src < 0 || src >= static_cast<long long>(T)) continue;
                    acc += x[static_cast<size_t>(src) * din + i] * w[(j * din + i) * dout + o];
                }
            out[t * dout + o] = acc;
        }
    return out;
}

// ---------------------------------------------------------------------------
// K-means oracles
// ---------------------------------------------------------------------------

inline double inertia_1d(const std::vector<double>& xs, const std::vector<double>& centers) {
    double total = 0.0;
    for (double x : xs) {
        double best = std::numeric_limits<double>::infinity();
        for (double c : centers) best = std::min(best, (x - c) * (x - c));
        total += best;
    }
    return total;
}

// Plain Lloyd iteration written independently of the library version.
inline double lloyd_once_1d(const std::vector<double>& xs, std::vector<double> centers) {
    const size_t n = xs.size();
    const size_t k = centers.size();
    for (int iter = 0; iter < 500; ++iter) {
        std::vector<double> sums(k, 0.0);
        std::vector<size_t> counts(k, 0);
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
            sums[best] += xs[i];
            ++counts[best];
        }
        bool moved = false;
        for (size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue; // oracle keeps empty centers in place
            const double next = sums[c] / static_cast<double>(counts[c]);
            if (next != centers[c]) moved = true;
            centers[c] = next;
        }
        if (!moved) break;
    }
    return inertia_1d(xs, centers);
}

// Best inertia over many Lloyd restarts: exhaustive over distinct-point
// initial subsets when feasible, random subsets otherwise.
inline double kmeans_multirestart_best_inertia(const std::vector<double>& xs, int k, uint64_t seed,
                                               size_t exhaustive_limit = 25000,
                                               int sampled_restarts = 2000) {
    std::vector<double> distinct(xs);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    const size_t m = distinct.size();
    const auto uk = static_cast<size_t>(k);

    // count combinations C(m, k) with saturation
    double comb = 1.0;
    for (size_t i = 0; i < uk; ++i) comb = comb * static_cast<double>(m - i) / static_cast<double>(i + 1);

    double best = std::numeric_limits<double>::infinity();
    if (comb <= static_cast<double>(exhaustive_limit)) {
        std::vector<size_t> idx(uk);
        for (size_t i = 0; i < uk; ++i) idx[i] = i;
        while (true) {
            std::vector<double> centers;
            for (size_t i : idx) centers.push_back(distinct[i]);
            best = std::min(best, lloyd_once_1d(xs, std::move(centers)));
            // next combination
            size_t pos = uk;
            while (pos > 0) {
                --pos;
                if (idx[pos] != m - uk + pos) break;
                if (pos == 0) return best;
            }
            if (idx[pos] == m - uk + pos) return best;
            ++idx[pos];
            for (size_t j = pos + 1; j < uk; ++j) idx[j] = idx[j - 1] + 1;
        }
    }
    bmt::Rng rng(seed);
    for (int r = 0; r < sampled_restarts; ++r) {
        std::vector<size_t> pool(m);
        for (size_t i = 0; i < m; ++i) pool[i] = i;
        rng.shuffle(pool);
        std::vector<double> centers;
        for (size_t i = 0; i < uk; ++i) centers.push_back(distinct[pool[i]]);
        best = std::min(best, lloyd_once_1d(xs, std::move(centers)));
    }
    return best;
}

// Exact optimum for 1-D k-means by dynamic programming over the sorted points.
inline double kmeans_dp_optimal_inertia(std::vector<double> xs, int k) {
    std::sort(xs.begin(), xs.end());
    const size_t n = xs.size();
    const auto uk = static_cast<size_t>(k);
    std::vector<double> prefix(n + 1, 0.0), prefix_sq(n + 1, 0.0);
    for (size_t i = 0; i < n; ++i) {
        prefix[i + 1] = prefix[i] + xs[i];
        prefix_sq[i + 1] = prefix_sq[i] + xs[i] * xs[i];
    }
    // cost of one cluster covering points [i, j] inclusive
    auto cluster_cost = [&](size_t i, size_t j) {
        const double cnt = static_cast<double>(j - i + 1);
        const double s = prefix[j + 1] - prefix[i];
        const double sq = prefix_sq[j + 1] - prefix_sq[i];
        return sq - s * s / cnt;
    };
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> dp(uk + 1, std::vector<double>(n + 1, inf));
    dp[0][0] = 0.0;
    for (size_t m = 1; m <= uk; ++m)
        for (size_t j = 1; j <= n; ++j)
            for (size_t i = m; i <= j; ++i) {
                const double cand = dp[m - 1][i - 1] + cluster_cost(i - 1, j - 1);
                dp[m][j] = std::min(dp[m][j], cand);
            }
    return dp[uk][n];
}

// ---------------------------------------------------------------------------
// Optimal one-to-one matching (augmenting paths on the tIoU >= theta graph)
// ---------------------------------------------------------------------------

inline size_t optimal_match_count(const std::vector<bmt::ScoredSegment>& preds,
                                  const std::vector<bmt::EventSegment>& gt, double threshold) {
    const size_t np = preds.size(), ng = gt.size();
    std::vector<std::vector<size_t>> adj(np);
    for (size_t p = 0; p < np; ++p)
        for (size_t g = 0; g < ng; ++g)
            if (bmt::tiou(preds[p].start_sec, preds[p].end_sec, gt[g].start_sec, gt[g].end_sec) >=
                threshold)
                adj[p].push_back(g);
    std::vector<long long> match_gt(ng, -1);
    std::function<bool(size_t, std::vector<uint8_t>&)> try_assign =
        [&](size_t p, std::vector<uint8_t>& visited) {
            for (size_t g : adj[p]) {
                if (visited[g]) continue;
                visited[g] = 1;
                if (match_gt[g] < 0 || try_assign(static_cast<size_t>(match_gt[g]), visited)) {
                    match_gt[g] = static_cast<long long>(p);
                    return true;
                }
            }
            return false;
        };
    size_t matched = 0;
    for (size_t p = 0; p < np; ++p) {
        std::vector<uint8_t> visited(ng, 0);
        if (try_assign(p, visited)) ++matched;
    }
    return matched;
}

// Random tensor helper for property tests.
inline bmt::Tensor random_tensor(bmt::Shape shape, bmt::Rng& rng, double lo = -1.0, double hi = 1.0,
                                 bool requires_grad = true) {
    return bmt::Tensor::uniform(std::move(shape), lo, hi, rng, requires_grad);
}

} // namespace oracle
