#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "bmt/errors.hpp"
#include "bmt/rng.hpp"

namespace bmt {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Row-major boolean matrix; true marks a position that participates.
struct BoolMask {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<uint8_t> data;

    BoolMask() = default;
    BoolMask(size_t r, size_t c, bool fill = true) : rows(r), cols(c), data(r * c, fill ? 1 : 0) {}

    bool at(size_t r, size_t c) const { return data[r * cols + c] != 0; }
    void set(size_t r, size_t c, bool v) { data[r * cols + c] = v ? 1 : 0; }
};

namespace detail {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// Gradient sinks parallel the node's inputs; a null sink marks an untracked input.
using GradSinks = std::vector<std::vector<double>*>;
using BackwardFn =
    std::function<void(const TensorNode& self, const std::vector<double>& out_grad, const GradSinks& sinks)>;

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false; // leaf flag
    std::vector<double> grad;   // lazily populated by backward()
    std::vector<NodePtr> inputs;
    BackwardFn backward;

    bool tracked() const { return requires_grad || static_cast<bool>(backward); }
};

} // namespace detail

// Value-semantic handle to an immutable dense array. Arithmetic on tracked
// tensors records the operation graph; backward() replays it in reverse.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        return make(std::move(shape), value, requires_grad);
    }

    static Tensor scalar(double value) {
        Tensor t = make({1}, value, false);
        return t;
    }

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = rng.uniform(lo, hi);
        return from_values(std::move(shape), std::move(v), requires_grad);
    }

    // Glorot-style init: uniform in +-sqrt(6 / (fan_in + fan_out)).
    static Tensor xavier(size_t fan_in, size_t fan_out, Rng& rng, bool requires_grad = true) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        return uniform({fan_in, fan_out}, -bound, bound, rng, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    size_t size() const { return node_->values.size(); }
    size_t rank() const { return node_->shape.size(); }

    size_t rows() const {
        require_rank(2, "rows()");
        return node_->shape[0];
    }
    size_t cols() const {
        require_rank(2, "cols()");
        return node_->shape[1];
    }

    const std::vector<double>& values() const { return node_->values; }

    double at(size_t i) const { return node_->values[i]; }
    double at(size_t i, size_t j) const { return node_->values[i * node_->shape[1] + j]; }
    double at(size_t i, size_t j, size_t k) const {
        return node_->values[(i * node_->shape[1] + j) * node_->shape[2] + k];
    }

    double item() const {
        if (size() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool tracked() const { return node_->tracked(); }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (node_->grad.empty())
            throw ContractError("gradient not populated; run backward() first");
        return node_->grad;
    }

    void zero_grad() { node_->grad.clear(); }

    // In-place value update, used by optimizers on leaf parameters only.
    std::vector<double>& leaf_values_mut() {
        if (!node_->inputs.empty())
            throw ContractError("in-place update is only allowed on leaf tensors");
        return node_->values;
    }

    detail::NodePtr node() const { return node_; }

    static Tensor wrap(detail::NodePtr n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    static Tensor make(Shape shape, double fill, bool requires_grad) {
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        const size_t n = shape_numel(shape);
        t.node_->shape = std::move(shape);
        t.node_->values.assign(n, fill);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    void require_rank(size_t r, const char* what) const {
        if (node_->shape.size() != r)
            throw DimensionError(std::string(what) + " requires rank-" + std::to_string(r) +
                                 " tensor, got " + shape_str(shape()));
    }

    detail::NodePtr node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> values, std::vector<NodePtr> inputs,
                      BackwardFn backward) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    bool any_tracked = false;
    for (const auto& in : inputs)
        if (in->tracked()) any_tracked = true;
    if (any_tracked) {
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
    }
    return Tensor::wrap(std::move(node));
}

inline void add_into(std::vector<double>* sink, const std::vector<double>& src) {
    if (!sink) return;
    for (size_t i = 0; i < src.size(); ++i) (*sink)[i] += src[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < m; ++i) {
        for (size_t kk = 0; kk < k; ++kk) {
            const double s = av[i * k + kk];
            if (s == 0.0) continue;
            const double* brow = bv.data() + kk * n;
            double* orow = out.data() + i * n;
            for (size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
        }
    }
    return detail::make_op(
        {m, n}, std::move(out), {a.node(), b.node()},
        [m, k, n](const detail::TensorNode& self, const std::vector<double>& g,
                  const detail::GradSinks& sinks) {
            const auto& av = self.inputs[0]->values;
            const auto& bv = self.inputs[1]->values;
            if (sinks[0]) { // dA = g . B^T
                auto& da = *sinks[0];
                for (size_t i = 0; i < m; ++i)
                    for (size_t kk = 0; kk < k; ++kk) {
                        const double* grow = g.data() + i * n;
                        const double* brow = bv.data() + kk * n;
                        double acc = 0.0;
                        for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        da[i * k + kk] += acc;
                    }
            }
            if (sinks[1]) { // dB = A^T . g
                auto& db = *sinks[1];
                for (size_t i = 0; i < m; ++i)
                    for (size_t kk = 0; kk < k; ++kk) {
                        const double s = av[i * k + kk];
                        if (s == 0.0) continue;
                        const double* grow = g.data() + i * n;
                        double* drow = db.data() + kk * n;
                        for (size_t j = 0; j < n; ++j) drow[j] += s * grow[j];
                    }
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2)
        throw DimensionError("transpose requires a rank-2 tensor, got " + shape_str(a.shape()));
    const size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto& av = a.values();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    return detail::make_op({n, m}, std::move(out), {a.node()},
                           [m, n](const detail::TensorNode&, const std::vector<double>& g,
                                  const detail::GradSinks& sinks) {
                               if (!sinks[0]) return;
                               auto& da = *sinks[0];
                               for (size_t i = 0; i < m; ++i)
                                   for (size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
                           });
}

namespace detail {

enum class BinOp { add, sub, mul };

inline Tensor binary_ew(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
    const bool b_scalar = b.size() == 1 && a.size() != 1;
    const bool a_scalar = a.size() == 1 && b.size() != 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()) +
                             " (only exact-shape and scalar broadcast supported)");
    const Tensor& big = a_scalar ? b : a;
    const size_t n = big.size();
    std::vector<double> out(n);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < n; ++i) {
        const double x = a_scalar ? av[0] : av[i];
        const double y = b_scalar ? bv[0] : bv[i];
        out[i] = op == BinOp::add ? x + y : op == BinOp::sub ? x - y : x * y;
    }
    return make_op(
        big.shape(), std::move(out), {a.node(), b.node()},
        [op, a_scalar, b_scalar, n](const TensorNode& self, const std::vector<double>& g,
                                    const GradSinks& sinks) {
            const auto& av = self.inputs[0]->values;
            const auto& bv = self.inputs[1]->values;
            if (sinks[0]) {
                auto& da = *sinks[0];
                for (size_t i = 0; i < n; ++i) {
                    const double y = b_scalar ? bv[0] : bv[i];
                    const double gi = op == BinOp::mul ? g[i] * y : g[i];
                    da[a_scalar ? 0 : i] += gi;
                }
            }
            if (sinks[1]) {
                auto& db = *sinks[1];
                for (size_t i = 0; i < n; ++i) {
                    const double x = a_scalar ? av[0] : av[i];
                    const double gi = op == BinOp::mul ? g[i] * x : op == BinOp::sub ? -g[i] : g[i];
                    db[b_scalar ? 0 : i] += gi;
                }
            }
        });
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_ew(a, b, detail::BinOp::add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_ew(a, b, detail::BinOp::sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_ew(a, b, detail::BinOp::mul, "mul"); }

inline Tensor scale(const Tensor& a, double s) {
    const size_t n = a.size();
    std::vector<double> out(n);
    const auto& av = a.values();
    for (size_t i = 0; i < n; ++i) out[i] = av[i] * s;
    return detail::make_op(a.shape(), std::move(out), {a.node()},
                           [s, n](const detail::TensorNode&, const std::vector<double>& g,
                                  const detail::GradSinks& sinks) {
                               if (!sinks[0]) return;
                               auto& da = *sinks[0];
                               for (size_t i = 0; i < n; ++i) da[i] += g[i] * s;
                           });
}

// y = x + bias broadcast over the last dimension.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.shape()[0])
        throw DimensionError("add_bias: incompatible shapes " + shape_str(x.shape()) + " and " +
                             shape_str(bias.shape()));
    const size_t d = bias.size();
    const size_t n = x.size();
    std::vector<double> out(n);
    const auto& xv = x.values();
    const auto& bv = bias.values();
    for (size_t i = 0; i < n; ++i) out[i] = xv[i] + bv[i % d];
    return detail::make_op(x.shape(), std::move(out), {x.node(), bias.node()},
                           [n, d](const detail::TensorNode&, const std::vector<double>& g,
                                  const detail::GradSinks& sinks) {
                               if (sinks[0]) detail::add_into(sinks[0], g);
                               if (sinks[1]) {
                                   auto& db = *sinks[1];
                                   for (size_t i = 0; i < n; ++i) db[i % d] += g[i];
                               }
                           });
}

namespace detail {

template <class Fwd, class Bwd>
Tensor unary_ew(const Tensor& a, Fwd fwd, Bwd bwd_from_xy) {
    const size_t n = a.size();
    std::vector<double> out(n);
    const auto& av = a.values();
    for (size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
    return make_op(a.shape(), std::move(out), {a.node()},
                   [bwd_from_xy, n](const TensorNode& self, const std::vector<double>& g,
                                    const GradSinks& sinks) {
                       if (!sinks[0]) return;
                       auto& da = *sinks[0];
                       const auto& xv = self.inputs[0]->values;
                       const auto& yv = self.values;
                       for (size_t i = 0; i < n; ++i) da[i] += g[i] * bwd_from_xy(xv[i], yv[i]);
                   });
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace detail

inline Tensor relu(const Tensor& a) {
    return detail::unary_ew(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_ew(
        a, [](double x) { return detail::stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_ew(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// Clamped log; keeps the loss finite when a distribution entry underflows.
inline Tensor log(const Tensor& a) {
    return detail::unary_ew(
        a, [](double x) { return std::log(std::max(x, 1e-300)); },
        [](double x, double) { return 1.0 / std::max(x, 1e-300); });
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    const size_t n = a.size();
    return detail::make_op({1}, {acc}, {a.node()},
                           [n](const detail::TensorNode&, const std::vector<double>& g,
                               const detail::GradSinks& sinks) {
                               if (!sinks[0]) return;
                               auto& da = *sinks[0];
                               for (size_t i = 0; i < n; ++i) da[i] += g[0];
                           });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Row-wise masked softmax, stabilized by subtracting the row max over the
// unmasked entries. Masked positions come out exactly 0.
inline Tensor softmax_rows(const Tensor& x, const BoolMask* mask = nullptr) {
    if (x.rank() != 2)
        throw DimensionError("softmax_rows requires a rank-2 tensor, got " + shape_str(x.shape()));
    const size_t m = x.rows(), n = x.cols();
    if (mask && (mask->rows != m || mask->cols != n))
        throw DimensionError("softmax_rows: mask shape [" + std::to_string(mask->rows) + "x" +
                             std::to_string(mask->cols) + "] does not match input " +
                             shape_str(x.shape()));
    std::vector<double> out(m * n, 0.0);
    const auto& xv = x.values();
    for (size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < n; ++j)
            if (!mask || mask->at(i, j)) mx = std::max(mx, xv[i * n + j]);
        if (!std::isfinite(mx))
            throw DegenerateMaskError("softmax_rows: row " + std::to_string(i) +
                                      " has every position masked out");
        double z = 0.0;
        for (size_t j = 0; j < n; ++j) {
            if (!mask || mask->at(i, j)) {
                const double e = std::exp(xv[i * n + j] - mx);
                out[i * n + j] = e;
                z += e;
            }
        }
        for (size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    return detail::make_op({m, n}, std::move(out), {x.node()},
                           [m, n](const detail::TensorNode& self, const std::vector<double>& g,
                                  const detail::GradSinks& sinks) {
                               if (!sinks[0]) return;
                               auto& dx = *sinks[0];
                               const auto& y = self.values;
                               for (size_t i = 0; i < m; ++i) {
                                   double dot = 0.0;
                                   for (size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                                   for (size_t j = 0; j < n; ++j)
                                       dx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                               }
                           });
}

// Normalizes over the last dimension, then applies the affine (gain, bias).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if (x.rank() < 1) throw DimensionError("layer_norm requires rank >= 1");
    const size_t d = x.shape().back();
    if (d == 0) throw DimensionError("layer_norm: last dimension is zero");
    if (gain.rank() != 1 || gain.size() != d || bias.rank() != 1 || bias.size() != d)
        throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(d) +
                             "], got " + shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    const size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - mu) * inv * gv[j] + bv[j];
    }
    return detail::make_op(
        x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
        [rows, d, eps](const detail::TensorNode& self, const std::vector<double>& g,
                       const detail::GradSinks& sinks) {
            const auto& xv = self.inputs[0]->values;
            const auto& gv = self.inputs[1]->values;
            for (size_t r = 0; r < rows; ++r) {
                const double* xr = xv.data() + r * d;
                const double* gr = g.data() + r * d;
                double mu = 0.0;
                for (size_t j = 0; j < d; ++j) mu += xr[j];
                mu /= static_cast<double>(d);
                double var = 0.0;
                for (size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var /= static_cast<double>(d);
                const double inv = 1.0 / std::sqrt(var + eps);
                // q = gain .* g; dx = inv * (q - mean(q) - xhat * mean(q .* xhat))
                double mean_q = 0.0, mean_qx = 0.0;
                for (size_t j = 0; j < d; ++j) {
                    const double xhat = (xr[j] - mu) * inv;
                    const double q = gv[j] * gr[j];
                    mean_q += q;
                    mean_qx += q * xhat;
                }
                mean_q /= static_cast<double>(d);
                mean_qx /= static_cast<double>(d);
                if (sinks[0]) {
                    auto& dx = *sinks[0];
                    for (size_t j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mu) * inv;
                        const double q = gv[j] * gr[j];
                        dx[r * d + j] += inv * (q - mean_q - xhat * mean_qx);
                    }
                }
                if (sinks[1]) {
                    auto& dg = *sinks[1];
                    for (size_t j = 0; j < d; ++j) dg[j] += gr[j] * (xr[j] - mu) * inv;
                }
                if (sinks[2]) {
                    auto& db = *sinks[2];
                    for (size_t j = 0; j < d; ++j) db[j] += gr[j];
                }
            }
        });
}

// Length-preserving 1-D convolution; kernels shaped [k, d_in, d_out], odd k,
// stride 1, symmetric zero padding of (k-1)/2.
inline Tensor conv1d(const Tensor& x, const Tensor& kernels) {
    if (x.rank() != 2 || kernels.rank() != 3)
        throw DimensionError("conv1d: expected input [T x d_in] and kernels [k x d_in x d_out], got " +
                             shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
    const size_t T = x.shape()[0], din = x.shape()[1];
    const size_t k = kernels.shape()[0], kin = kernels.shape()[1], dout = kernels.shape()[2];
    if (kin != din)
        throw DimensionError("conv1d: kernel input width " + std::to_string(kin) +
                             " does not match input feature width " + std::to_string(din));
    if (k % 2 == 0) throw ConfigError("conv1d: kernel size must be odd, got " + std::to_string(k));
    const size_t half = (k - 1) / 2;
    std::vector<double> out(T * dout, 0.0);
    const auto& xv = x.values();
    const auto& wv = kernels.values();
    for (size_t t = 0; t < T; ++t) {
        for (size_t j = 0; j < k; ++j) {
            const long long src = static_cast<long long>(t) + static_cast<long long>(j) -
                                  static_cast<long long>(half);
            if (src < 0 || src >= static_cast<long long>(T)) continue;
            for (size_t i = 0; i < din; ++i) {
                const double s = xv[static_cast<size_t>(src) * din + i];
                if (s == 0.0) continue;
                const double* wrow = wv.data() + (j * din + i) * dout;
                double* orow = out.data() + t * dout;
                for (size_t o = 0; o < dout; ++o) orow[o] += s * wrow[o];
            }
        }
    }
    return detail::make_op(
        {T, dout}, std::move(out), {x.node(), kernels.node()},
        [T, din, k, dout, half](const detail::TensorNode& self, const std::vector<double>& g,
                                const detail::GradSinks& sinks) {
            const auto& xv = self.inputs[0]->values;
            const auto& wv = self.inputs[1]->values;
            for (size_t t = 0; t < T; ++t) {
                for (size_t j = 0; j < k; ++j) {
                    const long long src = static_cast<long long>(t) + static_cast<long long>(j) -
                                          static_cast<long long>(half);
                    if (src < 0 || src >= static_cast<long long>(T)) continue;
                    const double* grow = g.data() + t * dout;
                    for (size_t i = 0; i < din; ++i) {
                        const double* wrow = wv.data() + (j * din + i) * dout;
                        if (sinks[0]) {
                            double acc = 0.0;
                            for (size_t o = 0; o < dout; ++o) acc += grow[o] * wrow[o];
                            (*sinks[0])[static_cast<size_t>(src) * din + i] += acc;
                        }
                        if (sinks[1]) {
                            const double s = xv[static_cast<size_t>(src) * din + i];
                            if (s == 0.0) continue;
                            double* drow = (*sinks[1]).data() + (j * din + i) * dout;
                            for (size_t o = 0; o < dout; ++o) drow[o] += s * grow[o];
                        }
                    }
                }
            }
        });
}

// Concatenates rank-2 tensors along the feature (column) axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const size_t m = parts[0].rows();
    size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.rows() != m)
            throw DimensionError("concat_cols: all inputs must share the row count; got " +
                                 shape_str(p.shape()) + " vs " + std::to_string(m) + " rows");
        total += p.cols();
    }
    std::vector<double> out(m * total);
    std::vector<size_t> widths;
    size_t off = 0;
    for (const auto& p : parts) {
        const size_t w = p.cols();
        widths.push_back(w);
        const auto& pv = p.values();
        for (size_t i = 0; i < m; ++i)
            std::copy(pv.begin() + i * w, pv.begin() + (i + 1) * w, out.begin() + i * total + off);
        off += w;
    }
    std::vector<detail::NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_op({m, total}, std::move(out), std::move(nodes),
                           [m, total, widths](const detail::TensorNode&, const std::vector<double>& g,
                                              const detail::GradSinks& sinks) {
                               size_t off = 0;
                               for (size_t p = 0; p < widths.size(); ++p) {
                                   const size_t w = widths[p];
                                   if (sinks[p]) {
                                       auto& dp = *sinks[p];
                                       for (size_t i = 0; i < m; ++i)
                                           for (size_t j = 0; j < w; ++j)
                                               dp[i * w + j] += g[i * total + off + j];
                                   }
                                   off += w;
                               }
                           });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) { return concat_cols(std::vector<Tensor>{a, b}); }

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    std::vector<double> out = x.values();
    return detail::make_op(std::move(shape), std::move(out), {x.node()},
                           [](const detail::TensorNode&, const std::vector<double>& g,
                              const detail::GradSinks& sinks) { detail::add_into(sinks[0], g); });
}

// Gathers rows of an embedding table; gradients scatter-add back into the rows.
inline Tensor rows_select(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2)
        throw DimensionError("rows_select requires a rank-2 table, got " + shape_str(table.shape()));
    const size_t V = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || static_cast<size_t>(id) >= V)
            throw ContractError("rows_select: id " + std::to_string(id) + " outside table of " +
                                std::to_string(V) + " rows");
    const size_t t = ids.size();
    std::vector<double> out(t * d);
    const auto& tv = table.values();
    for (size_t r = 0; r < t; ++r)
        std::copy(tv.begin() + static_cast<size_t>(ids[r]) * d,
                  tv.begin() + (static_cast<size_t>(ids[r]) + 1) * d, out.begin() + r * d);
    return detail::make_op({t, d}, std::move(out), {table.node()},
                           [ids, d](const detail::TensorNode&, const std::vector<double>& g,
                                    const detail::GradSinks& sinks) {
                               if (!sinks[0]) return;
                               auto& dt = *sinks[0];
                               for (size_t r = 0; r < ids.size(); ++r)
                                   for (size_t j = 0; j < d; ++j)
                                       dt[static_cast<size_t>(ids[r]) * d + j] += g[r * d + j];
                           });
}

// Inverted dropout: kept entries scaled by 1/(1-p) so eval needs no rescale.
// Callers skip this op entirely at eval time.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
    const size_t n = x.size();
    std::vector<double> mask(n);
    const double keep_scale = 1.0 / (1.0 - p);
    for (size_t i = 0; i < n; ++i) mask[i] = rng.uniform() >= p ? keep_scale : 0.0;
    std::vector<double> out(n);
    const auto& xv = x.values();
    for (size_t i = 0; i < n; ++i) out[i] = xv[i] * mask[i];
    return detail::make_op(x.shape(), std::move(out), {x.node()},
                           [mask = std::move(mask), n](const detail::TensorNode&,
                                                       const std::vector<double>& g,
                                                       const detail::GradSinks& sinks) {
                               if (!sinks[0]) return;
                               auto& dx = *sinks[0];
                               for (size_t i = 0; i < n; ++i) dx[i] += g[i] * mask[i];
                           });
}

// Elementwise binary cross-entropy on logits: max(z,0) - z*t + log(1 + exp(-|z|)).
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape())
        throw DimensionError("bce_with_logits: shapes differ, " + shape_str(logits.shape()) +
                             " vs " + shape_str(targets.shape()));
    const size_t n = logits.size();
    std::vector<double> out(n);
    const auto& zv = logits.values();
    const auto& tv = targets.values();
    for (size_t i = 0; i < n; ++i) {
        const double z = zv[i];
        out[i] = std::max(z, 0.0) - z * tv[i] + std::log1p(std::exp(-std::abs(z)));
    }
    return detail::make_op(logits.shape(), std::move(out), {logits.node(), targets.node()},
                           [n](const detail::TensorNode& self, const std::vector<double>& g,
                               const detail::GradSinks& sinks) {
                               const auto& zv = self.inputs[0]->values;
                               const auto& tv = self.inputs[1]->values;
                               if (sinks[0]) {
                                   auto& dz = *sinks[0];
                                   for (size_t i = 0; i < n; ++i)
                                       dz[i] += g[i] * (detail::stable_sigmoid(zv[i]) - tv[i]);
                               }
                               if (sinks[1]) {
                                   auto& dt = *sinks[1];
                                   for (size_t i = 0; i < n; ++i) dt[i] += -zv[i] * g[i];
                               }
                           });
}

// ---------------------------------------------------------------------------
// Reverse-mode differentiation
// ---------------------------------------------------------------------------

namespace detail {

// The replay record assembled for one backward pass: nodes in topological
// order, each visited exactly once, adjoints accumulated per use.
struct ComputationRecord {
    std::vector<TensorNode*> topo_order;
    std::unordered_map<TensorNode*, std::vector<double>> adjoint;
};

inline void build_topo(TensorNode* root, ComputationRecord& rec) {
    std::unordered_map<TensorNode*, int> state; // 0 unseen, 1 open, 2 done
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root, 0);
    state[root] = 1;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            TensorNode* child = node->inputs[next++].get();
            if (state[child] == 0) {
                state[child] = 1;
                stack.emplace_back(child, 0);
            }
        } else {
            state[node] = 2;
            rec.topo_order.push_back(node);
            stack.pop_back();
        }
    }
}

} // namespace detail

// Populates gradients of every tracked tensor reachable from `loss`.
// Repeated calls accumulate (sum) into existing gradients.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.tracked())
        throw ContractError("backward: loss is not connected to any tracked tensor");

    detail::ComputationRecord rec;
    detail::build_topo(loss.node().get(), rec);
    rec.adjoint[loss.node().get()] = {1.0};

    for (auto it = rec.topo_order.rbegin(); it != rec.topo_order.rend(); ++it) {
        detail::TensorNode* node = *it;
        auto found = rec.adjoint.find(node);
        if (found == rec.adjoint.end()) continue; // no gradient flowed here
        if (!node->backward) continue;            // leaf or constant
        // element references survive rehashing; the find() iterator would not
        std::vector<double>& out_grad = found->second;
        detail::GradSinks sinks;
        sinks.reserve(node->inputs.size());
        for (const auto& in : node->inputs) {
            if (!in->tracked()) {
                sinks.push_back(nullptr);
                continue;
            }
            auto [slot, inserted] = rec.adjoint.try_emplace(in.get());
            if (inserted) slot->second.assign(in->values.size(), 0.0);
            sinks.push_back(&slot->second);
        }
        node->backward(*node, out_grad, sinks);
    }

    // Fold the per-pass adjoints into the persistent grad buffers.
    for (detail::TensorNode* node : rec.topo_order) {
        auto found = rec.adjoint.find(node);
        if (found == rec.adjoint.end()) continue;
        if (node->grad.empty()) node->grad.assign(node->values.size(), 0.0);
        for (size_t i = 0; i < node->grad.size(); ++i) node->grad[i] += found->second[i];
    }
}

} // namespace bmt
